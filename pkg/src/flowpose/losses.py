"""Training losses: likelihood, reprojection, 3D, adversarial, orthonormality.

``total_loss`` builds the whole mixed-supervision objective for one batch of
sequences: the negative log-likelihood of ground-truth poses, expectation
terms over drawn samples (reprojection + adversarial), supervised terms on
the density mode (3D joints, reprojection, adversarial, pose and shape
parameters), and the orthonormality residual of drawn samples. Every term is
gated on its annotation being present; the report maps term names to
unweighted values and the returned scalar is exactly the dot product of that
report with the loss weights.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import body_model as bm
from . import camera
from . import discriminator as disc
from . import flow as fl
from . import rotations as rot
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    nll: float = 0.001
    exp_2d: float = 0.001
    exp_adv: float = 0.01
    mode_2d: float = 0.01
    mode_adv: float = 0.01
    mode_3d: float = 0.05
    mode_theta: float = 0.001
    mode_beta: float = 0.0005
    orth: float = 0.1

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


TERM_ORDER = tuple(f.name for f in fields(LossWeights))


@dataclass
class Supervision:
    """Per-batch annotations; a None field gates its loss terms off.

    Arrays are flattened over frames: theta6d (F, d), beta (F, B),
    joints3d (F, K, 3), keypoints2d (F, K, 2) with conf (F, K).
    """
    theta6d: np.ndarray | None = None
    beta: np.ndarray | None = None
    joints3d: np.ndarray | None = None
    keypoints2d: np.ndarray | None = None
    conf: np.ndarray | None = None

    def __post_init__(self):
        if (self.keypoints2d is None) != (self.conf is None):
            raise ValueError("keypoints2d and conf must be supplied together")
        if all(getattr(self, f.name) is None for f in fields(self)):
            raise ValueError("supervision must carry at least one annotation")
        if self.conf is not None and (np.any(self.conf < 0) or np.any(self.conf > 1)):
            raise ValueError("confidences must lie in [0, 1]")


def weighted_reproj(pred_kp: Tensor, gt_kp: np.ndarray, conf: np.ndarray) -> Tensor:
    """Per-frame confidence-weighted squared reprojection error: (F,).

    Frames whose confidences sum to zero are rejected; gate them out before
    calling.
    """
    conf = np.asarray(conf, dtype=np.float64)
    totals = conf.sum(axis=1)
    if np.any(totals <= 0.0):
        raise ValueError("loss_2d: a frame has all-zero keypoint confidences")
    diff2 = ad.squared_norm(pred_kp - Tensor(np.asarray(gt_kp)), axis=2)   # (F, K)
    weighted = ad.tsum(diff2 * Tensor(conf), axis=1)
    return weighted / Tensor(totals)


def loss_2d(pred_joints3d: Tensor, scale: Tensor, trans: Tensor,
            gt_kp: np.ndarray, conf: np.ndarray) -> Tensor:
    """Mean over frames of the weighted squared reprojection error."""
    pred_kp = camera.project_t(pred_joints3d, scale, trans)
    return ad.tmean(weighted_reproj(pred_kp, gt_kp, conf))


def loss_3d(pred_joints3d: Tensor, gt_joints3d: np.ndarray) -> Tensor:
    """Mean squared joint error after root-centring both sets on joint 0."""
    gt = np.asarray(gt_joints3d, dtype=np.float64)
    frames, k, _ = gt.shape
    root_p = ad.expand(pred_joints3d[:, 0:1, :], pred_joints3d.shape)
    centred_p = pred_joints3d - root_p
    centred_g = gt - gt[:, 0:1, :]
    return ad.tmean(ad.squared_norm(centred_p - Tensor(centred_g), axis=2))


def loss_nll(gt_theta6d: np.ndarray, contexts: Tensor, params: fl.FlowParams) -> Tensor:
    """Mean negative log-likelihood of ground-truth pose vectors."""
    return -ad.tmean(fl.log_prob(Tensor(np.asarray(gt_theta6d)), contexts, params))


def orth_term(theta6d: Tensor, joints: int) -> Tensor:
    """Mean orthonormality residual of the actual per-joint 6D encodings."""
    lead = theta6d.shape[:-1]
    per_joint = ad.reshape(theta6d, lead + (joints, 6)) * rot.POSE_SCALE + Tensor(rot.IDENTITY_6D)
    return ad.tmean(rot.orth_residual_t(per_joint))


def pose_param_term(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean squared parameter distance per frame (pose vectors or betas)."""
    return ad.tmean(ad.squared_norm(pred - Tensor(np.asarray(gt)), axis=1))


@dataclass
class BatchGraph:
    """Intermediate tensors of one training forward pass."""
    total: Tensor
    report: dict
    sample_pose_data: np.ndarray   # (S*Bseq, T, d) detached fake sequences
    mode_pose_data: np.ndarray     # (Bseq, T, d)


def total_loss(body: bm.BodyModel, flow_params: fl.FlowParams,
               disc_params: disc.DiscParams, contexts: Tensor,
               betas_pred: Tensor, scale_pred: Tensor, trans_pred: Tensor,
               supervision: Supervision, seq_count: int, seq_len: int,
               weights: LossWeights, rng: np.random.Generator,
               sample_count: int = 2) -> BatchGraph:
    """Assemble the weighted training objective for one batch.

    ``contexts`` and the head outputs are (F, *) tensors with F = seq_count *
    seq_len flattened in sequence-major order. Drawn samples and the mode
    share one batched body-model evaluation.
    """
    frames = seq_count * seq_len
    d = flow_params.dim
    joints = body.num_joints
    if contexts.shape[0] != frames:
        raise ValueError(f"total_loss: contexts rows {contexts.shape[0]} != {seq_count}x{seq_len}")

    thetas_s, _z = fl.sample_batch(sample_count, contexts, flow_params, rng)  # (S, F, d)
    thetas_flat = ad.reshape(thetas_s, (sample_count * frames, d))
    theta_mode = fl.mode(contexts, flow_params)                               # (F, d)

    all_theta = ad.concatenate([thetas_flat, theta_mode], axis=0)
    all_rots = rot.pose_vector_to_matrices_t(all_theta, joints)

    def tile(t: Tensor, reps: int) -> Tensor:
        return ad.concatenate([t] * reps, axis=0)

    all_betas = tile(betas_pred, sample_count + 1)
    mesh = bm.forward(body, all_rots, all_betas)
    all_joints3d = bm.regress_joints3d(body, mesh)                            # ((S+1)F, K, 3)
    sample_joints = all_joints3d[:sample_count * frames]
    mode_joints = all_joints3d[sample_count * frames:]

    report: dict[str, Tensor] = {}

    if supervision.theta6d is not None:
        report["nll"] = loss_nll(supervision.theta6d, contexts, flow_params)
        report["mode_theta"] = pose_param_term(theta_mode, supervision.theta6d)
    if supervision.keypoints2d is not None:
        # frames with every joint occluded carry no 2D annotation
        visible = np.where(supervision.conf.sum(axis=1) > 0.0)[0]
        if visible.size:
            vis_s = np.concatenate([visible + k * frames for k in range(sample_count)])
            report["exp_2d"] = loss_2d(ad.take(sample_joints, vis_s, axis=0),
                                       ad.take(tile(scale_pred, sample_count), vis_s, axis=0),
                                       ad.take(tile(trans_pred, sample_count), vis_s, axis=0),
                                       np.tile(supervision.keypoints2d, (sample_count, 1, 1))[vis_s],
                                       np.tile(supervision.conf, (sample_count, 1))[vis_s])
            report["mode_2d"] = loss_2d(ad.take(mode_joints, visible, axis=0),
                                        ad.take(scale_pred, visible, axis=0),
                                        ad.take(trans_pred, visible, axis=0),
                                        supervision.keypoints2d[visible],
                                        supervision.conf[visible])
    if supervision.joints3d is not None:
        report["mode_3d"] = loss_3d(mode_joints, supervision.joints3d)
    if supervision.beta is not None:
        report["mode_beta"] = pose_param_term(betas_pred, supervision.beta)

    fake_seqs = ad.reshape(thetas_flat, (sample_count * seq_count, seq_len, d))
    mode_seqs = ad.reshape(theta_mode, (seq_count, seq_len, d))
    report["exp_adv"] = disc.adv_loss(disc.discriminate(fake_seqs, disc_params))
    report["mode_adv"] = disc.adv_loss(disc.discriminate(mode_seqs, disc_params))
    report["orth"] = orth_term(thetas_flat, joints)

    total = None
    wdict = weights.as_dict()
    for name in TERM_ORDER:
        if name not in report:
            continue
        term = report[name] * wdict[name]
        total = term if total is None else total + term
    if not np.isfinite(total.data):
        bad = [n for n, t in report.items() if not np.all(np.isfinite(t.data))]
        raise ValueError(f"total_loss: non-finite loss term(s): {', '.join(bad) or 'total'}")

    return BatchGraph(
        total=total,
        report={name: float(t.data) for name, t in report.items()},
        sample_pose_data=fake_seqs.data.copy(),
        mode_pose_data=mode_seqs.data.copy(),
    )


def report_dot_weights(report: dict, weights: LossWeights) -> float:
    """Recombine a per-term report with the weights (the total's definition)."""
    wdict = weights.as_dict()
    total = 0.0
    for name in TERM_ORDER:
        if name in report:
            total += wdict[name] * report[name]
    return total

"""Keypoint fitting with the flow as a video-conditioned pose prior.

The optimization variable for the pose is the latent z of each frame, never
the pose vector itself: the reported pose is always exactly the flow image
of the current z, and the prior energy is the closed form

    -log p(theta | c) = ||z||^2 / 2 + (d/2) log 2pi + log|det df/dz|

with the log-det a constant of the checkpoint. The energy

    E = w_kp * E_kp + w_prior * E_prior + w_shape * E_shape

penalizes confidence-weighted squared reprojection error, low pose
likelihood, and large shape coefficients. All per-frame variables (z, shape,
camera) are optimized jointly with Adam; the returned state is the
lowest-energy iterate, so the final energy never exceeds the initial one.
The camera scale is parametrized through exp and stays positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import body_model as bm
from . import camera
from . import flow as fl
from . import losses
from . import rotations as rot
from .autodiff import Tensor
from .regression_head import predict_shape_camera
from .training import ModelBundle, sequence_contexts


class FitDivergence(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class FitConfig:
    w_kp: float = 1.0
    w_prior: float = 0.1
    w_shape: float = 0.001
    lr: float = 0.01
    max_iters: int = 300
    tol: float = 1e-9      # minimum energy decrease counted as progress
    patience: int = 25     # iterations without progress before stopping

    def __post_init__(self):
        if min(self.w_kp, self.w_prior, self.w_shape) < 0:
            raise ValueError("fit weights must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class FitResult:
    theta6d: np.ndarray        # (T, d) fitted pose vectors = flow(z)
    theta_aa: np.ndarray       # (T, J, 3) axis-angle export
    betas: np.ndarray          # (T, B)
    cams: np.ndarray           # (T, 3) = (s, tx, ty), s > 0
    z: np.ndarray              # (T, d) fitted latents
    energy_trace: list = field(default_factory=list)
    breakdown: dict = field(default_factory=dict)   # weighted terms of the returned state
    initial_energy: float = 0.0
    final_energy: float = 0.0


def _energy_graph(bundle: ModelBundle, flow_params: fl.FlowParams, contexts: np.ndarray,
                  keypoints: np.ndarray, conf: np.ndarray, config: FitConfig,
                  z: Tensor, betas: Tensor, cam_raw: Tensor):
    """Energy tensor plus weighted per-term breakdown for the current state."""
    frames = contexts.shape[0]
    d = flow_params.dim
    with ad.no_grad():
        logdet = float(fl.log_det_forward(flow_params).data)
    const = 0.5 * d * math.log(2.0 * math.pi) + logdet

    terms: dict[str, Tensor] = {}
    visible = np.where(conf.sum(axis=1) > 0.0)[0]
    if config.w_kp > 0.0 and visible.size:
        theta = fl.flow_forward(z, Tensor(contexts), flow_params)
        rots = rot.pose_vector_to_matrices_t(theta, bundle.body.num_joints)
        mesh = bm.forward(bundle.body, rots, betas)
        joints = bm.regress_joints3d(bundle.body, mesh)
        pred_kp = camera.project_t(joints, ad.exp(cam_raw[:, 0:1]), cam_raw[:, 1:3])
        reproj = losses.weighted_reproj(ad.take(pred_kp, visible, axis=0),
                                        keypoints[visible], conf[visible])
        terms["kp"] = ad.tmean(reproj) * config.w_kp
    if config.w_prior > 0.0:
        prior = ad.tmean(ad.squared_norm(z, axis=1)) * 0.5 + const
        terms["prior"] = prior * config.w_prior
    if config.w_shape > 0.0:
        terms["shape"] = ad.tmean(ad.squared_norm(betas, axis=1)) * config.w_shape

    total = None
    for name in ("kp", "prior", "shape"):
        if name in terms:
            total = terms[name] if total is None else total + terms[name]
    if total is None:
        total = Tensor(0.0)
    return total, {name: float(t.data) for name, t in terms.items()}


def energy(bundle: ModelBundle, contexts: np.ndarray, keypoints: np.ndarray,
           conf: np.ndarray, config: FitConfig, z: np.ndarray,
           betas: np.ndarray, cams: np.ndarray):
    """Evaluate E and its breakdown at an explicit state (no optimization).

    ``cams`` carries (s, tx, ty) with s > 0; internally s maps back through
    log for the raw parametrization.
    """
    cams = np.asarray(cams, dtype=np.float64)
    if np.any(cams[:, 0] <= 0.0):
        raise ValueError("energy: camera scale must be positive")
    raw = np.column_stack([np.log(cams[:, 0]), cams[:, 1:]])
    with ad.no_grad():
        total, breakdown = _energy_graph(bundle, bundle.flow, contexts, keypoints, conf,
                                         config, Tensor(z), Tensor(betas), Tensor(raw))
    return float(total.data), breakdown


def fit_sequence(bundle: ModelBundle, observations: np.ndarray, keypoints: np.ndarray,
                 conf: np.ndarray, config: FitConfig | None = None,
                 initial_z: np.ndarray | None = None) -> FitResult:
    """Fit one sequence's poses, shapes and cameras to 2D keypoints.

    ``observations`` (T, 3J) feed the regression pass that supplies the
    per-frame contexts and the initial shape/camera estimates; the latents
    start at z = 0 (the density mode). ``keypoints`` (T, J, 2) with ``conf``
    (T, J) are the fitting targets.
    """
    config = config or FitConfig()
    frames = keypoints.shape[0]
    with ad.no_grad():
        contexts = sequence_contexts(bundle, observations[None]).data
        betas0, scale0, trans0 = predict_shape_camera(Tensor(contexts), bundle.head)
        cam_raw0 = np.column_stack([np.log(scale0.data[:, 0]), trans0.data])

    z = ad.param(np.zeros((frames, bundle.flow.dim)) if initial_z is None else
                 np.array(initial_z, dtype=np.float64))
    betas = ad.param(betas0.data.copy())
    cam_raw = ad.param(cam_raw0)
    variables = {"z": z, "betas": betas, "cam": cam_raw}
    opt = ad.Adam(variables, lr=config.lr)

    trace: list[float] = []
    best = None
    best_energy = math.inf
    stall = 0
    for _ in range(config.max_iters):
        total, breakdown = _energy_graph(bundle, bundle.flow, contexts, keypoints, conf,
                                         config, z, betas, cam_raw)
        e = float(total.data)
        if not math.isfinite(e):
            raise FitDivergence("fit: non-finite energy", trace)
        trace.append(e)
        if e < best_energy - config.tol:
            best_energy = e
            best = (z.data.copy(), betas.data.copy(), cam_raw.data.copy(), dict(breakdown))
            stall = 0
        else:
            if e < best_energy:
                best_energy = e
                best = (z.data.copy(), betas.data.copy(), cam_raw.data.copy(), dict(breakdown))
            stall += 1
        # 10x-initial divergence abort; floor shields small or negative
        # initial energies from spurious triggers
        if e > 10.0 * max(trace[0], 1.0):
            raise FitDivergence(
                f"fit: energy {e:.4g} exceeded 10x the initial {trace[0]:.4g}", trace)
        if stall >= config.patience:
            break
        grads = ad.backward(total, params=variables.values())
        opt.step(grads)

    z.data, betas.data, raw_best, breakdown = best
    trace.append(best_energy)  # energy of the returned state
    with ad.no_grad():
        theta = fl.flow_forward(z, Tensor(contexts), bundle.flow).data
    theta_aa = np.stack([
        rot.pose_vector_to_axis_angles(theta[t], bundle.body.num_joints) for t in range(frames)
    ])
    cams = np.column_stack([np.exp(raw_best[:, 0]), raw_best[:, 1:]])
    return FitResult(theta6d=theta, theta_aa=theta_aa, betas=betas.data.copy(), cams=cams,
                     z=z.data.copy(), energy_trace=trace, breakdown=breakdown,
                     initial_energy=trace[0], final_energy=best_energy)


def fit_result_json(result: FitResult) -> dict:
    """Serializable per-sequence fit output (documented schema)."""
    frames = result.theta_aa.shape[0]
    return {
        "frames": [
            {
                "theta_axis_angle": result.theta_aa[t].reshape(-1).tolist(),
                "beta": result.betas[t].tolist(),
                "cam": {"s": float(result.cams[t, 0]),
                        "tx": float(result.cams[t, 1]),
                        "ty": float(result.cams[t, 2])},
            }
            for t in range(frames)
        ],
        "energy_trace": [float(e) for e in result.energy_trace],
        "initial_energy": float(result.initial_energy),
        "final_energy": float(result.final_energy),
        "breakdown": {k: float(v) for k, v in result.breakdown.items()},
    }

"""Mixed-supervision training loop, configuration, and checkpointing.

Each step alternates a generator update (the full weighted objective over a
batch of sequences) with a discriminator update (least-squares real/fake
targets, fake poses detached). Real motion sequences come from the
generator pool's clean ground-truth trajectories. Training is deterministic
under a fixed seed: batch order, sample draws, and gradient reduction are
all derived from the config seed.

The config file is INI-style with sections [model], [flow], [encoder] and
[train]; see ``TrainConfig.from_file``. Checkpoints carry every parameter
namespace plus the bundle geometry, so evaluation and fitting can rebuild
the networks from the checkpoint alone (plus the body-model file).
"""

from __future__ import annotations

import configparser
import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import body_model as bm
from . import data_synth as ds
from . import discriminator as disc
from . import flow as fl
from . import losses
from . import metrics as mx
from . import regression_head as rh
from . import rotations as rot
from . import temporal_encoder as te
from .assets import load_toy_model, toy_model_json_path
from .autodiff import Tensor

log = logging.getLogger("flowpose")

METRICS_COLUMNS = [
    "epoch", "nll", "exp_2d", "exp_adv", "mode_2d", "mode_adv", "mode_3d",
    "mode_theta", "mode_beta", "orth", "total", "disc_loss", "val_nll", "val_pa_mpjpe",
]


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss appears; the last epoch checkpoint survives."""


@dataclass
class TrainConfig:
    model_path: str = "toy"
    flow_blocks: int = fl.DEFAULT_BLOCKS
    flow_hidden: int = fl.DEFAULT_HIDDEN
    feature_dim: int = 128
    context_dim: int = 256
    disc_hidden: int = disc.DEFAULT_HIDDEN
    epochs: int = 10
    batch: int = 32
    frames: int = 16
    lr: float = 5e-5
    seed: int = 0
    sample_count: int = 2
    freeze_encoder: bool = False
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case ("T")
        read = parser.read(path)
        if not read:
            raise ValueError(f"config file not found or unreadable: {path}")
        cfg = cls()
        if parser.has_section("model"):
            cfg.model_path = parser.get("model", "path", fallback=cfg.model_path)
        if parser.has_section("flow"):
            cfg.flow_blocks = parser.getint("flow", "blocks", fallback=cfg.flow_blocks)
            cfg.flow_hidden = parser.getint("flow", "hidden", fallback=cfg.flow_hidden)
        if parser.has_section("encoder"):
            cfg.feature_dim = parser.getint("encoder", "feature_dim", fallback=cfg.feature_dim)
            cfg.context_dim = parser.getint("encoder", "context_dim", fallback=cfg.context_dim)
        if parser.has_section("train"):
            sec = parser["train"]
            cfg.epochs = int(sec.get("epochs", cfg.epochs))
            cfg.batch = int(sec.get("batch", cfg.batch))
            cfg.frames = int(sec.get("T", cfg.frames))
            cfg.lr = float(sec.get("lr", cfg.lr))
            cfg.seed = int(sec.get("seed", cfg.seed))
            cfg.sample_count = int(sec.get("sample_count", cfg.sample_count))
            cfg.freeze_encoder = sec.get("freeze_encoder", str(cfg.freeze_encoder)).lower() in ("1", "true", "yes")
        return cfg

    def resolve_model(self) -> bm.BodyModel:
        if self.model_path == "toy":
            return load_toy_model()
        return bm.load_model(self.model_path)

    def resolved_model_path(self) -> str:
        return toy_model_json_path() if self.model_path == "toy" else self.model_path


@dataclass
class ModelBundle:
    """Every trainable component plus the (frozen) body model."""
    body: bm.BodyModel
    obs: ds.ObsEncoderParams
    encoder: te.EncoderParams
    head: rh.HeadParams
    flow: fl.FlowParams
    disc: disc.DiscParams

    def generator_tensors(self, include_obs: bool = True) -> dict[str, Tensor]:
        out = {}
        if include_obs:
            out.update(self.obs.named_tensors())
        out.update(self.encoder.named_tensors())
        out.update(self.head.named_tensors())
        out.update(self.flow.named_tensors())
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = self.generator_tensors()
        out.update(self.disc.named_tensors())
        return out

    def geometry(self) -> dict:
        return {
            "joints": self.body.num_joints,
            "betas": self.body.num_betas,
            "pose_dim": self.flow.dim,
            "feature_dim": self.obs.feature_dim,
            "context_dim": self.encoder.context_dim,
            "flow_blocks": len(self.flow.blocks),
            "flow_hidden": self.flow.blocks[0].w1.shape[0],
            "disc_hidden": self.disc.hidden,
        }


def init_bundle(config: TrainConfig, body: bm.BodyModel | None = None) -> ModelBundle:
    body = body or config.resolve_model()
    root = np.random.default_rng([config.seed, 0xB0D1])
    pose_dim = body.pose_dim
    return ModelBundle(
        body=body,
        obs=ds.init_obs_encoder(body.num_joints, config.feature_dim,
                                rng=np.random.default_rng(root.integers(2**32))),
        encoder=te.init_encoder(config.feature_dim, config.context_dim,
                                rng=np.random.default_rng(root.integers(2**32))),
        head=rh.init_head(config.context_dim, body.num_betas,
                          rng=np.random.default_rng(root.integers(2**32))),
        flow=fl.init_flow(pose_dim, config.context_dim, config.flow_blocks, config.flow_hidden,
                          rng=np.random.default_rng(root.integers(2**32))),
        disc=disc.init_disc(pose_dim, config.disc_hidden,
                            rng=np.random.default_rng(root.integers(2**32))),
    )


def calibrate_bundle(bundle: ModelBundle, observations: np.ndarray) -> None:
    """Data-dependent centering of every tanh hidden layer (ActNorm-style).

    Sets the first-layer biases so pre-activations are zero-mean on a
    calibration batch of observations (M, T, 3J). Readout layers stay zero,
    so the flow is still exactly the identity and the head still predicts
    (beta=0, s=1, t=0); only the internal feature coordinates move. Centered
    features decouple the batch-constant gradient component from the
    pose-tracking component, which matters at small learning rates.
    """
    m, t, obs_dim = observations.shape
    flat = observations.reshape(m * t, obs_dim)
    with ad.no_grad():
        bundle.obs.b1.data = -(bundle.obs.w1.data @ flat.mean(axis=0))
        feats = ds.encode_observation(flat, bundle.obs).data
        f_mean = feats.mean(axis=0)
        for scorer in bundle.encoder.scorers:
            scorer.b1.data = -(scorer.w1.data @ f_mean)
        c_mean = bundle.encoder.wc.data @ f_mean + bundle.encoder.bc.data
        bundle.head.b1.data = -(bundle.head.w1.data @ c_mean)
        for block in bundle.flow.blocks:
            active = block.w1.shape[1] - bundle.flow.context_dim
            block.b1.data = -(block.w1.data[:, active:] @ c_mean)


def save_bundle(bundle: ModelBundle, path, extra: dict | None = None) -> None:
    meta = bundle.geometry()
    if extra:
        meta.update(extra)
    ad.save_checkpoint(path, bundle.named_tensors(), extra=meta)


def load_bundle(path, body: bm.BodyModel) -> ModelBundle:
    arrays, meta = ad.load_checkpoint(path)
    cfg = TrainConfig(
        feature_dim=int(meta["feature_dim"]),
        context_dim=int(meta["context_dim"]),
        flow_blocks=int(meta["flow_blocks"]),
        flow_hidden=int(meta["flow_hidden"]),
        disc_hidden=int(meta["disc_hidden"]),
    )
    bundle = init_bundle(cfg, body)
    if bundle.flow.dim != int(meta["pose_dim"]):
        raise ValueError(f"checkpoint pose dimension {meta['pose_dim']} does not match "
                         f"the body model ({bundle.flow.dim})")
    bundle.obs.load_arrays(arrays)
    bundle.encoder.load_arrays(arrays)
    bundle.head.load_arrays(arrays)
    bundle.flow.load_arrays(arrays)
    bundle.disc.load_arrays(arrays)
    return bundle


# -- shared pipeline pieces ------------------------------------------------

def sequence_contexts(bundle: ModelBundle, observations: np.ndarray) -> Tensor:
    """Observations (Bseq, T, 3J) -> per-frame contexts (Bseq*T, C)."""
    b, t, obs_dim = observations.shape
    feats_flat = ds.encode_observation(observations.reshape(b * t, obs_dim), bundle.obs)
    feats = ad.reshape(feats_flat, (b, t, bundle.obs.feature_dim))
    ctx = te.encode_sequence(feats, bundle.encoder)
    return ad.reshape(ctx, (b * t, bundle.encoder.context_dim))


def batch_arrays(seqs: list[ds.SyntheticSequence]):
    """Stack the supervision channels of a sequence batch (frame-major)."""
    obs = np.stack([s.observations() for s in seqs])
    theta6d = np.concatenate([s.pose_vectors() for s in seqs])
    beta = np.concatenate([np.tile(s.beta, (s.frames, 1)) for s in seqs])
    joints3d = np.concatenate([s.joints3d for s in seqs])
    kp = np.concatenate([s.noisy_kp for s in seqs])
    conf = np.concatenate([s.conf for s in seqs])
    return obs, losses.Supervision(theta6d=theta6d, beta=beta, joints3d=joints3d,
                                   keypoints2d=kp, conf=conf)


def mode_joints3d(bundle: ModelBundle, contexts_data: np.ndarray) -> np.ndarray:
    """Joint positions of the per-frame density mode (no gradients)."""
    with ad.no_grad():
        theta = fl.mode(Tensor(contexts_data), bundle.flow)
        rots = rot.pose_vector_to_matrices_t(theta, bundle.body.num_joints)
        betas, _scale, _trans = rh.predict_shape_camera(Tensor(contexts_data), bundle.head)
        mesh = bm.forward(bundle.body, rots, betas)
        return bm.regress_joints3d(bundle.body, mesh).data


def validate(bundle: ModelBundle, seqs: list[ds.SyntheticSequence]):
    """(mean NLL, mean mode PA-MPJPE in mm) over a validation set."""
    nlls = []
    pa = []
    with ad.no_grad():
        for seq in seqs:
            ctx = sequence_contexts(bundle, seq.observations()[None])
            lp = fl.log_prob(Tensor(seq.pose_vectors()), ctx, bundle.flow)
            nlls.append(-lp.data.mean())
            joints = mode_joints3d(bundle, ctx.data)
            pa.extend(mx.pa_mpjpe(joints[t], seq.joints3d[t]) for t in range(seq.frames))
    return float(np.mean(nlls)), float(np.mean(pa))


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[dict]
    checkpoint_path: str | None


def train(config: TrainConfig, train_seqs: list[ds.SyntheticSequence],
          val_seqs: list[ds.SyntheticSequence] | None = None,
          out_dir: str | None = None) -> TrainResult:
    """Run the full loop; returns the trained bundle and per-epoch history.

    When ``val_seqs`` is None the last 10% of ``train_seqs`` (at least one
    sequence) is held out. With ``out_dir`` set, a checkpoint lands there
    every epoch together with a ``metrics.csv`` log; epoch 0 is the
    untrained initialization.
    """
    if not train_seqs:
        raise ValueError("train: empty training set")
    if val_seqs is None:
        holdout = max(1, len(train_seqs) // 10)
        val_seqs = train_seqs[-holdout:]
        train_seqs = train_seqs[:-holdout] or val_seqs
    bundle = init_bundle(config)
    calib = np.stack([s.observations() for s in train_seqs[:min(len(train_seqs), 32)]])
    calibrate_bundle(bundle, calib)
    gen_params = bundle.generator_tensors(include_obs=not config.freeze_encoder)
    gen_opt = ad.Adam(gen_params, lr=config.lr)
    disc_opt = ad.Adam(bundle.disc.named_tensors(), lr=config.lr)

    history: list[dict] = []
    ckpt_path = None

    def snapshot(epoch: int, extra_row: dict) -> None:
        nonlocal ckpt_path
        if out_dir is None:
            return
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.json")
        save_bundle(bundle, ckpt_path, extra={"epoch": epoch, "seed": config.seed})
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
            writer.writeheader()
            for row in history:
                writer.writerow({k: row.get(k, "") for k in METRICS_COLUMNS})

    val_nll, val_pa = validate(bundle, val_seqs)
    history.append({"epoch": 0, "val_nll": val_nll, "val_pa_mpjpe": val_pa})
    snapshot(0, history[-1])
    log.info("epoch 0 (init): val_nll=%.4f val_pa_mpjpe=%.2f", val_nll, val_pa)

    order_rng = np.random.default_rng([config.seed, 0x0BDE])
    sample_rng = np.random.default_rng([config.seed, 0x5A3B])

    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(train_seqs))
        term_sums: dict[str, float] = {}
        term_counts: dict[str, int] = {}
        disc_losses = []
        for start in range(0, len(order), config.batch):
            batch = [train_seqs[i] for i in order[start:start + config.batch]]
            obs, supervision = batch_arrays(batch)

            contexts = sequence_contexts(bundle, obs)
            betas_p, scale_p, trans_p = rh.predict_shape_camera(contexts, bundle.head)
            graph = losses.total_loss(bundle.body, bundle.flow, bundle.disc, contexts,
                                      betas_p, scale_p, trans_p, supervision,
                                      len(batch), config.frames, config.weights,
                                      sample_rng, config.sample_count)
            if not np.isfinite(graph.total.data):
                snapshot(epoch - 1, {})
                raise TrainingAborted(f"non-finite generator loss in epoch {epoch}")
            grads = ad.backward(graph.total, params=gen_params.values())
            gen_opt.step(grads)
            for name, value in graph.report.items():
                term_sums[name] = term_sums.get(name, 0.0) + value
                term_counts[name] = term_counts.get(name, 0) + 1
            term_sums["total"] = term_sums.get("total", 0.0) + float(graph.total.data)
            term_counts["total"] = term_counts.get("total", 0) + 1

            # discriminator step: real pool = clean gt trajectories, fakes detached
            real = np.stack([s.pose_vectors() for s in batch])
            d_real = disc.discriminate(Tensor(real), bundle.disc)
            d_fake = disc.discriminate(Tensor(graph.sample_pose_data), bundle.disc)
            d_loss = disc.disc_loss(d_real, d_fake)
            if not np.isfinite(d_loss.data):
                snapshot(epoch - 1, {})
                raise TrainingAborted(f"non-finite discriminator loss in epoch {epoch}")
            d_grads = ad.backward(d_loss, params=bundle.disc.named_tensors().values())
            disc_opt.step(d_grads)
            disc_losses.append(float(d_loss.data))

        val_nll, val_pa = validate(bundle, val_seqs)
        row = {name: term_sums[name] / term_counts[name] for name in term_sums}
        row.update({"epoch": epoch, "disc_loss": float(np.mean(disc_losses)),
                    "val_nll": val_nll, "val_pa_mpjpe": val_pa})
        history.append(row)
        snapshot(epoch, row)
        log.info("epoch %d: total=%.5f disc=%.4f val_nll=%.4f val_pa_mpjpe=%.2f",
                 epoch, row.get("total", float("nan")), row["disc_loss"], val_nll, val_pa)

    return TrainResult(bundle=bundle, history=history, checkpoint_path=ckpt_path)

"""Motion discriminator: stacked GRU, attention pooling, real/fake score.

Scores a pose-vector sequence with the probability that it comes from the
pool of plausible motions. Trained with least-squares targets: real
sequences toward 1, generated ones toward 0; the generator's adversarial
term pushes its outputs toward 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_HIDDEN = 64
NUM_LAYERS = 2

# Fixed multiplier on the zero-initialized output affine so the score
# separates real from generated motion at a useful pace under the single
# global learning rate.
OUT_GAIN = 16.0


@dataclass
class GRULayer:
    w_r: Tensor
    w_z: Tensor
    w_n: Tensor   # (H, in)
    u_r: Tensor
    u_z: Tensor
    u_n: Tensor   # (H, H)
    b_r: Tensor
    b_z: Tensor
    b_n: Tensor   # (H,)


@dataclass
class DiscParams:
    pose_dim: int
    hidden: int
    layers: list[GRULayer] = field(default_factory=list)
    attn: Tensor = None        # (H,) pooling vector
    w_out: Tensor = None       # (1, H)
    b_out: Tensor = None       # (1,)

    def named_tensors(self, prefix: str = "disc/") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name in ("w_r", "w_z", "w_n", "u_r", "u_z", "u_n", "b_r", "b_z", "b_n"):
                out[f"{prefix}gru{i}/{name}"] = getattr(layer, name)
        out[f"{prefix}attn"] = self.attn
        out[f"{prefix}w_out"] = self.w_out
        out[f"{prefix}b_out"] = self.b_out
        return out

    def load_arrays(self, arrays: dict, prefix: str = "disc/") -> None:
        for name, tensor in self.named_tensors(prefix).items():
            arr = arrays[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(f"checkpoint entry {name} has shape {arr.shape}, "
                                 f"expected {tensor.data.shape}")
            tensor.data = np.array(arr, dtype=np.float64)


def init_disc(pose_dim: int, hidden: int = DEFAULT_HIDDEN,
              rng: np.random.Generator | None = None) -> DiscParams:
    rng = rng or np.random.default_rng(0)
    layers = []
    for i in range(NUM_LAYERS):
        fan_in = pose_dim if i == 0 else hidden
        s_in, s_h = 1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(hidden)
        layers.append(GRULayer(
            w_r=ad.param(rng.normal(0.0, s_in, (hidden, fan_in))),
            w_z=ad.param(rng.normal(0.0, s_in, (hidden, fan_in))),
            w_n=ad.param(rng.normal(0.0, s_in, (hidden, fan_in))),
            u_r=ad.param(rng.normal(0.0, s_h, (hidden, hidden))),
            u_z=ad.param(rng.normal(0.0, s_h, (hidden, hidden))),
            u_n=ad.param(rng.normal(0.0, s_h, (hidden, hidden))),
            b_r=ad.param(np.zeros(hidden)),
            b_z=ad.param(np.zeros(hidden)),
            b_n=ad.param(np.zeros(hidden)),
        ))
    return DiscParams(
        pose_dim=pose_dim,
        hidden=hidden,
        layers=layers,
        attn=ad.param(rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden,))),
        w_out=ad.param(np.zeros((1, hidden))),
        b_out=ad.param(np.zeros(1)),
    )


def zero_disc(pose_dim: int, hidden: int = DEFAULT_HIDDEN) -> DiscParams:
    """All-zero parameters (always outputs 0.5); used by contract tests."""
    p = init_disc(pose_dim, hidden)
    for t in p.named_tensors().values():
        t.data = np.zeros_like(t.data)
    return p


def _gru_scan(layer: GRULayer, inputs: list[Tensor], batch: int, hidden: int) -> list[Tensor]:
    h = Tensor(np.zeros((batch, hidden)))
    outs = []
    for x in inputs:
        r = ad.sigmoid(ad.matmul(x, ad.transpose(layer.w_r)) + ad.matmul(h, ad.transpose(layer.u_r)) + layer.b_r)
        z = ad.sigmoid(ad.matmul(x, ad.transpose(layer.w_z)) + ad.matmul(h, ad.transpose(layer.u_z)) + layer.b_z)
        n = ad.tanh(ad.matmul(x, ad.transpose(layer.w_n)) + r * ad.matmul(h, ad.transpose(layer.u_n)) + layer.b_n)
        h = (1.0 - z) * n + z * h
        outs.append(h)
    return outs


def discriminate(sequences, params: DiscParams) -> Tensor:
    """Probability in (0, 1) per sequence; input (M, T, d) with T >= 2."""
    seq = ad.constant(sequences)
    if seq.ndim == 2:
        seq = ad.reshape(seq, (1,) + seq.shape)
    if seq.ndim != 3 or seq.shape[2] != params.pose_dim:
        raise ValueError(f"discriminate: sequences shape {seq.shape}, expected (M, T, {params.pose_dim})")
    m, t, _ = seq.shape
    if t < 2:
        raise ValueError(f"discriminate: sequence length {t} < 2")
    frames = [seq[:, i] for i in range(t)]
    for layer in params.layers:
        frames = _gru_scan(layer, frames, m, params.hidden)
    states = ad.concatenate([ad.reshape(h, (m, 1, params.hidden)) for h in frames], axis=1)
    scores = ad.reshape(ad.matmul(states, ad.reshape(params.attn, (params.hidden, 1))), (m, t))
    alpha = ad.softmax(scores, axis=-1)
    pooled = ad.tsum(ad.expand(ad.reshape(alpha, (m, t, 1)), states.shape) * states, axis=1)
    logit = (ad.matmul(pooled, ad.transpose(params.w_out)) + params.b_out) * OUT_GAIN
    return ad.reshape(ad.sigmoid(logit), (m,))


def disc_loss(real_probs, fake_probs) -> Tensor:
    """mean[(D(real) - 1)^2] + mean[D(fake)^2]; zero iff perfectly separated."""
    real = ad.constant(real_probs)
    fake = ad.constant(fake_probs)
    if real.size == 0 or fake.size == 0:
        raise ValueError("disc_loss: empty probability batch")
    return ad.squared_norm(real - 1.0) / real.size + ad.squared_norm(fake) / fake.size


def adv_loss(fake_probs) -> Tensor:
    """mean[(D(fake) - 1)^2]; the generator-side adversarial objective."""
    fake = ad.constant(fake_probs)
    if fake.size == 0:
        raise ValueError("adv_loss: empty probability batch")
    return ad.squared_norm(fake - 1.0) / fake.size

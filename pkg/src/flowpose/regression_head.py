"""MLP head mapping context vectors to shape and camera point estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HIDDEN = 64

# Fixed output multiplier on the zero-initialized readout; reparametrizes
# the last layer so shape/camera estimates move at a useful scale under the
# single global Adam learning rate.
HEAD_GAIN = 256.0


@dataclass
class HeadParams:
    context_dim: int
    num_betas: int
    w1: Tensor   # (hidden, C)
    b1: Tensor   # (hidden,)
    w2: Tensor   # (B + 3, hidden)
    b2: Tensor   # (B + 3,)

    def named_tensors(self, prefix: str = "head/") -> dict[str, Tensor]:
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1,
                f"{prefix}w2": self.w2, f"{prefix}b2": self.b2}

    def load_arrays(self, arrays: dict, prefix: str = "head/") -> None:
        for name, tensor in self.named_tensors(prefix).items():
            arr = arrays[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(f"checkpoint entry {name} has shape {arr.shape}, "
                                 f"expected {tensor.data.shape}")
            tensor.data = np.array(arr, dtype=np.float64)


def init_head(context_dim: int, num_betas: int, rng: np.random.Generator | None = None) -> HeadParams:
    """Zero readout: beta = 0, scale = exp(0) = 1, translation = 0 at init."""
    rng = rng or np.random.default_rng(0)
    return HeadParams(
        context_dim=context_dim,
        num_betas=num_betas,
        w1=ad.param(rng.normal(0.0, 1.0 / math.sqrt(context_dim), size=(HIDDEN, context_dim))),
        b1=ad.param(np.zeros(HIDDEN)),
        w2=ad.param(np.zeros((num_betas + 3, HIDDEN))),
        b2=ad.param(np.zeros(num_betas + 3)),
    )


def predict_shape_camera(contexts, params: HeadParams):
    """(M, C) contexts -> (betas (M, B), scale (M, 1) > 0, trans (M, 2)).

    The raw scale output passes through exp, so the returned scale is
    always strictly positive.
    """
    c = ad.constant(contexts)
    if c.ndim == 1:
        c = ad.reshape(c, (1, c.shape[0]))
    if c.ndim != 2 or c.shape[1] != params.context_dim:
        raise ValueError(f"predict_shape_camera: contexts shape {c.shape}, "
                         f"expected (*, {params.context_dim})")
    h = ad.tanh(ad.matmul(c, ad.transpose(params.w1)) + params.b1)
    out = ad.matmul(h, ad.transpose(params.w2)) * HEAD_GAIN + params.b2
    nb = params.num_betas
    betas = out[:, :nb]
    scale = ad.exp(out[:, nb:nb + 1])
    trans = out[:, nb + 1:nb + 3]
    return betas, scale, trans

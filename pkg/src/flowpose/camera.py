"""Weak-perspective camera: x2d = s * (x, y) + t, depth discarded.

Image coordinates are normalized to [-1, 1] per frame crop; pixel-space
keypoint files carry crop metadata and are converted at ingestion
(see data_synth).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class CameraParams:
    s: float              # scale, > 0
    t: np.ndarray         # (2,) translation in normalized image units

    def __post_init__(self):
        if not self.s > 0.0:
            raise ValueError(f"camera scale must be positive, got {self.s}")
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(2))

    def as_vector(self) -> np.ndarray:
        return np.array([self.s, self.t[0], self.t[1]])


def project(points3d, cam: CameraParams) -> np.ndarray:
    """Project (K, 3) points to (K, 2) image coordinates."""
    pts = np.asarray(points3d, dtype=np.float64)
    if not cam.s > 0.0:
        raise ValueError(f"camera scale must be positive, got {cam.s}")
    return cam.s * pts[..., :2] + cam.t


def project_t(points3d: Tensor, scale: Tensor, trans: Tensor) -> Tensor:
    """Graph-op projection, batched over frames.

    points3d: (F, K, 3); scale: (F, 1) positive; trans: (F, 2).
    Returns (F, K, 2).
    """
    points3d = ad.constant(points3d)
    scale = ad.constant(scale)
    trans = ad.constant(trans)
    if np.any(scale.data <= 0.0):
        raise ValueError("camera scale must be positive")
    frames, k, _ = points3d.shape
    xy = points3d[:, :, 0:2]
    s = ad.expand(ad.reshape(scale, (frames, 1, 1)), (frames, k, 2))
    t = ad.expand(ad.reshape(trans, (frames, 1, 2)), (frames, k, 2))
    return xy * s + t

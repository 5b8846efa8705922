"""Rotation conversions: axis-angle, 3x3 matrices, and the 6D encoding.

The 6D encoding of a rotation is the first two columns of its matrix;
decoding runs Gram-Schmidt on the two 3-vectors and completes the third
column by cross product. Decoding is invariant to positive rescaling of the
first vector and to adding multiples of it to the second.

Two implementations live here: plain numpy functions for data generation,
export and test oracles, and graph-op variants (suffix ``_t``) used inside
training and fitting where gradients must flow. Pose vectors consumed by the
probabilistic model store per-joint 6D values as scaled offsets from the
identity encoding (1,0,0,0,1,0): vector = (rot6d - identity) / POSE_SCALE.
The all-zero pose vector therefore decodes to the identity pose, and a unit
ball in pose-vector space maps to a neighbourhood of the orthonormal-6D
manifold, which keeps an identity-initialized standard-normal density
calibrated against both real pose statistics and the orthonormality
penalty.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Canonical 6D encoding of the identity rotation.
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

# Offset-to-pose-vector scale; see module docstring.
POSE_SCALE = 0.3

_DEGENERATE_TOL = 1e-12


# -- numpy path ----------------------------------------------------------

def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Gram-Schmidt a 6-vector (a1, a2) into a proper rotation matrix.

    Columns of the result: b1 = a1/|a1|, b2 = normalized rejection of a2
    from b1, b3 = b1 x b2.
    """
    r = np.asarray(r, dtype=np.float64).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 <= _DEGENERATE_TOL:
        raise ValueError("rot6d_to_matrix: first 3-vector is (near) zero")
    b1 = a1 / n1
    proj = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(proj)
    if n2 <= _DEGENERATE_TOL:
        raise ValueError("rot6d_to_matrix: second 3-vector is (near) parallel to the first")
    b2 = proj / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rot6d(mat: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, flattened to 6."""
    mat = np.asarray(mat, dtype=np.float64)
    _check_rotation(mat, tol=1e-6, who="matrix_to_rot6d")
    return np.concatenate([mat[:, 0], mat[:, 1]])


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula; second-order Taylor form below the small-angle cutoff."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(v)
    kx, ky, kz = v
    cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    if angle < 1e-8:
        # sin(a)/a ~ 1 - a^2/6, (1-cos(a))/a^2 ~ 1/2 - a^2/24
        return np.eye(3) + cross * (1.0 - angle * angle / 6.0) + (cross @ cross) * (0.5 - angle * angle / 24.0)
    cross = cross / angle
    return np.eye(3) + np.sin(angle) * cross + (1.0 - np.cos(angle)) * (cross @ cross)


def matrix_to_axis_angle(mat: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues; angle canonicalized into [0, pi].

    Near pi, the axis comes from the dominant diagonal of (R + I)/2 to keep
    the branch deterministic.
    """
    mat = np.asarray(mat, dtype=np.float64)
    _check_rotation(mat, tol=1e-6, who="matrix_to_axis_angle")
    cos_a = np.clip((np.trace(mat) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_a)
    if angle < 1e-8:
        # antisymmetric part is exact to first order
        return 0.5 * np.array([mat[2, 1] - mat[1, 2], mat[0, 2] - mat[2, 0], mat[1, 0] - mat[0, 1]])
    if angle > np.pi - 1e-6:
        sym = (mat + np.eye(3)) / 2.0  # = axis outer axis at angle pi
        k = int(np.argmax(np.diag(sym)))
        axis = sym[:, k] / np.sqrt(max(sym[k, k], _DEGENERATE_TOL))
        axis = axis / np.linalg.norm(axis)
        # fix the sign convention via the largest antisymmetric component
        anti = np.array([mat[2, 1] - mat[1, 2], mat[0, 2] - mat[2, 0], mat[1, 0] - mat[0, 1]])
        if np.dot(anti, axis) < 0.0:
            axis = -axis
        return angle * axis
    axis = np.array([mat[2, 1] - mat[1, 2], mat[0, 2] - mat[2, 0], mat[1, 0] - mat[0, 1]]) / (2.0 * np.sin(angle))
    return angle * axis


def orth_residual(r: np.ndarray) -> float:
    """Squared distance from a 6-vector to its Gram-Schmidt orthonormalization."""
    r = np.asarray(r, dtype=np.float64).reshape(6)
    snapped = matrix_to_rot6d(rot6d_to_matrix(r))
    return float(np.sum((r - snapped) ** 2))


def _check_rotation(mat: np.ndarray, tol: float, who: str) -> None:
    if mat.shape != (3, 3):
        raise ValueError(f"{who}: expected a 3x3 matrix, got {mat.shape}")
    err = np.abs(mat.T @ mat - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"{who}: input is not orthonormal (max |R'R - I| = {err:.3e})")
    if np.linalg.det(mat) <= 0.0:
        raise ValueError(f"{who}: input has non-positive determinant")


# -- pose-vector conventions ---------------------------------------------

def pose_vector_to_matrices(theta6d: np.ndarray, joints: int) -> np.ndarray:
    """Decode a (J*6,) pose vector into (J, 3, 3) rotation matrices."""
    offsets = np.asarray(theta6d, dtype=np.float64).reshape(joints, 6) * POSE_SCALE
    per_joint = offsets + IDENTITY_6D
    return np.stack([rot6d_to_matrix(per_joint[j]) for j in range(joints)])


def matrices_to_pose_vector(mats: np.ndarray) -> np.ndarray:
    """Encode (J, 3, 3) rotations into the scaled-offset pose vector (J*6,)."""
    mats = np.asarray(mats, dtype=np.float64)
    return np.concatenate([(matrix_to_rot6d(m) - IDENTITY_6D) / POSE_SCALE for m in mats])


def axis_angles_to_pose_vector(theta_aa: np.ndarray) -> np.ndarray:
    """(J, 3) axis-angle stack to the offset 6D pose vector (J*6,)."""
    theta_aa = np.asarray(theta_aa, dtype=np.float64)
    return matrices_to_pose_vector(np.stack([axis_angle_to_matrix(v) for v in theta_aa]))


def pose_vector_to_axis_angles(theta6d: np.ndarray, joints: int) -> np.ndarray:
    """(J*6,) offset pose vector to (J, 3) axis-angle stack."""
    mats = pose_vector_to_matrices(theta6d, joints)
    return np.stack([matrix_to_axis_angle(m) for m in mats])


# -- graph-op path (batched, differentiable) ------------------------------

def _unit_last(v: Tensor) -> Tensor:
    norm = ad.sqrt(ad.squared_norm(v, axis=-1, keepdims=True))
    return v / ad.expand(norm, v.shape)


def _cross_last(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    bx, by, bz = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return ad.concatenate([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def rot6d_to_matrix_t(r: Tensor) -> Tensor:
    """Batched Gram-Schmidt: (..., 6) tensor to (..., 3, 3) rotations.

    Degeneracy is checked on the raw values; gradients flow through the
    normalizations and the cross product.
    """
    r = ad.constant(r)
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = np.linalg.norm(a1.data, axis=-1)
    if np.any(n1 <= _DEGENERATE_TOL):
        raise ValueError("rot6d_to_matrix: first 3-vector is (near) zero")
    b1 = _unit_last(a1)
    dot = ad.tsum(b1 * a2, axis=-1, keepdims=True)
    proj = a2 - ad.expand(dot, a2.shape) * b1
    n2 = np.linalg.norm(proj.data, axis=-1)
    if np.any(n2 <= _DEGENERATE_TOL):
        raise ValueError("rot6d_to_matrix: second 3-vector is (near) parallel to the first")
    b2 = _unit_last(proj)
    b3 = _cross_last(b1, b2)
    cols = ad.concatenate([
        ad.reshape(b1, b1.shape[:-1] + (1, 3)),
        ad.reshape(b2, b2.shape[:-1] + (1, 3)),
        ad.reshape(b3, b3.shape[:-1] + (1, 3)),
    ], axis=-2)
    return ad.swap_last_axes(cols)  # rows were columns


def pose_vector_to_matrices_t(theta6d: Tensor, joints: int) -> Tensor:
    """Batched decode: (..., J*6) pose vectors to (..., J, 3, 3)."""
    theta6d = ad.constant(theta6d)
    lead = theta6d.shape[:-1]
    per_joint = ad.reshape(theta6d, lead + (joints, 6)) * POSE_SCALE
    shifted = per_joint + Tensor(IDENTITY_6D)
    return rot6d_to_matrix_t(shifted)


def orth_residual_t(r: Tensor) -> Tensor:
    """Batched orthonormality residual over the last extent (6): (...,) output."""
    r = ad.constant(r)
    mat = rot6d_to_matrix_t(r)
    snapped = ad.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)
    return ad.squared_norm(r - snapped, axis=-1)

"""Parametric body: shape blending, joint regression, kinematics, skinning.

The model file is human-readable JSON (see ``load_model``). A self-contained
toy body (64 vertices, 8 joints, 4 shape directions) ships with the package
so everything runs without licensed mesh assets; the same format admits
full-size models (N=6890, J=24, B=10). Pose-corrective blend shapes are not
modeled; the format reserves an optional ``pose_dirs`` field so richer assets
degrade gracefully.

Kinematics uses the standard convention of rotating each joint about its
rest position. The implementation propagates (global rotation, skinning
translation) pairs instead of 4x4 transforms:

    t'_root = (I - R_root) j_root
    t'_j    = t'_parent + (Rg_parent - Rg_j) j_j

which is algebraically the usual chain but returns the shaped template
bit-exactly under the identity pose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODEL_FORMAT_VERSION = 1
BETA_CLAMP = 10.0


class ModelFormatError(ValueError):
    """Raised when a body-model file is malformed or violates invariants."""


@dataclass(frozen=True)
class BodyModel:
    template: np.ndarray          # (N, 3) metres
    shape_dirs: np.ndarray        # (N, 3, B)
    joint_regressor: np.ndarray   # (J, N), rows sum to 1
    parents: np.ndarray           # (J,), parents[0] == -1
    skin_weights: np.ndarray      # (N, J), rows sum to 1
    faces: np.ndarray | None = None  # (T, 3) vertex indices, optional

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def num_betas(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def pose_dim(self) -> int:
        return 6 * self.num_joints


@dataclass
class MeshOutput:
    vertices: Tensor       # (F, N, 3) skinned
    rest_joints: Tensor    # (F, J, 3) on the shaped template
    posed_joints: Tensor   # (F, J, 3) after kinematics


def validate_model(m: BodyModel) -> None:
    n, j, b = m.num_vertices, m.num_joints, m.num_betas
    if m.template.shape != (n, 3):
        raise ModelFormatError(f"template has shape {m.template.shape}, expected ({n}, 3)")
    if m.shape_dirs.shape != (n, 3, b):
        raise ModelFormatError(f"shape_dirs has shape {m.shape_dirs.shape}, expected ({n}, 3, {b})")
    if m.skin_weights.shape != (n, j):
        raise ModelFormatError(f"skin_weights has shape {m.skin_weights.shape}, expected ({n}, {j})")
    if m.parents.shape != (j,):
        raise ModelFormatError(f"parents has length {m.parents.shape[0]}, expected {j}")
    for name, arr in (("template", m.template), ("shape_dirs", m.shape_dirs),
                      ("joint_regressor", m.joint_regressor), ("skin_weights", m.skin_weights)):
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"{name} contains non-finite values")
    if np.any(m.joint_regressor < 0.0):
        raise ModelFormatError("joint_regressor has negative entries")
    if np.any(m.skin_weights < 0.0):
        raise ModelFormatError("skin_weights has negative entries")
    reg_sums = m.joint_regressor.sum(axis=1)
    bad = np.where(np.abs(reg_sums - 1.0) > 1e-6)[0]
    if bad.size:
        raise ModelFormatError(f"joint_regressor row {bad[0]} sums to {reg_sums[bad[0]]:.6g}, expected 1")
    skin_sums = m.skin_weights.sum(axis=1)
    bad = np.where(np.abs(skin_sums - 1.0) > 1e-6)[0]
    if bad.size:
        raise ModelFormatError(f"skin_weights row {bad[0]} sums to {skin_sums[bad[0]]:.6g}, expected 1")
    if m.parents[0] != -1:
        raise ModelFormatError(f"parents[0] is {m.parents[0]}, expected -1 (root)")
    for idx in range(1, j):
        if not 0 <= m.parents[idx] < idx:
            raise ModelFormatError(f"parents[{idx}] = {m.parents[idx]} breaks the topological tree order")


def model_from_dict(doc: dict) -> BodyModel:
    version = doc.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {version!r}")
    for field in ("N", "J", "B", "template", "shape_dirs", "joint_regressor", "parents", "skin_weights"):
        if field not in doc:
            raise ModelFormatError(f"missing field '{field}'")
    n, j, b = int(doc["N"]), int(doc["J"]), int(doc["B"])
    try:
        shape_dirs = np.asarray(doc["shape_dirs"], dtype=np.float64).reshape(n, 3, b)
    except ValueError as err:
        raise ModelFormatError(f"shape_dirs cannot be reshaped to ({n}, 3, {b}): {err}") from err
    faces = None
    if doc.get("faces") is not None:
        faces = np.asarray(doc["faces"], dtype=np.intp)
        if faces.ndim != 2 or faces.shape[1] != 3 or faces.min(initial=0) < 0 or faces.max(initial=-1) >= n:
            raise ModelFormatError("faces must be a list of triangles with valid vertex indices")
    model = BodyModel(
        template=np.asarray(doc["template"], dtype=np.float64),
        shape_dirs=shape_dirs,
        joint_regressor=np.asarray(doc["joint_regressor"], dtype=np.float64),
        parents=np.asarray(doc["parents"], dtype=np.intp),
        skin_weights=np.asarray(doc["skin_weights"], dtype=np.float64),
        faces=faces,
    )
    validate_model(model)
    return model


def load_model(path) -> BodyModel:
    """Load and validate a body model from its JSON container."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ModelFormatError(f"not valid JSON: {err}") from err
    return model_from_dict(doc)


def save_model(model: BodyModel, path) -> None:
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "N": model.num_vertices,
        "J": model.num_joints,
        "B": model.num_betas,
        "template": model.template.tolist(),
        "shape_dirs": model.shape_dirs.reshape(-1).tolist(),
        "joint_regressor": model.joint_regressor.tolist(),
        "parents": model.parents.tolist(),
        "skin_weights": model.skin_weights.tolist(),
        "faces": None if model.faces is None else model.faces.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def clamp_betas(beta: np.ndarray) -> np.ndarray:
    """Plausibility clamp applied when shape coefficients enter from outside."""
    return np.clip(np.asarray(beta, dtype=np.float64), -BETA_CLAMP, BETA_CLAMP)


def validate_rotations(mats: np.ndarray, tol: float = 1e-6) -> None:
    mats = np.asarray(mats)
    gram = np.matmul(np.swapaxes(mats, -1, -2), mats)
    err = np.abs(gram - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"pose rotations not orthonormal (max |R'R - I| = {err:.3e})")


# -- forward model --------------------------------------------------------

def shaped_template(model: BodyModel, betas: Tensor) -> Tensor:
    """Template plus shape blend offsets; betas (F, B) -> (F, N, 3)."""
    betas = ad.constant(betas)
    frames = betas.shape[0]
    dirs_flat = Tensor(model.shape_dirs.reshape(-1, model.num_betas).T)  # (B, N*3)
    offsets = ad.reshape(ad.matmul(betas, dirs_flat), (frames, model.num_vertices, 3))
    return Tensor(model.template) + offsets


def rest_joints_of(model: BodyModel, shaped: Tensor) -> Tensor:
    """Joint locations on the shaped template: (F, N, 3) -> (F, J, 3)."""
    return ad.matmul(Tensor(model.joint_regressor), shaped)


def forward(model: BodyModel, rotations: Tensor, betas: Tensor) -> MeshOutput:
    """Pose and shape the body; batched over leading frame extent.

    rotations: (F, J, 3, 3) per-joint rotation matrices, joint 0 = global
    orientation. betas: (F, B). Identity rotations return the shaped
    template exactly.
    """
    rotations = ad.constant(rotations)
    betas = ad.constant(betas)
    frames = rotations.shape[0]
    n_joints = model.num_joints
    if rotations.shape != (frames, n_joints, 3, 3):
        raise ValueError(f"forward: rotations shape {rotations.shape} does not match "
                         f"({frames}, {n_joints}, 3, 3)")
    if betas.shape != (frames, model.num_betas):
        raise ValueError(f"forward: betas shape {betas.shape} does not match "
                         f"({frames}, {model.num_betas})")

    shaped = shaped_template(model, betas)               # (F, N, 3)
    rest = rest_joints_of(model, shaped)                 # (F, J, 3)

    glob_rots: list[Tensor] = []
    skin_trans: list[Tensor] = []
    posed: list[Tensor] = []
    eye = Tensor(np.eye(3))
    for j in range(n_joints):
        rot_j = rotations[:, j]                          # (F, 3, 3)
        joint_j = ad.reshape(rest[:, j], (frames, 3, 1))  # (F, 3, 1)
        parent = int(model.parents[j])
        if parent < 0:
            glob = rot_j
            trans = ad.matmul(eye - glob, joint_j)
        else:
            glob = ad.matmul(glob_rots[parent], rot_j)
            trans = skin_trans[parent] + ad.matmul(glob_rots[parent] - glob, joint_j)
        glob_rots.append(glob)
        skin_trans.append(trans)
        posed.append(ad.matmul(glob, joint_j) + trans)   # (F, 3, 1)

    rot_stack = ad.concatenate([ad.reshape(g, (frames, 1, 9)) for g in glob_rots], axis=1)    # (F, J, 9)
    trans_stack = ad.concatenate([ad.reshape(t, (frames, 1, 3)) for t in skin_trans], axis=1)  # (F, J, 3)
    posed_joints = ad.concatenate([ad.reshape(p, (frames, 1, 3)) for p in posed], axis=1)      # (F, J, 3)

    weights = Tensor(model.skin_weights)                 # (N, J)
    skin_rot = ad.reshape(ad.matmul(weights, rot_stack), (frames, model.num_vertices, 3, 3))
    skin_t = ad.matmul(weights, trans_stack)             # (F, N, 3)
    verts_col = ad.reshape(shaped, (frames, model.num_vertices, 3, 1))
    skinned = ad.reshape(ad.matmul(skin_rot, verts_col), (frames, model.num_vertices, 3)) + skin_t
    return MeshOutput(vertices=skinned, rest_joints=rest, posed_joints=posed_joints)


def regress_joints3d(model: BodyModel, mesh: MeshOutput) -> Tensor:
    """Evaluation joints: regressor applied to the posed vertices."""
    return ad.matmul(Tensor(model.joint_regressor), mesh.vertices)


def forward_single(model: BodyModel, rotations, betas) -> MeshOutput:
    """Convenience wrapper for one frame of plain arrays."""
    rot = ad.constant(rotations)
    bet = ad.constant(betas)
    return forward(model, ad.reshape(rot, (1,) + rot.shape), ad.reshape(bet, (1,) + bet.shape))


# -- OBJ export -----------------------------------------------------------

def export_obj(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    """Wavefront OBJ, vertices in metres at 9 significant digits."""
    vertices = np.asarray(vertices, dtype=np.float64)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    if faces is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.intp)]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")

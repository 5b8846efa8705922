"""Bundled toy body asset: 64 vertices, 8 joints, 4 shape directions.

The body is a stick figure of axis-aligned boxes, one 8-corner box per
joint, centered on the joint so the per-joint vertex mean reproduces the
joint location. All weights are dyadic rationals (0.125, 0.875, 1.0) so row
sums are exactly 1.0 in float64 and identity-pose skinning is bit-exact.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .body_model import BodyModel, model_from_dict, save_model, validate_model

# joint: (position, parent, box half-extents); all coordinates dyadic
_JOINTS = [
    ((0.0, 0.0, 0.0), -1, (0.125, 0.125, 0.09375)),      # pelvis
    ((0.0, 0.25, 0.0), 0, (0.109375, 0.125, 0.078125)),  # spine
    ((0.0, 0.5, 0.0), 1, (0.078125, 0.0625, 0.0625)),    # neck
    ((0.25, 0.4375, 0.0), 1, (0.15625, 0.046875, 0.046875)),   # left arm
    ((-0.25, 0.4375, 0.0), 1, (0.15625, 0.046875, 0.046875)),  # right arm
    ((0.125, -0.375, 0.0), 0, (0.0546875, 0.1875, 0.0546875)),   # left leg
    ((-0.125, -0.375, 0.0), 0, (0.0546875, 0.1875, 0.0546875)),  # right leg
    ((0.0, 0.65625, 0.0), 2, (0.078125, 0.078125, 0.078125)),    # head
]

_BOX_FACES = [
    (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),
    (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),
    (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),
]


def toy_model() -> BodyModel:
    """Construct the toy body deterministically."""
    n_joints = len(_JOINTS)
    positions = np.array([j[0] for j in _JOINTS])
    parents = np.array([j[1] for j in _JOINTS], dtype=np.intp)

    template = np.zeros((8 * n_joints, 3))
    corners = np.array([
        (sx, sy, sz)
        for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)
    ])
    for j, (pos, _parent, half) in enumerate(_JOINTS):
        template[8 * j: 8 * j + 8] = np.asarray(pos) + corners * np.asarray(half)

    n_verts = template.shape[0]
    regressor = np.zeros((n_joints, n_verts))
    skin = np.zeros((n_verts, n_joints))
    for j in range(n_joints):
        sl = slice(8 * j, 8 * j + 8)
        regressor[j, sl] = 0.125
        if parents[j] < 0:
            skin[sl, j] = 1.0
        else:
            skin[sl, j] = 0.875
            skin[sl, parents[j]] = 0.125

    # shape directions: overall size, height, width, and a mild shear
    dirs = np.zeros((n_verts, 3, 4))
    dirs[:, :, 0] = 0.125 * template
    dirs[:, 1, 1] = 0.125 * template[:, 1]
    dirs[:, 0, 2] = 0.125 * template[:, 0]
    dirs[:, 0, 3] = 0.0625 * template[:, 2]
    dirs[:, 2, 3] = 0.0625 * template[:, 0]

    faces = np.concatenate([np.asarray(_BOX_FACES, dtype=np.intp) + 8 * j for j in range(n_joints)])

    model = BodyModel(template=template, shape_dirs=dirs, joint_regressor=regressor,
                      parents=parents, skin_weights=skin, faces=faces)
    validate_model(model)
    return model


def toy_model_json_path() -> str:
    """Filesystem path of the bundled toy model JSON."""
    return str(resources.files("flowpose").joinpath("assets/toy_body.json"))


def load_toy_model() -> BodyModel:
    import json

    with resources.files("flowpose").joinpath("assets/toy_body.json").open("r") as fh:
        return model_from_dict(json.load(fh))


def regenerate_asset(path=None) -> None:
    """Rewrite the bundled JSON from the in-code builder (dev utility)."""
    save_model(toy_model(), path or toy_model_json_path())

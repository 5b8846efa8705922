"""Synthetic motion and observation generation, dataset I/O, keypoint files.

Sequences are generated by summing up to three random sinusoids per
axis-angle coordinate (bounded amplitude, period of at least eight frames),
which keeps joint trajectories smooth with an analytic bound on their second
differences. The clean 2D channel is produced by the exact model pipeline
(shape -> skinning -> joint regression -> projection), so recomputing it
from the stored pose reproduces it bit-for-bit; the noisy channel adds
Gaussian noise and zero-confidence occlusions.

The observation encoder stands in for a pretrained image backbone: a small
network mapping flattened noisy keypoints (plus confidences) to a per-frame
feature vector.

Dataset files are a versioned little-endian binary container (see
``write_dataset``); keypoint files for fitting are JSON in pixel coordinates
with per-frame crop metadata (see ``ingest_keypoints``).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import body_model as bm
from . import rotations as rot
from .autodiff import Tensor
from .camera import CameraParams, project

DATASET_MAGIC = b"FPDS"
DATASET_VERSION = 1

OBS_HIDDEN = 64


class DatasetFormatError(ValueError):
    """Raised for malformed, truncated, or version-mismatched dataset files."""


@dataclass
class GenerationConfig:
    frames: int = 16
    fps: float = 25.0
    noise_sigma: float = 0.01
    occlusion_prob: float = 0.1
    max_sinusoids: int = 3
    amp_range: tuple = (0.05, 0.55)    # radians, <= 0.6 by contract
    period_range: tuple = (28.0, 72.0)  # frames, >= 8 by contract
    # per-axis amplitude gains; motion leans toward the camera plane so the
    # 2D observations actually constrain it
    axis_gain: tuple = (0.25, 0.25, 1.0)
    cam_scale_sigma: float = 0.01
    cam_trans_sigma: float = 0.005

    def __post_init__(self):
        if self.amp_range[1] * max(self.axis_gain) > 0.6:
            raise ValueError("sinusoid amplitude bound exceeds 0.6 rad")
        if self.period_range[0] < 8.0:
            raise ValueError("sinusoid period below 8 frames")


@dataclass
class SyntheticSequence:
    theta_aa: np.ndarray      # (T, J, 3) axis-angle per joint
    beta: np.ndarray          # (B,)
    cam: np.ndarray           # (3,) = (s, tx, ty), fixed over the sequence
    joints3d: np.ndarray      # (T, J, 3) posed, regressed from the mesh
    vertices: np.ndarray      # (T, N, 3)
    clean_kp: np.ndarray      # (T, J, 2) exact projections
    noisy_kp: np.ndarray      # (T, J, 2)
    conf: np.ndarray          # (T, J) in [0, 1]; occluded joints are 0
    fps: float
    _pose_vectors: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def frames(self) -> int:
        return self.theta_aa.shape[0]

    @property
    def joints(self) -> int:
        return self.theta_aa.shape[1]

    def pose_vectors(self) -> np.ndarray:
        """(T, 6J) offset 6D pose vectors; cached after first use."""
        if self._pose_vectors is None:
            self._pose_vectors = np.stack([
                rot.axis_angles_to_pose_vector(self.theta_aa[t]) for t in range(self.frames)
            ])
        return self._pose_vectors

    def observations(self) -> np.ndarray:
        """(T, 3J) flattened noisy keypoints and confidences for the encoder."""
        return np.concatenate([self.noisy_kp, self.conf[..., None]], axis=2).reshape(self.frames, -1)


def second_difference_bound(config: GenerationConfig) -> float:
    """Analytic per-coordinate bound on |x[t+1] - 2x[t] + x[t-1]|.

    A sinusoid of amplitude a and period p has second difference at most
    a * (2 sin(pi / p))^2; the generator sums at most ``max_sinusoids`` of
    them at the extreme amplitude and the fastest period.
    """
    a = config.amp_range[1]
    w = 2.0 * math.sin(math.pi / config.period_range[0])
    return config.max_sinusoids * a * w * w


def generate_sequence(rng: np.random.Generator, model: bm.BodyModel,
                      config: GenerationConfig | None = None) -> SyntheticSequence:
    """One seeded synthetic sequence with every annotation channel filled."""
    config = config or GenerationConfig()
    t_frames, n_joints = config.frames, model.num_joints

    theta = np.zeros((t_frames, n_joints, 3))
    ts = np.arange(t_frames, dtype=np.float64)
    for j in range(n_joints):
        for axis in range(3):
            for _ in range(int(rng.integers(1, config.max_sinusoids + 1))):
                amp = rng.uniform(*config.amp_range) * config.axis_gain[axis]
                period = rng.uniform(*config.period_range)
                phase = rng.uniform(0.0, 2.0 * math.pi)
                theta[:, j, axis] += amp * np.sin(2.0 * math.pi * ts / period + phase)

    beta = rng.normal(0.0, 0.5, size=model.num_betas)
    cam = np.array([math.exp(rng.normal(0.0, config.cam_scale_sigma)),
                    rng.normal(0.0, config.cam_trans_sigma),
                    rng.normal(0.0, config.cam_trans_sigma)])

    mats = np.stack([
        np.stack([rot.axis_angle_to_matrix(theta[t, j]) for j in range(n_joints)])
        for t in range(t_frames)
    ])
    with ad.no_grad():
        mesh = bm.forward(model, Tensor(mats), Tensor(np.tile(beta, (t_frames, 1))))
        joints3d = bm.regress_joints3d(model, mesh).data
        vertices = mesh.vertices.data

    cam_obj = CameraParams(s=cam[0], t=cam[1:])
    clean = np.stack([project(joints3d[t], cam_obj) for t in range(t_frames)])

    noisy = clean + rng.normal(0.0, config.noise_sigma, size=clean.shape)
    occluded = rng.random((t_frames, n_joints)) < config.occlusion_prob
    conf = np.where(occluded, 0.0, 1.0)

    return SyntheticSequence(theta_aa=theta, beta=beta, cam=cam, joints3d=joints3d,
                             vertices=vertices, clean_kp=clean, noisy_kp=noisy,
                             conf=conf, fps=config.fps)


def generate_dataset(seed: int, count: int, model: bm.BodyModel,
                     config: GenerationConfig | None = None) -> list[SyntheticSequence]:
    """Seeded batch generation; sequence i uses the derived stream (seed, i)."""
    return [generate_sequence(np.random.default_rng([seed, i]), model, config)
            for i in range(count)]


# -- observation encoder ---------------------------------------------------

@dataclass
class ObsEncoderParams:
    input_dim: int            # 3 * J
    feature_dim: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_tensors(self, prefix: str = "obs_encoder/") -> dict[str, Tensor]:
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1,
                f"{prefix}w2": self.w2, f"{prefix}b2": self.b2}

    def load_arrays(self, arrays: dict, prefix: str = "obs_encoder/") -> None:
        for name, tensor in self.named_tensors(prefix).items():
            arr = arrays[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(f"checkpoint entry {name} has shape {arr.shape}, "
                                 f"expected {tensor.data.shape}")
            tensor.data = np.array(arr, dtype=np.float64)


def init_obs_encoder(num_joints: int, feature_dim: int,
                     rng: np.random.Generator | None = None) -> ObsEncoderParams:
    rng = rng or np.random.default_rng(0)
    input_dim = 3 * num_joints
    return ObsEncoderParams(
        input_dim=input_dim,
        feature_dim=feature_dim,
        w1=ad.param(rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(OBS_HIDDEN, input_dim))),
        b1=ad.param(np.zeros(OBS_HIDDEN)),
        w2=ad.param(rng.normal(0.0, 1.0 / math.sqrt(OBS_HIDDEN), size=(feature_dim, OBS_HIDDEN))),
        b2=ad.param(np.zeros(feature_dim)),
    )


def encode_observation(obs, params: ObsEncoderParams) -> Tensor:
    """(M, 3J) flattened keypoints+confidences -> (M, F) frame features."""
    x = ad.constant(obs)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"encode_observation: input dim {x.shape[-1]} does not match "
                         f"expected {params.input_dim} (3 * joints)")
    h = ad.tanh(ad.matmul(x, ad.transpose(params.w1)) + params.b1)
    return ad.matmul(h, ad.transpose(params.w2)) + params.b2


# -- dataset container ------------------------------------------------------

def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def write_dataset(sequences, path) -> None:
    """Binary container; bit-lossless for every float field."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(sequences)))
        for seq in sequences:
            t, j = seq.theta_aa.shape[:2]
            n = seq.vertices.shape[1]
            b = seq.beta.shape[0]
            fh.write(struct.pack("<IIIId", t, j, n, b, seq.fps))
            for arr in (seq.theta_aa, seq.beta, seq.cam, seq.joints3d,
                        seq.vertices, seq.clean_kp, seq.noisy_kp, seq.conf):
                fh.write(_pack_array(arr))


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return data


def read_dataset(path) -> list[SyntheticSequence]:
    sequences = []
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        for i in range(count):
            t, j, n, b, fps = struct.unpack("<IIIId", _read_exact(fh, 24, f"sequence {i} header"))

            def arr(shape, name):
                size = int(np.prod(shape))
                raw = _read_exact(fh, size * 8, f"sequence {i} {name}")
                return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

            sequences.append(SyntheticSequence(
                theta_aa=arr((t, j, 3), "theta_aa"),
                beta=arr((b,), "beta"),
                cam=arr((3,), "cam"),
                joints3d=arr((t, j, 3), "joints3d"),
                vertices=arr((t, n, 3), "vertices"),
                clean_kp=arr((t, j, 2), "clean_kp"),
                noisy_kp=arr((t, j, 2), "noisy_kp"),
                conf=arr((t, j), "conf"),
                fps=fps,
            ))
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after final sequence")
    return sequences


# -- external keypoint files -------------------------------------------------

def ingest_keypoints(path):
    """Read a detection-style JSON keypoint file.

    Schema: {"fps": number, "joints": J, "frames": [{"crop": {"cx", "cy",
    "size"}, "keypoints": [[x_px, y_px, conf] * J]}]}. Pixel coordinates are
    converted to crop-normalized [-1, 1] via x_n = 2 (x - cx) / size; a null
    keypoint entry becomes confidence 0.

    Returns (keypoints (T, J, 2), confidences (T, J), fps).
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"keypoint file is not valid JSON: {err}") from err
    for fieldname in ("fps", "joints", "frames"):
        if fieldname not in doc:
            raise ValueError(f"keypoint file missing field '{fieldname}'")
    n_joints = int(doc["joints"])
    frames = doc["frames"]
    if not frames:
        raise ValueError("keypoint file has an empty frame list")
    kps = np.zeros((len(frames), n_joints, 2))
    confs = np.zeros((len(frames), n_joints))
    for t, frame in enumerate(frames):
        crop = frame.get("crop")
        if crop is None or not all(k in crop for k in ("cx", "cy", "size")):
            raise ValueError(f"frame {t}: missing or incomplete crop metadata")
        size = float(crop["size"])
        if size <= 0:
            raise ValueError(f"frame {t}: crop size must be positive")
        entries = frame.get("keypoints")
        if entries is None or len(entries) != n_joints:
            raise ValueError(f"frame {t}: expected {n_joints} keypoints, "
                             f"got {0 if entries is None else len(entries)}")
        for j, entry in enumerate(entries):
            if entry is None:
                continue  # absent joint: confidence stays 0
            x, y, c = float(entry[0]), float(entry[1]), float(entry[2])
            kps[t, j, 0] = 2.0 * (x - float(crop["cx"])) / size
            kps[t, j, 1] = 2.0 * (y - float(crop["cy"])) / size
            confs[t, j] = min(max(c, 0.0), 1.0)
    return kps, confs, float(doc["fps"])


def write_keypoints_json(path, keypoints: np.ndarray, confs: np.ndarray, fps: float,
                         crop=(0.0, 0.0, 2.0)) -> None:
    """Inverse of ``ingest_keypoints`` for fixtures: normalized -> pixel JSON."""
    cx, cy, size = crop
    t_frames, n_joints = confs.shape
    doc = {
        "fps": fps,
        "joints": n_joints,
        "frames": [
            {
                "crop": {"cx": cx, "cy": cy, "size": size},
                "keypoints": [
                    [keypoints[t, j, 0] * size / 2.0 + cx,
                     keypoints[t, j, 1] * size / 2.0 + cy,
                     float(confs[t, j])]
                    for j in range(n_joints)
                ],
            }
            for t in range(t_frames)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))

"""Pose and mesh evaluation metrics, all reported in millimetres.

Conventions pinned here (and recorded in every report): MPJPE root-centres
both joint sets on joint 0 and applies no rotation or scale alignment;
PA-MPJPE applies the full similarity (Umeyama) alignment; MPVE root-centres
vertices on explicitly supplied root positions; acceleration error uses the
second central difference scaled by fps^2, so it is blind to any trajectory
component that is affine in time. Metrics are evaluated over all of the
model's joints; the joint count travels with the report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

M_TO_MM = 1000.0


@dataclass
class MetricReport:
    joint_count: int
    pa_mpjpe: np.ndarray       # (T,) per frame, mm
    mpjpe: np.ndarray          # (T,) per frame, mm
    mpve: np.ndarray | None    # (T,) per frame, mm
    accel_err: float           # mm/s^2 over the sequence
    min_over_n: dict = field(default_factory=dict)  # n -> mean mm

    @property
    def mean_pa_mpjpe(self) -> float:
        return float(np.mean(self.pa_mpjpe))

    @property
    def mean_mpjpe(self) -> float:
        return float(np.mean(self.mpjpe))

    @property
    def mean_mpve(self) -> float | None:
        return None if self.mpve is None else float(np.mean(self.mpve))


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity transform of pred minimizing summed squared error to gt.

    Closed-form (rotation via SVD of the cross-covariance, scale from its
    trace). Returns s R pred + t; R is a proper rotation.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"procrustes_align: point sets must both be (K, 3), got {pred.shape} and {gt.shape}")
    if pred.shape[0] < 3:
        raise ValueError(f"procrustes_align: need at least 3 points, got {pred.shape[0]}")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    xp = pred - mu_p
    xg = gt - mu_g
    cov = xp.T @ xg
    u, svals, vt = np.linalg.svd(cov)
    rank = int(np.sum(svals > 1e-12 * max(svals[0], 1e-300)))
    if rank < 2:
        raise ValueError("procrustes_align: rank-deficient covariance (degenerate point set)")
    sign = np.sign(np.linalg.det(u @ vt))
    d = np.ones(3)
    d[-1] = sign if sign != 0 else 1.0
    rot = vt.T @ np.diag(d) @ u.T
    var_p = (xp * xp).sum()
    if var_p <= 0.0:
        raise ValueError("procrustes_align: degenerate prediction (zero variance)")
    scale = (svals * d).sum() / var_p
    return scale * xp @ rot.T + mu_g


def pa_mpjpe(pred_joints: np.ndarray, gt_joints: np.ndarray) -> float:
    """Mean joint distance after similarity alignment, in mm."""
    pred = np.asarray(pred_joints, dtype=np.float64)
    gt = np.asarray(gt_joints, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pa_mpjpe: joint sets differ in shape: {pred.shape} vs {gt.shape}")
    aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - gt, axis=1).mean() * M_TO_MM)


def mpjpe(pred_joints: np.ndarray, gt_joints: np.ndarray) -> float:
    """Mean joint distance after root-centring only (joint 0), in mm."""
    pred = np.asarray(pred_joints, dtype=np.float64)
    gt = np.asarray(gt_joints, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"mpjpe: joint sets differ in shape: {pred.shape} vs {gt.shape}")
    diff = (pred - pred[0]) - (gt - gt[0])
    return float(np.linalg.norm(diff, axis=1).mean() * M_TO_MM)


def mpve(pred_vertices: np.ndarray, gt_vertices: np.ndarray,
         pred_root: np.ndarray, gt_root: np.ndarray) -> float:
    """Mean vertex distance after root-centring on the given roots, in mm."""
    pred = np.asarray(pred_vertices, dtype=np.float64)
    gt = np.asarray(gt_vertices, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"mpve: vertex sets differ in shape: {pred.shape} vs {gt.shape}")
    diff = (pred - np.asarray(pred_root)) - (gt - np.asarray(gt_root))
    return float(np.linalg.norm(diff, axis=1).mean() * M_TO_MM)


def accel_error(pred_seq: np.ndarray, gt_seq: np.ndarray, fps: float) -> float:
    """Mean second-difference discrepancy, scaled to mm/s^2.

    a_t = x_{t+1} - 2 x_t + x_{t-1} (per joint); the reported value is
    mean_t,k |a_pred - a_gt| * fps^2 * 1000.
    """
    pred = np.asarray(pred_seq, dtype=np.float64)
    gt = np.asarray(gt_seq, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"accel_error: sequences differ in shape: {pred.shape} vs {gt.shape}")
    if pred.shape[0] < 3:
        raise ValueError(f"accel_error: need at least 3 frames, got {pred.shape[0]}")
    ap = pred[2:] - 2.0 * pred[1:-1] + pred[:-2]
    ag = gt[2:] - 2.0 * gt[1:-1] + gt[:-2]
    return float(np.linalg.norm(ap - ag, axis=-1).mean() * fps * fps * M_TO_MM)


def min_over_n(hypotheses, gt_joints: np.ndarray) -> float:
    """Best PA-MPJPE among pose hypotheses for one frame, in mm."""
    hyps = list(hypotheses)
    if not hyps:
        raise ValueError("min_over_n: need at least one hypothesis")
    return min(pa_mpjpe(h, gt_joints) for h in hyps)


def sequence_report(pred_joints: np.ndarray, gt_joints: np.ndarray, fps: float,
                    pred_vertices: np.ndarray | None = None,
                    gt_vertices: np.ndarray | None = None) -> MetricReport:
    """Per-frame metrics plus the sequence acceleration error.

    Joint arrays are (T, K, 3); vertex arrays (T, N, 3) are optional and
    root-centred on joint 0 of the corresponding frame.
    """
    t_frames = pred_joints.shape[0]
    pa = np.array([pa_mpjpe(pred_joints[t], gt_joints[t]) for t in range(t_frames)])
    mp = np.array([mpjpe(pred_joints[t], gt_joints[t]) for t in range(t_frames)])
    mv = None
    if pred_vertices is not None and gt_vertices is not None:
        mv = np.array([
            mpve(pred_vertices[t], gt_vertices[t], pred_joints[t][0], gt_joints[t][0])
            for t in range(t_frames)
        ])
    acc = accel_error(pred_joints, gt_joints, fps) if t_frames >= 3 else 0.0
    return MetricReport(joint_count=pred_joints.shape[1], pa_mpjpe=pa, mpjpe=mp,
                        mpve=mv, accel_err=acc)

"""Checkpoint evaluation: mode metrics and the min-over-n sample protocol.

Per sequence, the per-frame density mode supplies the point prediction for
PA-MPJPE / MPJPE / MPVE / acceleration error. With ``samples_n`` set, each
frame additionally draws n pose hypotheses from its conditional distribution
(per-frame seeded streams, so the first k draws of a run with n >= k are
identical to a run with k) and reports the frame mean of the best PA-MPJPE.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import body_model as bm
from . import data_synth as dsyn
from . import flow as fl
from . import metrics as mx
from . import regression_head as rh
from . import rotations as rot
from .autodiff import Tensor
from .training import ModelBundle, sequence_contexts

EVAL_COLUMNS = ["sequence", "frames", "joints", "pa_mpjpe", "mpjpe", "mpve",
                "accel_err", "min_pa_mpjpe"]


@dataclass
class SequenceEvaluation:
    index: int
    report: mx.MetricReport
    min_pa_mpjpe: float | None   # mean over frames of per-frame best-of-n


def _pose_to_joints(bundle: ModelBundle, theta: Tensor, betas: Tensor):
    rots = rot.pose_vector_to_matrices_t(theta, bundle.body.num_joints)
    mesh = bm.forward(bundle.body, rots, betas)
    return bm.regress_joints3d(bundle.body, mesh).data, mesh.vertices.data


def evaluate_sequence(bundle: ModelBundle, seq: dsyn.SyntheticSequence, seq_index: int,
                      samples_n: int = 0, seed: int = 0) -> SequenceEvaluation:
    with ad.no_grad():
        contexts = sequence_contexts(bundle, seq.observations()[None])
        betas, _scale, _trans = rh.predict_shape_camera(contexts, bundle.head)
        theta_mode = fl.mode(contexts, bundle.flow)
        joints, verts = _pose_to_joints(bundle, theta_mode, betas)
        report = mx.sequence_report(joints, seq.joints3d, seq.fps, verts, seq.vertices)

        best_mean = None
        if samples_n > 0:
            frames = seq.frames
            d = bundle.flow.dim
            zs = np.stack([
                np.random.default_rng([seed, seq_index, t]).standard_normal((samples_n, d))
                for t in range(frames)
            ])                                                    # (T, n, d)
            ctx_rep = ad.reshape(
                ad.expand(ad.reshape(contexts, (frames, 1, contexts.shape[1])),
                          (frames, samples_n, contexts.shape[1])),
                (frames * samples_n, contexts.shape[1]))
            thetas = fl.flow_forward(zs.reshape(frames * samples_n, d), ctx_rep, bundle.flow)
            betas_rep = ad.reshape(
                ad.expand(ad.reshape(betas, (frames, 1, betas.shape[1])),
                          (frames, samples_n, betas.shape[1])),
                (frames * samples_n, betas.shape[1]))
            sample_joints, _ = _pose_to_joints(bundle, thetas, betas_rep)
            sample_joints = sample_joints.reshape(frames, samples_n, -1, 3)
            best = [mx.min_over_n(sample_joints[t], seq.joints3d[t]) for t in range(frames)]
            best_mean = float(np.mean(best))
    if samples_n > 0:
        report.min_over_n[samples_n] = best_mean
    return SequenceEvaluation(index=seq_index, report=report, min_pa_mpjpe=best_mean)


def evaluate_dataset(bundle: ModelBundle, seqs: list, samples_n: int = 0, seed: int = 0,
                     mapper=map) -> list[SequenceEvaluation]:
    """Evaluate every sequence; ``mapper`` may be a parallel, order-preserving map."""
    def run(pair):
        i, seq = pair
        return evaluate_sequence(bundle, seq, i, samples_n, seed)

    return list(mapper(run, list(enumerate(seqs))))


def aggregate_rows(evals: list[SequenceEvaluation]) -> list[dict]:
    rows = []
    for ev in evals:
        rows.append({
            "sequence": ev.index,
            "frames": len(ev.report.pa_mpjpe),
            "joints": ev.report.joint_count,
            "pa_mpjpe": ev.report.mean_pa_mpjpe,
            "mpjpe": ev.report.mean_mpjpe,
            "mpve": ev.report.mean_mpve,
            "accel_err": ev.report.accel_err,
            "min_pa_mpjpe": ev.min_pa_mpjpe,
        })
    mean_of = lambda key: float(np.mean([r[key] for r in rows])) if rows and rows[0][key] is not None else None
    rows.append({
        "sequence": "mean",
        "frames": int(np.sum([r["frames"] for r in rows])),
        "joints": rows[0]["joints"] if rows else 0,
        "pa_mpjpe": mean_of("pa_mpjpe"),
        "mpjpe": mean_of("mpjpe"),
        "mpve": mean_of("mpve"),
        "accel_err": mean_of("accel_err"),
        "min_pa_mpjpe": mean_of("min_pa_mpjpe"),
    })
    return rows


def write_report(rows: list[dict], csv_path, json_path, meta: dict) -> None:
    """CSV (stable column order) and JSON mirrors of an evaluation report."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in EVAL_COLUMNS})
    doc = {"meta": meta, "columns": EVAL_COLUMNS, "rows": rows}
    with open(json_path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))

"""Command-line entry point: generate, train, eval, sample, fit, export-mesh.

Every subcommand is reproducible under a fixed --seed and --threads 1; none
of the payload outputs embeds a timestamp. FLOWPOSE_LOG=DEBUG|INFO|WARNING
controls log verbosity on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import body_model as bm
from . import data_synth as dsyn
from . import evaluation as ev
from . import fitting as fit_mod
from . import flow as fl
from . import rotations as rot
from .assets import toy_model_json_path
from .autodiff import Tensor
from .training import TrainConfig, load_bundle, sequence_contexts, train

log = logging.getLogger("flowpose")


def _setup_logging() -> None:
    level = os.environ.get("FLOWPOSE_LOG", "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve_model(path: str) -> bm.BodyModel:
    if path == "toy":
        return bm.load_model(toy_model_json_path())
    return bm.load_model(path)


def _ordered_map(threads: int):
    if threads <= 1:
        return map

    def mapper(fn, items):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))

    return mapper


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def cmd_generate(args) -> int:
    model = _resolve_model(args.model)
    config = dsyn.GenerationConfig(frames=args.frames, fps=args.fps,
                                   noise_sigma=args.noise, occlusion_prob=args.occlusion)
    seqs = dsyn.generate_dataset(args.seed, args.sequences, model, config)
    dsyn.write_dataset(seqs, args.out)
    log.info("wrote %d sequences to %s", len(seqs), args.out)
    print(args.out)
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    train_seqs = dsyn.read_dataset(args.dataset)
    val_seqs = dsyn.read_dataset(args.val_dataset) if args.val_dataset else None
    result = train(config, train_seqs, val_seqs, out_dir=args.out)
    final = os.path.join(args.out, "checkpoint.json")
    from .training import save_bundle

    save_bundle(result.bundle, final, extra={"epoch": config.epochs, "seed": config.seed})
    log.info("training finished; final checkpoint at %s", final)
    print(final)
    return 0


def cmd_eval(args) -> int:
    model = _resolve_model(args.model)
    bundle = load_bundle(args.checkpoint, model)
    seqs = dsyn.read_dataset(args.dataset)
    evals = ev.evaluate_dataset(bundle, seqs, samples_n=args.samples, seed=args.seed,
                                mapper=_ordered_map(args.threads))
    rows = ev.aggregate_rows(evals)
    meta = {"checkpoint": os.path.basename(args.checkpoint), "samples": args.samples,
            "seed": args.seed, "joint_count": model.num_joints}
    ev.write_report(rows, args.out + ".csv", args.out + ".json", meta)
    print(args.out + ".csv")
    return 0


def cmd_sample(args) -> int:
    model = _resolve_model(args.model)
    bundle = load_bundle(args.checkpoint, model)
    seqs = dsyn.read_dataset(args.dataset)
    if not 0 <= args.sequence < len(seqs):
        raise ValueError(f"--sequence {args.sequence} out of range (dataset has {len(seqs)})")
    seq = seqs[args.sequence]
    if not 0 <= args.frame < seq.frames:
        raise ValueError(f"--frame {args.frame} out of range (sequence has {seq.frames})")
    with ad.no_grad():
        contexts = sequence_contexts(bundle, seq.observations()[None]).data
        c = contexts[args.frame]
        rng = np.random.default_rng([args.seed, args.sequence, args.frame])
        thetas, log_probs = fl.sample(args.samples, c, bundle.flow, rng)
        mode_theta = fl.mode(Tensor(c), bundle.flow)
        mode_lp = fl.log_prob(mode_theta, Tensor(c), bundle.flow)
    doc = {
        "sequence": args.sequence,
        "frame": args.frame,
        "mode": {"theta6d": mode_theta.data.tolist(), "log_prob": float(mode_lp.data)},
        "samples": [
            {"theta6d": thetas.data[i].tolist(), "log_prob": float(log_probs[i])}
            for i in range(args.samples)
        ],
    }
    _write_json(args.out, doc)
    print(args.out)
    return 0


def cmd_fit(args) -> int:
    model = _resolve_model(args.model)
    bundle = load_bundle(args.checkpoint, model)
    config = fit_mod.FitConfig(w_kp=args.w_kp, w_prior=args.w_prior, w_shape=args.w_shape,
                               lr=args.lr, max_iters=args.max_iters)
    jobs = []
    if args.dataset:
        seqs = dsyn.read_dataset(args.dataset)
        if args.sequence is not None:
            seqs = [seqs[args.sequence]]
        for seq in seqs:
            jobs.append((seq.observations(), seq.noisy_kp, seq.conf))
    else:
        kp, conf, _fps = dsyn.ingest_keypoints(args.keypoints)
        if kp.shape[1] != model.num_joints:
            raise ValueError(f"keypoint file has {kp.shape[1]} joints, model has {model.num_joints}")
        obs = np.concatenate([kp, conf[..., None]], axis=2).reshape(kp.shape[0], -1)
        jobs.append((obs, kp, conf))

    def run(job):
        obs, kps, confs = job
        return fit_mod.fit_sequence(bundle, obs, kps, confs, config)

    results = list(_ordered_map(args.threads)(run, jobs))
    doc = {"fit_config": {"w_kp": config.w_kp, "w_prior": config.w_prior,
                          "w_shape": config.w_shape, "lr": config.lr,
                          "max_iters": config.max_iters},
           "sequences": [fit_mod.fit_result_json(r) for r in results]}
    _write_json(args.out, doc)
    print(args.out)
    return 0


def cmd_export_mesh(args) -> int:
    model = _resolve_model(args.model)
    with open(args.params, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for si, seq_doc in enumerate(doc["sequences"]):
        for ti, frame in enumerate(seq_doc["frames"]):
            theta_aa = np.asarray(frame["theta_axis_angle"], dtype=np.float64).reshape(-1, 3)
            if theta_aa.shape[0] != model.num_joints:
                raise ValueError(f"sequence {si} frame {ti}: {theta_aa.shape[0]} joints "
                                 f"in file, model has {model.num_joints}")
            beta = bm.clamp_betas(frame["beta"])
            mats = np.stack([rot.axis_angle_to_matrix(v) for v in theta_aa])
            bm.validate_rotations(mats)
            with ad.no_grad():
                mesh = bm.forward_single(model, mats, beta)
            path = os.path.join(args.out, f"seq{si:03d}_frame{ti:03d}.obj")
            bm.export_obj(path, mesh.vertices.data[0], model.faces)
            written.append(path)
    log.info("wrote %d meshes to %s", len(written), args.out)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowpose",
        description="Temporal probabilistic pose and shape estimation, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, dataset=False):
        p.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
        p.add_argument("--threads", type=int, default=1,
                       help="parallel workers for per-sequence work (default 1)")
        p.add_argument("--model", default="toy",
                       help="body model JSON path, or 'toy' for the bundled asset")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="parameter checkpoint path")
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset file path")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p.add_argument("--sequences", type=int, required=True, help="number of sequences")
    p.add_argument("--frames", type=int, default=16, help="frames per sequence")
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--noise", type=float, default=0.01, help="keypoint noise sigma")
    p.add_argument("--occlusion", type=float, default=0.1, help="joint occlusion probability")
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train from a dataset")
    p.add_argument("--config", help="INI config ([model]/[flow]/[encoder]/[train])")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-dataset", help="held-out sequences (default: 10%% split)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory (checkpoints + metrics.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p, checkpoint=True, dataset=True)
    p.add_argument("--samples", type=int, default=0,
                   help="hypotheses per frame for the min-over-n column")
    p.add_argument("--out", required=True, help="report path prefix (.csv/.json added)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw pose hypotheses for one frame")
    common(p, checkpoint=True, dataset=True)
    p.add_argument("--sequence", type=int, required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--samples", type=int, default=25)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit", help="fit poses to 2D keypoints with the video prior")
    common(p, checkpoint=True)
    p.add_argument("--dataset", help="fit every sequence of a dataset file")
    p.add_argument("--keypoints", help="fit a detection-style keypoint JSON file")
    p.add_argument("--sequence", type=int, help="restrict --dataset fitting to one index")
    p.add_argument("--w-kp", type=float, default=1.0, help="keypoint term weight")
    p.add_argument("--w-prior", type=float, default=0.1, help="pose prior weight")
    p.add_argument("--w-shape", type=float, default=0.001, help="shape penalty weight")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("export-mesh", help="write OBJ meshes from fit output")
    p.add_argument("--model", default="toy")
    p.add_argument("--params", required=True, help="fit output JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_mesh)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "fit" and bool(args.dataset) == bool(args.keypoints):
        print("flowpose fit: exactly one of --dataset or --keypoints is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as err:
        print(f"flowpose {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface.

Subcommands: gen-synthetic, preprocess, train, sweep, evaluate, backfit,
decode-centroids, report. Exit codes: 0 success, 1 validation error,
2 runtime failure. MSVADE_LOG sets log verbosity (DEBUG/INFO/WARNING/...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("msvade")


def _setup_logging() -> None:
    level = os.environ.get("MSVADE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file with architecture and loss weights")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, required=True,
                        help="output directory")
    parser.add_argument("--jobs", type=int, default=1)


def _load_config(args):
    from .model import ArchConfig, LossWeights, load_config
    if args.config is not None:
        return load_config(args.config)
    return ArchConfig(K=4), LossWeights()


def cmd_gen_synthetic(args) -> int:
    from .eeg import SyntheticSpec, generate_synthetic, save_recording_csv
    from .montage import montage_to_json
    spec = SyntheticSpec(n_templates=args.templates, duration=args.duration,
                         fs=args.fs, mean_state_duration=args.dwell_ms,
                         snr=args.snr, seed=args.seed)
    rec, templates, states = generate_synthetic(spec)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    save_recording_csv(rec, out / "recording.csv")
    (out / "montage.json").write_text(
        montage_to_json(rec.channel_names, rec.montage) + "\n", encoding="utf-8")
    with open(out / "truth_templates.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(rec.channel_names) + "\n")
        np.savetxt(fh, templates, delimiter=",", fmt="%.10g")
    np.savetxt(out / "state_sequence.csv", states, fmt="%d")
    log.info("synthetic subject written to %s", out)
    print(f"wrote {out / 'recording.csv'} "
          f"({rec.n_channels} channels x {rec.n_samples} samples)")
    return 0


def cmd_preprocess(args) -> int:
    from .eeg import load_recording
    from .pipeline import preprocess_subject, save_subject
    rec = load_recording(args.data, args.montage, fs=args.fs)
    data = preprocess_subject(rec, split_seed=args.seed)
    save_subject(data, args.out)
    print(f"preprocessed: train N={len(data.train)} eval N={len(data.eval)}")
    return 0


def cmd_train(args) -> int:
    from .model import save_config
    from .pipeline import load_subject
    from .trainer import TrainOptions, run_training
    cfg, weights = _load_config(args)
    data = load_subject(args.data)
    opts = TrainOptions(max_epochs=args.epochs)
    args.out.mkdir(parents=True, exist_ok=True)
    model, history, state = run_training(
        cfg, data, weights, opts, seed=args.seed,
        history_path=args.out / "history.jsonl")
    model.save(args.out / "checkpoint.cvde")
    save_config(args.out / "config.json", cfg, weights)
    from .evaluation import evaluate_model
    report = evaluate_model(model, data)
    (args.out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    print(f"trained {len(history)} epochs; best composite "
          f"{state.best_composite:.4f} at epoch {state.best_epoch}")
    return 0


def cmd_sweep(args) -> int:
    from .sweep import SweepGrid, run_sweep
    from .trainer import TrainOptions
    if args.grid:
        grid = SweepGrid.from_json(args.grid)
    else:
        subjects = sorted(p.name for p in Path(args.data).iterdir() if p.is_dir())
        grid = SweepGrid(subjects=subjects, base_seed=args.seed)
    opts = TrainOptions(max_epochs=args.epochs)
    records, n_new = run_sweep(grid, args.data, args.out, jobs=args.jobs,
                               opts=opts)
    print(f"sweep complete: {len(records)} records ({n_new} new)")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_model
    from .model import ConvVade
    from .pipeline import load_subject
    cfg, _ = _load_config(args)
    data = load_subject(args.data)
    model = ConvVade(cfg)
    model.load(args.checkpoint)
    report = evaluate_model(model, data)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "metrics.json"
    path.write_text(report.to_json(), encoding="utf-8")
    print(report.to_json())
    return 0


def cmd_backfit(args) -> int:
    from .metrics import backfit
    from .modkmeans import load_templates_csv
    templates, _ = load_templates_csv(args.templates)
    arrays = np.load(args.maps)
    maps = arrays["maps"] if "maps" in arrays else arrays[arrays.files[0]]
    result = backfit(maps, templates)
    args.out.mkdir(parents=True, exist_ok=True)
    np.savetxt(args.out / "labels.csv", result.labels, fmt="%d")
    np.savetxt(args.out / "rho.csv", result.rho, fmt="%.10g")
    (args.out / "gev.json").write_text(json.dumps({"gev": result.gev}),
                                       encoding="utf-8")
    print(f"gev = {result.gev:.6f}")
    return 0


def cmd_decode_centroids(args) -> int:
    from .evaluation import decode_centroids
    from .imaging import render_topomap_image
    from .metrics import centroid_correlation_matrix
    from .model import ConvVade
    from .topomap import head_mask
    cfg, _ = _load_config(args)
    model = ConvVade(cfg)
    model.load(args.checkpoint)
    decoded = decode_centroids(model)
    args.out.mkdir(parents=True, exist_ok=True)
    mask = head_mask()
    for c in range(decoded.shape[0]):
        render_topomap_image(decoded[c], args.out / f"centroid_{c}.ppm", mask)
    corr = centroid_correlation_matrix(decoded, mask)
    np.savetxt(args.out / "centroid_correlation.csv", corr,
               delimiter=",", fmt="%.6f")
    print(f"wrote {decoded.shape[0]} centroid topographies to {args.out}")
    return 0


def cmd_report(args) -> int:
    from .sweep import load_records, report
    records = load_records(args.records)
    written = report(records, args.out)
    print(f"report: {len(written)} files in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msvade",
        description="Conv-VaDE EEG microstate pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic subject")
    _add_common(p)
    p.add_argument("--templates", type=int, default=4)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--fs", type=float, default=250.0)
    p.add_argument("--dwell-ms", type=float, default=80.0)
    p.add_argument("--snr", type=float, default=5.0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("preprocess", help="recording -> normalized datasets")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="recording CSV")
    p.add_argument("--montage", type=Path, required=True, help="montage JSON")
    p.add_argument("--fs", type=float, default=250.0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model on one subject")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True,
                   help="preprocessed subject directory")
    p.add_argument("--epochs", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid search over configs x subjects")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True,
                   help="root directory of preprocessed subjects")
    p.add_argument("--grid", type=Path, default=None, help="grid JSON")
    p.add_argument("--epochs", type=int, default=100)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="metric report for a checkpoint")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("backfit", help="label maps by templates, compute GEV")
    _add_common(p)
    p.add_argument("--maps", type=Path, required=True,
                   help="npz with electrode maps")
    p.add_argument("--templates", type=Path, required=True,
                   help="template CSV (header = channel names)")
    p.set_defaults(func=cmd_backfit)

    p = sub.add_parser("decode-centroids",
                       help="render decoded cluster centres")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_decode_centroids)

    p = sub.add_parser("report", help="tables and images from sweep records")
    _add_common(p)
    p.add_argument("--records", type=Path, required=True,
                   help="sweep output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("validation error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:                              # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

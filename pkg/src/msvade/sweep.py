"""Resumable four-dimensional architecture sweep: (K, d_z, depth, ndf) x
subjects, with per-pair deterministic seeds, an append-only JSON-lines
record store plus completion index, best-per-K selection, and reporting."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import imaging
from .evaluation import decode_centroids, evaluate_model
from .model import ArchConfig, ConvVade, LossWeights
from .pipeline import load_subject
from .trainer import TrainOptions, composite_score, run_training

log = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
INDEX_FILE = "completed.idx"


@dataclass
class SweepGrid:
    k_values: list[int] = field(default_factory=lambda: [3, 4])
    dz_values: list[int] = field(default_factory=lambda: [16])
    depth_values: list[int] = field(default_factory=lambda: [2, 4])
    ndf_values: list[int] = field(default_factory=lambda: [32])
    subjects: list[str] = field(default_factory=list)
    base_seed: int = 0

    def __post_init__(self):
        for name in ("k_values", "dz_values", "depth_values", "ndf_values",
                     "subjects"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")

    @property
    def size(self) -> int:
        return (len(self.k_values) * len(self.dz_values)
                * len(self.depth_values) * len(self.ndf_values)
                * len(self.subjects))

    def configs(self):
        for k in self.k_values:
            for dz in self.dz_values:
                for depth in self.depth_values:
                    for ndf in self.ndf_values:
                        yield ArchConfig(K=k, d_z=dz, depth=depth, ndf=ndf)

    def pairs(self):
        for cfg in self.configs():
            for subject in self.subjects:
                yield cfg, subject

    @classmethod
    def from_json(cls, path) -> "SweepGrid":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(k_values=list(doc.get("k_values", [3, 4])),
                   dz_values=list(doc.get("dz_values", [16])),
                   depth_values=list(doc.get("depth_values", [2, 4])),
                   ndf_values=list(doc.get("ndf_values", [32])),
                   subjects=list(doc.get("subjects", [])),
                   base_seed=int(doc.get("base_seed", 0)))


def pair_key(cfg: ArchConfig, subject: str) -> str:
    return f"K{cfg.K}-dz{cfg.d_z}-L{cfg.depth}-ndf{cfg.ndf}-{subject}"


def pair_seed(cfg: ArchConfig, subject: str, base_seed: int) -> int:
    """Stable 63-bit seed from the pair identity."""
    text = f"{cfg.K}/{cfg.d_z}/{cfg.depth}/{cfg.ndf}/{subject}/{base_seed}"
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def _train_pair(cfg_doc: dict, subject: str, subject_dir: str, seed: int,
                opts_doc: dict, weights_doc: dict, ckpt_path: str,
                n_threads: int = 0) -> dict:
    """Worker: one (config, subject) training; returns the sweep record."""
    if n_threads > 0:
        import torch
        torch.set_num_threads(n_threads)
    cfg = ArchConfig(**cfg_doc)
    opts = TrainOptions(**opts_doc)
    weights = LossWeights(**weights_doc)
    data = load_subject(subject_dir)
    started = time.time()
    model, history, state = run_training(cfg, data, weights, opts, seed=seed)
    report = evaluate_model(model, data)
    model.save(ckpt_path)
    return {
        "key": pair_key(cfg, subject),
        "config": {"K": cfg.K, "d_z": cfg.d_z, "depth": cfg.depth, "ndf": cfg.ndf},
        "subject": subject,
        "seed": seed,
        "wall_time": time.time() - started,
        "epochs": len(history),
        "composite": composite_score(report.silhouette, report.gev),
        "metrics": report.to_dict(),
        "checkpoint": str(ckpt_path),
    }


def load_records(out_dir) -> list[dict]:
    path = Path(out_dir) / RECORDS_FILE
    records = []
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
    return records


def _completed_keys(out_dir) -> set[str]:
    idx = Path(out_dir) / INDEX_FILE
    if idx.exists():
        return {line.strip() for line in idx.read_text().splitlines() if line.strip()}
    return {r["key"] for r in load_records(out_dir)}


def run_sweep(grid: SweepGrid, data_root, out_dir, jobs: int = 1,
              opts: TrainOptions | None = None,
              weights: LossWeights | None = None) -> tuple[list[dict], int]:
    """Train every (config, subject) pair not already in the record store.

    Returns (all records, number trained in this invocation). Worker
    failures are logged and recorded in failures.jsonl; the sweep continues.
    """
    opts = opts or TrainOptions()
    weights = weights or LossWeights()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)

    data_root = Path(data_root)
    for subject in grid.subjects:
        if not (data_root / subject).is_dir():
            raise ValueError(f"missing subject data: {data_root / subject}")

    done = _completed_keys(out)
    todo = [(cfg, subject) for cfg, subject in grid.pairs()
            if pair_key(cfg, subject) not in done]
    log.info("sweep: %d pairs total, %d already complete, %d to train",
             grid.size, grid.size - len(todo), len(todo))

    opts_doc = asdict(opts)
    weights_doc = asdict(weights)
    n_new = 0

    def job_args(cfg: ArchConfig, subject: str):
        key = pair_key(cfg, subject)
        return ({"K": cfg.K, "d_z": cfg.d_z, "depth": cfg.depth, "ndf": cfg.ndf},
                subject, str(data_root / subject),
                pair_seed(cfg, subject, grid.base_seed),
                opts_doc, weights_doc, str(out / "checkpoints" / f"{key}.cvde"),
                1 if jobs > 1 else 0)

    def commit(record: dict) -> None:
        nonlocal n_new
        with open(out / RECORDS_FILE, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
            fh.flush()
        with open(out / INDEX_FILE, "a", encoding="utf-8") as fh:
            fh.write(record["key"] + "\n")
            fh.flush()
        n_new += 1

    def fail(key: str, exc: Exception) -> None:
        log.error("pair %s failed: %s", key, exc)
        with open(out / "failures.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"key": key, "error": str(exc)}) + "\n")

    if jobs <= 1:
        for cfg, subject in todo:
            key = pair_key(cfg, subject)
            try:
                commit(_train_pair(*job_args(cfg, subject)))
            except Exception as exc:                      # noqa: BLE001
                fail(key, exc)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_train_pair, *job_args(cfg, subject)):
                       pair_key(cfg, subject) for cfg, subject in todo}
            for future in as_completed(futures):
                key = futures[future]
                try:
                    commit(future.result())
                except Exception as exc:                  # noqa: BLE001
                    fail(key, exc)

    return load_records(out), n_new


def _config_tuple(record: dict) -> tuple[int, int, int, int]:
    c = record["config"]
    return int(c["K"]), int(c["d_z"]), int(c["depth"]), int(c["ndf"])


def select_best(records: list[dict]) -> dict[int, dict]:
    """Per K, the config with the highest mean GEV across subjects; ties go
    to higher mean silhouette, then lexicographically smaller (d_z, depth,
    ndf). Every config under a K must cover the same subjects."""
    by_config: dict[tuple, list[dict]] = {}
    for r in records:
        by_config.setdefault(_config_tuple(r), []).append(r)

    by_k: dict[int, list[tuple]] = {}
    for cfg in by_config:
        by_k.setdefault(cfg[0], []).append(cfg)

    best: dict[int, dict] = {}
    for k, cfgs in sorted(by_k.items()):
        subjects = {r["subject"] for cfg in cfgs for r in by_config[cfg]}
        rows = []
        for cfg in cfgs:
            covered = {r["subject"] for r in by_config[cfg]}
            if covered != subjects:
                raise ValueError(
                    f"incomplete grid for K={k}: config {cfg} misses subjects "
                    f"{sorted(subjects - covered)}")
            gev = float(np.mean([r["metrics"]["gev"] for r in by_config[cfg]]))
            sil = float(np.mean([r["metrics"]["silhouette"] for r in by_config[cfg]]))
            rows.append((-gev, -sil, cfg[1:], cfg))
        rows.sort()
        _, _, _, cfg = rows[0]
        best[k] = {"K": cfg[0], "d_z": cfg[1], "depth": cfg[2], "ndf": cfg[3],
                   "mean_gev": -rows[0][0], "mean_silhouette": -rows[0][1],
                   "records": by_config[cfg]}
    return best


MARGINAL_METRICS = ["silhouette", "davies_bouldin", "calinski_harabasz",
                    "dunn", "gev"]
AXES = {"dz": 1, "depth": 2, "ndf": 3}


def report(records: list[dict], out_dir) -> list[Path]:
    """Emit the best-per-K table, per-axis marginal-effect tables, metric
    heatmaps over the K x depth plane, and decoded-centroid topographies
    for each best-per-K checkpoint."""
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    best = select_best(records)
    path = out / "best_per_k.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["K", "dz", "depth", "ndf", "q1_sil", "gev"])
        for k, row in sorted(best.items()):
            writer.writerow([k, row["d_z"], row["depth"], row["ndf"],
                             f"{row['mean_silhouette']:.6g}",
                             f"{row['mean_gev']:.6g}"])
    written.append(path)

    for axis, pos in AXES.items():
        groups: dict[int, list[dict]] = {}
        for r in records:
            groups.setdefault(_config_tuple(r)[pos], []).append(r)
        path = out / f"marginal_{axis}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([axis] + MARGINAL_METRICS)
            for value in sorted(groups):
                means = [np.mean([g["metrics"][m] for g in groups[value]])
                         for m in MARGINAL_METRICS]
                writer.writerow([value] + [f"{m:.6g}" for m in means])
        written.append(path)

    k_values = sorted({_config_tuple(r)[0] for r in records})
    depth_values = sorted({_config_tuple(r)[2] for r in records})
    for metric in MARGINAL_METRICS:
        cells = np.full((len(depth_values), len(k_values)), np.nan)
        for i, depth in enumerate(depth_values):
            for j, k in enumerate(k_values):
                vals = [r["metrics"][metric] for r in records
                        if _config_tuple(r)[0] == k and _config_tuple(r)[2] == depth]
                if vals:
                    cells[i, j] = np.mean(vals)
        path = out / f"heatmap_{metric}.pgm"
        imaging.render_heatmap_image(np.nan_to_num(cells), path)
        written.append(path)

    for k, row in sorted(best.items()):
        ckpt = row["records"][0].get("checkpoint")
        if not ckpt or not Path(ckpt).exists():
            log.warning("no checkpoint for best K=%d; skipping topographies", k)
            continue
        cfg = ArchConfig(K=row["K"], d_z=row["d_z"], depth=row["depth"],
                         ndf=row["ndf"])
        model = ConvVade(cfg)
        model.load(ckpt)
        decoded = decode_centroids(model)
        for c in range(decoded.shape[0]):
            path = out / f"topo_K{k}_c{c}.ppm"
            imaging.render_topomap_image(decoded[c], path)
            written.append(path)

    return written

"""End-to-end preprocessing: recording -> normalized topomap datasets plus
the electrode-space evaluation maps needed for GEV backfitting."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import topomap
from .eeg import EegRecording, preprocess_recording
from .topomap import NormStats, TopomapDataset

log = logging.getLogger(__name__)


@dataclass
class SubjectData:
    """Everything one training run needs for a single subject."""

    train: TopomapDataset        # augmented + normalized
    eval: TopomapDataset         # normalized, never augmented
    norm: NormStats
    eval_maps: np.ndarray        # (N_eval, n_channels) electrode maps at eval peaks
    eval_gfp: np.ndarray         # (N_eval,)
    pos2d: np.ndarray            # (n_channels, 2) projected electrode layout
    channel_names: list[str]

    @property
    def head_mask(self) -> np.ndarray:
        return self.train.head_mask


def preprocess_subject(rec: EegRecording, split_ratio: float = 0.9,
                       split_seed: int = 0, low: float = 2.0, high: float = 20.0,
                       min_peak_distance: int = 3) -> SubjectData:
    """CAR + bandpass + GFP peaks + rasterize + split + normalize + augment."""
    rec, series = preprocess_recording(rec, low, high, min_peak_distance)
    ds = topomap.build_dataset(rec, series.peak_indices)
    train, eval_ds = topomap.split(ds, split_ratio, split_seed)
    stats = topomap.fit_normalize(train)
    train = topomap.apply_normalize(train, stats)
    eval_ds = topomap.apply_normalize(eval_ds, stats)
    train = topomap.augment_signflip(train)

    eval_peaks = eval_ds.source_indices
    eval_maps = rec.data[:, eval_peaks].T
    eval_gfp = series.values[eval_peaks]
    pos2d = topomap.project_electrodes(rec.montage)
    return SubjectData(train=train, eval=eval_ds, norm=stats,
                       eval_maps=eval_maps, eval_gfp=eval_gfp,
                       pos2d=pos2d, channel_names=list(rec.channel_names))


def save_subject(data: SubjectData, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    topomap.save_dataset(data.train, out / "train.tmap")
    topomap.save_dataset(data.eval, out / "eval.tmap")
    topomap.save_norm_stats(data.norm, out / "norm.json")
    np.savez(out / "eval_maps.npz", maps=data.eval_maps, gfp=data.eval_gfp,
             pos2d=data.pos2d)
    with open(out / "channels.json", "w", encoding="utf-8") as fh:
        json.dump(data.channel_names, fh)
    log.info("subject data written to %s (train N=%d, eval N=%d)",
             out, len(data.train), len(data.eval))


def load_subject(in_dir) -> SubjectData:
    src = Path(in_dir)
    train = topomap.load_dataset(src / "train.tmap")
    eval_ds = topomap.load_dataset(src / "eval.tmap")
    stats = topomap.load_norm_stats(src / "norm.json")
    arrays = np.load(src / "eval_maps.npz")
    with open(src / "channels.json", encoding="utf-8") as fh:
        names = json.load(fh)
    return SubjectData(train=train, eval=eval_ds, norm=stats,
                       eval_maps=arrays["maps"], eval_gfp=arrays["gfp"],
                       pos2d=arrays["pos2d"], channel_names=names)

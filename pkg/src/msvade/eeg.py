"""EEG loading, synthesis, and preprocessing up to GFP-peak extraction.

All operations are pure: each returns a new recording and leaves its input
untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import fftconvolve, firwin

from .montage import default_montage, load_montage

log = logging.getLogger(__name__)


@dataclass
class EegRecording:
    """Channel-major EEG matrix with sampling rate and 3-D montage."""

    data: np.ndarray            # (n_channels, n_samples), microvolts
    fs: float
    channel_names: list[str]
    montage: np.ndarray         # (n_channels, 3) unit-sphere positions

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.montage = np.asarray(self.montage, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("data must be 2-D (channels x samples)")
        n = self.data.shape[0]
        if len(self.channel_names) != n or self.montage.shape != (n, 3):
            raise ValueError(
                f"montage mismatch: {n} data channels, "
                f"{len(self.channel_names)} names, {self.montage.shape[0]} positions")
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")
        norms = np.linalg.norm(self.montage, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("montage positions must lie on the unit sphere")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("data contains NaN or Inf")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class SyntheticSpec:
    """Parameters of the ground-truth synthetic EEG generator."""

    n_templates: int = 4
    duration: float = 60.0          # seconds
    fs: float = 250.0
    mean_state_duration: float = 80.0   # milliseconds
    snr: float = 5.0                # linear amplitude ratio signal/noise
    seed: int = 0

    def __post_init__(self):
        if self.n_templates < 2:
            raise ValueError("need at least 2 templates")
        if self.mean_state_duration <= 0:
            raise ValueError("mean state duration must be positive")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if self.duration <= 0 or self.fs <= 0:
            raise ValueError("duration and fs must be positive")


@dataclass
class GfpSeries:
    """Global field power trace, optionally with detected peak indices."""

    values: np.ndarray
    peak_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.peak_indices = np.asarray(self.peak_indices, dtype=int)


def load_recording(data_path, montage_path, fs: float = 250.0) -> EegRecording:
    """Load a CSV recording (header = channel names, one sample per row)
    and a JSON montage, matching montage entries to the header by name."""
    with open(data_path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            raise ValueError("empty data file")
        names = [h.strip() for h in header.split(",")]
        try:
            rows = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ValueError(f"non-numeric cell in {data_path}: {exc}") from exc
    if rows.shape[1] != len(names):
        raise ValueError(
            f"header names {len(names)} rows have {rows.shape[1]} columns")

    m_names, m_coords = load_montage(montage_path)
    if len(m_names) != len(names):
        raise ValueError(
            f"montage mismatch: {len(names)} data channels, "
            f"{len(m_names)} montage entries")
    index = {n: i for i, n in enumerate(m_names)}
    missing = [n for n in names if n not in index]
    if missing:
        raise ValueError(f"montage mismatch: channels missing from montage: {missing[:5]}")
    coords = m_coords[[index[n] for n in names]]
    return EegRecording(data=rows.T, fs=fs, channel_names=names, montage=coords)


def _dipole_field(positions: np.ndarray, centre: np.ndarray,
                  moment: np.ndarray) -> np.ndarray:
    d = positions - centre
    r = np.linalg.norm(d, axis=1)
    return (d @ moment) / r ** 3


def make_templates(montage: np.ndarray, n_templates: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Smooth, mutually near-orthogonal scalp patterns (one per row).

    Random dipolar fields, common-average referenced, Gram-Schmidt
    orthogonalized, unit-normalized.
    """
    n_ch = montage.shape[0]
    fields = np.empty((n_templates, n_ch))
    for g in range(n_templates):
        centre = rng.normal(size=3)
        centre = 0.6 * centre / np.linalg.norm(centre)
        moment = rng.normal(size=3)
        fields[g] = _dipole_field(montage, centre, moment)
    fields -= fields.mean(axis=1, keepdims=True)
    # Gram-Schmidt, re-centering after each projection step
    for g in range(n_templates):
        for h in range(g):
            fields[g] -= (fields[g] @ fields[h]) * fields[h]
        fields[g] -= fields[g].mean()
        nrm = np.linalg.norm(fields[g])
        if nrm < 1e-9:
            raise RuntimeError("degenerate synthetic template; retry with another seed")
        fields[g] /= nrm
    return fields


def generate_synthetic(spec: SyntheticSpec) -> tuple[EegRecording, np.ndarray, np.ndarray]:
    """Markov-chain template sequence with an oscillatory amplitude envelope,
    per-segment random sign, and additive white noise at the requested SNR.

    Returns (recording, templates (G, n_channels), state_sequence (n_samples,)).
    """
    rng = np.random.default_rng(spec.seed)
    names, montage = default_montage()
    n_ch = montage.shape[0]
    n_samples = int(round(spec.duration * spec.fs))
    templates = make_templates(montage, spec.n_templates, rng)

    dwell = spec.mean_state_duration / 1000.0 * spec.fs  # samples
    p_stay = max(0.0, 1.0 - 1.0 / dwell)
    states = np.empty(n_samples, dtype=int)
    signs = np.empty(n_samples)
    state = int(rng.integers(spec.n_templates))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    for t in range(n_samples):
        if t > 0 and rng.random() >= p_stay:
            others = [k for k in range(spec.n_templates) if k != state]
            state = others[int(rng.integers(len(others)))]
            sign = 1.0 if rng.random() < 0.5 else -1.0
        states[t] = state
        signs[t] = sign

    # 10 Hz oscillatory envelope keeps GFP peaks dense and inside the 2-20 Hz band
    t_axis = np.arange(n_samples) / spec.fs
    envelope = np.sin(2 * np.pi * 10.0 * t_axis)
    clean = (signs * envelope)[None, :] * templates[states].T

    signal_rms = np.sqrt(np.mean(clean ** 2))
    noise = rng.normal(size=(n_ch, n_samples)) * (signal_rms / spec.snr)
    rec = EegRecording(data=clean + noise, fs=spec.fs,
                       channel_names=names, montage=montage)
    return rec, templates, states


def common_average_reference(rec: EegRecording) -> EegRecording:
    """Subtract the instantaneous channel mean from every sample."""
    if rec.n_channels < 2:
        raise ValueError("CAR needs at least 2 channels")
    data = rec.data - rec.data.mean(axis=0, keepdims=True)
    return replace(rec, data=data)


def fir_order(fs: float, transition_bw: float = 1.0) -> int:
    """Smallest odd integer >= 3.3 * fs / transition_bw."""
    n = int(np.ceil(3.3 * fs / transition_bw))
    return n if n % 2 == 1 else n + 1


def bandpass_filter(rec: EegRecording, low: float = 2.0, high: float = 20.0) -> EegRecording:
    """Zero-phase Hamming-windowed FIR bandpass with reflect padding.

    Linear-phase taps applied by centred convolution, so the output stays
    temporally aligned with the input and keeps its length.
    """
    if not (0 < low < high < rec.fs / 2):
        raise ValueError(f"invalid band edges ({low}, {high}) for fs={rec.fs}")
    numtaps = fir_order(rec.fs)
    taps = firwin(numtaps, [low, high], pass_zero=False, fs=rec.fs, window="hamming")
    pad = numtaps // 2
    padded = np.pad(rec.data, ((0, 0), (pad, pad)), mode="reflect")
    out = fftconvolve(padded, taps[None, :], mode="same", axes=1)[:, pad:pad + rec.n_samples]
    return replace(rec, data=out)


def gfp(rec: EegRecording) -> GfpSeries:
    """Global field power: population standard deviation across channels."""
    return GfpSeries(values=np.std(rec.data, axis=0))


def extract_gfp_peaks(series: GfpSeries, min_distance: int = 3) -> GfpSeries:
    """Strict local maxima of the GFP trace with minimum-distance suppression.

    Among peaks closer than `min_distance` the larger survives; on ties the
    earlier index wins. Endpoints are never peaks.
    """
    if min_distance < 1:
        raise ValueError("min_distance must be >= 1")
    v = series.values
    if v.size < 3:
        raise ValueError("series too short for peak detection")
    interior = np.arange(1, v.size - 1)
    cand = interior[(v[interior] > v[interior - 1]) & (v[interior] > v[interior + 1])]
    # greedy: largest value first, earlier index breaks ties
    order = sorted(range(cand.size), key=lambda i: (-v[cand[i]], cand[i]))
    keep = np.zeros(cand.size, dtype=bool)
    taken: list[int] = []
    for i in order:
        idx = cand[i]
        if all(abs(idx - j) >= min_distance for j in taken):
            keep[i] = True
            taken.append(idx)
    peaks = np.sort(cand[keep])
    return GfpSeries(values=v.copy(), peak_indices=peaks)


def preprocess_recording(rec: EegRecording, low: float = 2.0, high: float = 20.0,
                         min_peak_distance: int = 3) -> tuple[EegRecording, GfpSeries]:
    """CAR -> bandpass -> GFP -> peak extraction; the standard front end."""
    rec = common_average_reference(rec)
    rec = bandpass_filter(rec, low, high)
    series = extract_gfp_peaks(gfp(rec), min_peak_distance)
    log.info("preprocessed %d channels x %d samples: %d GFP peaks",
             rec.n_channels, rec.n_samples, series.peak_indices.size)
    return rec, series


def save_recording_csv(rec: EegRecording, path) -> None:
    """Write the External-Interfaces CSV: header row, one sample per row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(rec.channel_names) + "\n")
        np.savetxt(fh, rec.data.T, delimiter=",", fmt="%.10g")

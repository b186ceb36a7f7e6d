"""Electrode montage handling and the bundled 61-channel 10-10 layout.

Positions live on the unit sphere in a right-handed frame: +x through the
right ear, +y through the nasion, +z through the vertex.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

MONTAGE_ASSET = "montage_1010_61.json"

# Front-to-back listing of the 61-channel 10-10 subset.
CHANNELS_61 = [
    "Fp1", "Fpz", "Fp2",
    "AF7", "AF3", "AFz", "AF4", "AF8",
    "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8",
    "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8",
    "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8",
    "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8",
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
    "PO7", "PO3", "POz", "PO4", "PO8",
    "O1", "Oz", "O2",
]


def _unit(theta_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit vector at polar angle theta from +z, azimuth measured from +y
    (nasion) positive toward +x (right)."""
    th = np.deg2rad(theta_deg)
    az = np.deg2rad(azimuth_deg)
    return np.array([np.sin(th) * np.sin(az), np.sin(th) * np.cos(az), np.cos(th)])


def _slerp(a: np.ndarray, b: np.ndarray, f: float) -> np.ndarray:
    omega = np.arccos(np.clip(a @ b, -1.0, 1.0))
    if omega < 1e-12:
        return a.copy()
    return (np.sin((1 - f) * omega) * a + np.sin(f * omega) * b) / np.sin(omega)


def build_standard_montage() -> tuple[list[str], np.ndarray]:
    """Idealized spherical 10-10 layout for the 61 channels in CHANNELS_61.

    The outer ring (polar angle 72 deg) carries 20 electrodes at 18-degree
    steps; interior electrodes of each coronal row sit on the great-circle
    arc between the row's midline electrode and its outer-ring endpoint.
    """
    pos: dict[str, np.ndarray] = {}

    ring = [
        ("Fpz", 0), ("Fp2", 18), ("AF8", 36), ("F8", 54), ("FT8", 72),
        ("T8", 90), ("TP8", 108), ("P8", 126), ("PO8", 144), ("O2", 162),
        ("Oz", 180), ("O1", -162), ("PO7", -144), ("P7", -126), ("TP7", -108),
        ("T7", -90), ("FT7", -72), ("F7", -54), ("AF7", -36), ("Fp1", -18),
    ]
    for name, az in ring:
        pos[name] = _unit(72.0, az)

    midline = [("AFz", 54.0, 0.0), ("Fz", 36.0, 0.0), ("FCz", 18.0, 0.0),
               ("Cz", 0.0, 0.0), ("CPz", 18.0, 180.0), ("Pz", 36.0, 180.0),
               ("POz", 54.0, 180.0)]
    for name, th, az in midline:
        pos[name] = _unit(th, az)

    # (midline anchor, left ring anchor, interior names centre-outward)
    rows = [
        ("AFz", "AF7", ["AF3"]),
        ("Fz", "F7", ["F1", "F3", "F5"]),
        ("FCz", "FT7", ["FC1", "FC3", "FC5"]),
        ("Cz", "T7", ["C1", "C3", "C5"]),
        ("CPz", "TP7", ["CP1", "CP3", "CP5"]),
        ("Pz", "P7", ["P1", "P3", "P5"]),
        ("POz", "PO7", ["PO3"]),
    ]
    for mid, left_end, names in rows:
        n = len(names) + 1
        for i, name in enumerate(names, start=1):
            f = i / n
            pos[name] = _slerp(pos[mid], pos[left_end], f)
            right = name[:-1] + str(int(name[-1]) + 1)
            mirrored = pos[name].copy()
            mirrored[0] = -mirrored[0]
            pos[right] = mirrored

    coords = np.stack([pos[name] for name in CHANNELS_61])
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    return list(CHANNELS_61), coords


def default_montage() -> tuple[list[str], np.ndarray]:
    """Load the bundled 61-channel montage asset."""
    text = resources.files("msvade.data").joinpath(MONTAGE_ASSET).read_text()
    return parse_montage(text)


def parse_montage(text: str) -> tuple[list[str], np.ndarray]:
    """Parse a montage JSON document: a list of {name, x, y, z} objects."""
    entries = json.loads(text)
    if not isinstance(entries, list) or not entries:
        raise ValueError("montage file must be a non-empty JSON array")
    names, coords = [], []
    for e in entries:
        try:
            names.append(str(e["name"]))
            coords.append([float(e["x"]), float(e["y"]), float(e["z"])])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed montage entry: {e!r}") from exc
    coords = np.asarray(coords, dtype=float)
    norms = np.linalg.norm(coords, axis=1)
    bad = np.abs(norms - 1.0) > 1e-6
    if bad.any():
        raise ValueError(
            f"montage positions must be unit-norm; offending channels: "
            f"{[names[i] for i in np.flatnonzero(bad)[:5]]}")
    return names, coords


def load_montage(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        return parse_montage(fh.read())


def montage_to_json(names: list[str], coords: np.ndarray) -> str:
    entries = [{"name": n, "x": float(x), "y": float(y), "z": float(z)}
               for n, (x, y, z) in zip(names, coords)]
    return json.dumps(entries, indent=1)

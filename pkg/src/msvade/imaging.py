"""Binary PPM/PGM image emission with a symmetric red-blue diverging
colormap for scalp topographies and grayscale heatmaps."""

from __future__ import annotations

import numpy as np

# blue -> near-white -> red, symmetric around 0
_ANCHORS = np.array([
    [33.0, 102.0, 172.0],    # t = -1
    [247.0, 247.0, 247.0],   # t =  0
    [178.0, 24.0, 43.0],     # t = +1
])


def colormap_diverging(t: np.ndarray) -> np.ndarray:
    """Map values in [-1, 1] to RGB uint8 via piecewise-linear anchors."""
    t = np.clip(np.asarray(t, dtype=float), -1.0, 1.0)
    out = np.empty(t.shape + (3,))
    neg = t < 0
    for c in range(3):
        lo, mid, hi = _ANCHORS[0, c], _ANCHORS[1, c], _ANCHORS[2, c]
        out[..., c] = np.where(neg, mid + (-t) * (lo - mid), mid + t * (hi - mid))
    return np.rint(out).astype(np.uint8)


def diverging_rgb(values: np.ndarray, mask: np.ndarray | None = None,
                  vmax: float | None = None) -> np.ndarray:
    """Render a 2-D map with the diverging colormap centred at zero;
    out-of-mask pixels are white."""
    values = np.asarray(values, dtype=float)
    if vmax is None:
        inside = values[mask] if mask is not None else values
        vmax = float(np.max(np.abs(inside))) if inside.size else 0.0
    t = values / vmax if vmax > 0 else np.zeros_like(values)
    rgb = colormap_diverging(t)
    if mask is not None:
        rgb[~mask] = 255
    return rgb


def grayscale(values: np.ndarray, vmin: float | None = None,
              vmax: float | None = None) -> np.ndarray:
    """Linear 0..255 grayscale mapping for heatmaps."""
    values = np.asarray(values, dtype=float)
    vmin = float(np.nanmin(values)) if vmin is None else vmin
    vmax = float(np.nanmax(values)) if vmax is None else vmax
    if vmax <= vmin:
        return np.full(values.shape, 128, dtype=np.uint8)
    scaled = (values - vmin) / (vmax - vmin)
    return np.rint(np.clip(scaled, 0, 1) * 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) uint8 array")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary P5 PGM."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError("expected an (H, W) uint8 array")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def _read_pnm_header(fh, magic: bytes) -> tuple[int, int]:
    if fh.readline().strip() != magic:
        raise ValueError(f"not a {magic.decode()} file")
    dims = []
    while len(dims) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.split(b"#")[0]
        dims.extend(int(tok) for tok in line.split())
    w, h, maxval = dims[:3]
    if maxval != 255:
        raise ValueError("only 8-bit images supported")
    return w, h


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P6")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P5")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).copy()


def render_topomap_image(image: np.ndarray, path,
                         mask: np.ndarray | None = None,
                         vmax: float | None = None) -> None:
    """Write a scalp map as a binary PPM: diverging colors inside the head
    circle, white outside."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        image = image[0]
    if mask is None:
        from .topomap import head_mask
        mask = head_mask(image.shape[0])
    write_ppm(path, diverging_rgb(image, mask, vmax))


def render_heatmap_image(matrix: np.ndarray, path, scale: int = 16) -> None:
    """Write a matrix as a nearest-neighbour upscaled grayscale PGM."""
    gray = grayscale(matrix)
    big = np.kron(gray, np.ones((scale, scale), dtype=np.uint8))
    write_pgm(path, big)

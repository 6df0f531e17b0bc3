"""Attention-map overlays written as binary PPM.

The map is min-max normalized, upsampled to the image (nearest or
bilinear), pushed through a fixed 256-entry jet table and alpha-blended onto
the base image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, SchemaError
from .geometry import PatchGrid
from .synthgui import GroundingRecord, SynthScreen

NEAREST, BILINEAR = "nearest", "bilinear"

# piecewise-linear jet: (x, value) knots per channel
_JET_KNOTS = {
    "r": ((0.0, 0.0), (0.35, 0.0), (0.66, 1.0), (0.89, 1.0), (1.0, 0.5)),
    "g": ((0.0, 0.0), (0.125, 0.0), (0.375, 1.0), (0.64, 1.0), (0.91, 0.0), (1.0, 0.0)),
    "b": ((0.0, 0.5), (0.11, 1.0), (0.34, 1.0), (0.65, 0.0), (1.0, 0.0)),
}


def jet_table_float() -> np.ndarray:
    """(256, 3) jet colors in [0, 1]."""
    x = np.linspace(0.0, 1.0, 256)
    chans = []
    for c in "rgb":
        xs, ys = zip(*_JET_KNOTS[c])
        chans.append(np.interp(x, xs, ys))
    return np.stack(chans, axis=1)


JET = np.floor(jet_table_float() * 255 + 0.5).astype(np.uint8)


@dataclass(frozen=True)
class OverlayConfig:
    alpha: float = 0.3
    resample: str = NEAREST

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise InvalidArgument("alpha must lie in [0, 1]")
        if self.resample not in (NEAREST, BILINEAR):
            raise InvalidArgument(f"unknown resample mode {self.resample!r}")


def normalize_map(weights: np.ndarray, grid: PatchGrid | None = None) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    out = np.zeros_like(w) if hi == lo else (w - lo) / (hi - lo)
    return out.reshape(grid.shape) if grid is not None else out


def upsample(grid_values: np.ndarray, grid: PatchGrid, mode: str = NEAREST) -> np.ndarray:
    """Patch-resolution (rows, cols) array to image resolution (H, W).

    Bilinear samples pixel ``x`` at patch coordinate ``x / patch_px - 0.5``,
    so a pixel sitting on a patch center reads that patch's value exactly.
    """
    W, H, p = grid.image_w_px, grid.image_h_px, grid.patch_px
    if mode == NEAREST:
        rows = np.minimum(np.arange(H) // p, grid.rows - 1)
        cols = np.minimum(np.arange(W) // p, grid.cols - 1)
        return grid_values[np.ix_(rows, cols)]
    if mode != BILINEAR:
        raise InvalidArgument(f"unknown resample mode {mode!r}")
    u = np.clip(np.arange(W) / p - 0.5, 0, grid.cols - 1)
    v = np.clip(np.arange(H) / p - 0.5, 0, grid.rows - 1)
    c0 = np.minimum(np.floor(u).astype(int), grid.cols - 1)
    r0 = np.minimum(np.floor(v).astype(int), grid.rows - 1)
    c1 = np.minimum(c0 + 1, grid.cols - 1)
    r1 = np.minimum(r0 + 1, grid.rows - 1)
    fu = (u - c0)[None, :]
    fv = (v - r0)[:, None]
    g = grid_values
    top = g[np.ix_(r0, c0)] * (1 - fu) + g[np.ix_(r0, c1)] * fu
    bot = g[np.ix_(r1, c0)] * (1 - fu) + g[np.ix_(r1, c1)] * fu
    return top * (1 - fv) + bot * fv


def colorize(unit: np.ndarray) -> np.ndarray:
    idx = np.floor(np.clip(unit, 0, 1) * 255 + 0.5).astype(np.int64)
    return JET[idx]


def blend(base: np.ndarray, overlay: np.ndarray, alpha: float) -> np.ndarray:
    out = (1 - alpha) * base.astype(np.float64) + alpha * overlay.astype(np.float64)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def render_overlay(base_image: np.ndarray, weights: np.ndarray, grid: PatchGrid, cfg: OverlayConfig | None = None) -> np.ndarray:
    cfg = cfg or OverlayConfig()
    if base_image.shape != (grid.image_h_px, grid.image_w_px, 3):
        raise InvalidArgument(
            f"base image is {base_image.shape}, grid expects {(grid.image_h_px, grid.image_w_px, 3)}"
        )
    unit = upsample(normalize_map(weights, grid), grid, cfg.resample)
    return blend(base_image, colorize(unit), cfg.alpha)


# flat colors for synthetic screens
BACKGROUND_RGB = (236, 236, 236)
_PALETTE = np.array(
    [
        (66, 133, 244),
        (219, 68, 55),
        (244, 180, 0),
        (15, 157, 88),
        (171, 71, 188),
        (0, 172, 193),
        (255, 112, 67),
        (158, 157, 36),
    ],
    dtype=np.uint8,
)


def render_screen(screen: SynthScreen) -> np.ndarray:
    """Flat-colored rectangles on a light background, (H, W, 3) uint8."""
    g = screen.grid
    img = np.empty((g.image_h_px, g.image_w_px, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    for el in screen.elements:
        b = el.bbox
        x0, x1 = round(b.left * g.image_w_px), max(round(b.right * g.image_w_px), round(b.left * g.image_w_px) + 1)
        y0, y1 = round(b.top * g.image_h_px), max(round(b.bottom * g.image_h_px), round(b.top * g.image_h_px) + 1)
        img[y0:y1, x0:x1] = _PALETTE[el.cls % len(_PALETTE)]
    return img


def base_image_for(record: GroundingRecord) -> np.ndarray:
    if record.screen is not None:
        return render_screen(record.screen)
    if record.image_path is not None and record.image_path.endswith(".ppm"):
        return read_ppm(record.image_path)
    raise InvalidArgument("record has no renderable screen and no PPM image")


def encode_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise InvalidArgument("PPM export needs an (H, W, 3) uint8 array")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def decode_ppm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise SchemaError("only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise SchemaError("truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def overlay_filename(record_id) -> str:
    return f"{record_id}.overlay.ppm"


def draw_bbox_outline(image: np.ndarray, record: GroundingRecord, rgb=(255, 0, 0)) -> np.ndarray:
    """Return a copy with the ground-truth box outlined one pixel wide."""
    out = image.copy()
    w, h = record.image_dims
    b = record.gt_bbox
    x0, x1 = int(math.floor(b.left * w)), min(int(math.ceil(b.right * w)), w) - 1
    y0, y1 = int(math.floor(b.top * h)), min(int(math.ceil(b.bottom * h)), h) - 1
    out[y0, x0 : x1 + 1] = rgb
    out[y1, x0 : x1 + 1] = rgb
    out[y0 : y1 + 1, x0] = rgb
    out[y0 : y1 + 1, x1] = rgb
    return out

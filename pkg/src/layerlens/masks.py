"""Percentile reveal masks, composites, heatmap overlays, and grid renders.

Masking follows the game's reveal ladder: a cluster map is upscaled to the
image, thresholded at the nearest-rank percentile, and softened with a
Gaussian blur so players see a feathered window onto the image. Hidden
regions blend toward neutral gray rather than black so dark image content
stays distinguishable from the mask. All renders are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, PngImagePlugin

from layerlens.errors import EmptySaliencyError, ValidationError
from layerlens.explain import INVExplanation
from layerlens.saliency import ClusterMap, minmax

DEFAULT_LADDER = (92, 86, 80, 74, 68, 62)
BACKGROUND_GRAY = 0.5
BLUR_SIGMA_AT_224 = 8.0
CAPTION_MAX_CHARS = 24

# 5-stop heat ramp, low to high: blue, cyan, green, yellow, red
COLOR_STOPS = np.array(
    [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ]
)


@dataclass
class MaskLevel:
    percentile: float
    mask: np.ndarray  # bool (H, W)
    alpha: np.ndarray  # float (H, W) in [0, 1]
    visible_fraction: float


@dataclass
class MaskedImageSeries:
    image: str
    cluster_map: str
    levels: list[MaskLevel]
    composites: list[np.ndarray]  # (H, W, 3) per level
    background: float = BACKGROUND_GRAY


def bilinear_upscale(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a 2-D map to (out_h, out_w) with corner-aligned bilinear."""
    h, w = grid.shape
    if (h, w) == (out_h, out_w):
        return grid.astype(np.float64)
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def gaussian_blur(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders."""
    if sigma <= 0:
        return grid.astype(np.float64)
    radius = max(1, int(math.ceil(3.0 * sigma)))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()

    def convolve_rows(data):
        padded = np.pad(data, ((radius, radius), (0, 0)), mode="reflect")
        out = np.zeros_like(data, dtype=np.float64)
        for k, off in enumerate(offsets):
            out += kernel[k] * padded[radius + off : radius + off + data.shape[0], :]
        return out

    return convolve_rows(convolve_rows(grid.astype(np.float64)).T).T


def nearest_rank(values: np.ndarray, p: float) -> float:
    """The ceil(p*N/100)-th smallest value."""
    flat = np.sort(values, axis=None)
    k = int(math.ceil(p * flat.size / 100.0))
    k = min(max(k, 1), flat.size)
    return float(flat[k - 1])


def make_mask(cmap: ClusterMap, image_size: tuple[int, int], p: float) -> MaskLevel:
    """Binary reveal mask at a percentile, plus its blurred alpha.

    The map is ReLU'd and upscaled; pixels strictly above the nearest-rank
    percentile are visible. Raises EmptySaliencyError when nothing remains
    visible (all-zero map, or all values tied at the threshold).
    """
    if not 0 < p < 100:
        raise ValidationError(f"percentile must lie in (0, 100), got {p}")
    h, w = image_size
    sal = np.maximum(cmap.map, 0.0)
    if not np.any(sal > 0):
        raise EmptySaliencyError(f"cluster map {cmap.id!r}: empty saliency")
    up = bilinear_upscale(sal, h, w)
    threshold = nearest_rank(up, p)
    mask = up > threshold
    sigma = BLUR_SIGMA_AT_224 * min(h, w) / 224.0
    alpha = np.clip(gaussian_blur(mask.astype(np.float64), sigma), 0.0, 1.0)
    if not mask.any() or not np.any(alpha > 1e-9):
        raise EmptySaliencyError(f"cluster map {cmap.id!r}: empty saliency")
    return MaskLevel(
        percentile=float(p),
        mask=mask,
        alpha=alpha,
        visible_fraction=float(mask.mean()),
    )


def masked_series(
    image: np.ndarray,
    cmap: ClusterMap,
    ladder: tuple[float, ...] = DEFAULT_LADDER,
    image_ref: str = "",
    background: float = BACKGROUND_GRAY,
) -> MaskedImageSeries:
    """The six reveal levels of one cluster map over one image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError("expected an (H, W, 3) image")
    if len(ladder) != 6:
        raise ValidationError(f"reveal ladder must have 6 levels, got {len(ladder)}")
    if any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValidationError("reveal ladder percentiles must strictly decrease")
    h, w = image.shape[:2]
    levels, composites = [], []
    for p in ladder:
        level = make_mask(cmap, (h, w), p)
        a = level.alpha[:, :, None]
        composites.append(image * a + background * (1.0 - a))
        levels.append(level)
    return MaskedImageSeries(
        image=image_ref,
        cluster_map=cmap.id,
        levels=levels,
        composites=composites,
        background=background,
    )


def apply_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values through the 5-stop heat ramp to (H, W, 3)."""
    v = np.clip(values, 0.0, 1.0)
    pos = v * (len(COLOR_STOPS) - 1)
    idx = np.minimum(pos.astype(int), len(COLOR_STOPS) - 2)
    frac = (pos - idx)[..., None]
    return COLOR_STOPS[idx] * (1 - frac) + COLOR_STOPS[idx + 1] * frac


def render_overlay(image: np.ndarray, cmap: ClusterMap) -> np.ndarray:
    """Heatmap overlay: ReLU, min-max, upscale, color map, 50 % blend."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    sal = minmax(np.maximum(cmap.map, 0.0))
    heat = apply_colormap(bilinear_upscale(sal, h, w))
    return 0.5 * image + 0.5 * heat


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray, config_hash: str = "") -> Path:
    """Write an (H, W, 3) float image as 8-bit RGB PNG (deterministic bytes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = PngImagePlugin.PngInfo()
    if config_hash:
        info.add_text("config_hash", config_hash)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", pnginfo=info)
    return path


def load_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing image: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def save_pbm(path: str | Path, mask: np.ndarray) -> Path:
    """Write a boolean mask as a 1-bit portable bitmap."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path, format="PPM")
    return path


# ---------------------------------------------------------------------------
# INV grid render
# ---------------------------------------------------------------------------


def _truncate(text: str, limit: int = CAPTION_MAX_CHARS) -> str:
    return text if len(text) <= limit else text[: limit - 1] + "…"


def weight_caption(weight: float) -> str:
    return f"{weight * 100:.1f}%"


def label_caption(label: str, score: float) -> str:
    return _truncate(f"{label} {score:.2f}")


def render_inv(
    inv: INVExplanation,
    image: np.ndarray,
    resolve_map,
    cell_size: int = 112,
) -> Image.Image:
    """Compose the layer-wise grid: one column per layer, cells by weight.

    ``resolve_map`` maps a map ref to its ClusterMap. Each cell shows the
    heatmap overlay, the cluster weight as a percentage, and up to three
    labels with scores.
    """
    if not inv.layers or all(not le.entries for le in inv.layers):
        raise ValidationError("cannot render an empty explanation")
    pad, caption_h, header_h = 6, 58, 22
    n_cols = len(inv.layers)
    n_rows = max(len(le.entries) for le in inv.layers)
    cell_w = cell_size + pad
    cell_h = cell_size + caption_h + pad
    width = pad + n_cols * cell_w
    height = header_h + pad + n_rows * cell_h
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for col, layer_entry in enumerate(inv.layers):
        x0 = pad + col * cell_w
        draw.text((x0, 4), _truncate(layer_entry.layer), fill=(0, 0, 0))
        for row, entry in enumerate(layer_entry.entries):
            cmap = resolve_map(entry.map_ref)
            overlay = render_overlay(image, cmap)
            tile = Image.fromarray(to_uint8(overlay), mode="RGB").resize(
                (cell_size, cell_size), Image.NEAREST
            )
            y0 = header_h + pad + row * cell_h
            canvas.paste(tile, (x0, y0))
            ty = y0 + cell_size + 2
            draw.text((x0, ty), weight_caption(entry.weight), fill=(0, 0, 0))
            for i, (label, score) in enumerate(entry.labels[:3]):
                draw.text((x0, ty + 12 * (i + 1)), label_caption(label, score), fill=(60, 60, 60))
    return canvas

"""Grid tiling of RGB rasters and the grayscale/Sobel background filter."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

RULE_MODES = ("robust_or", "literal_and")


@dataclass
class TilingConfig:
    """Tiling and background-filter settings.

    ``rule_mode="robust_or"`` (default) calls a pixel background-like when it
    is bright (gray > intensity threshold) or flat (Sobel magnitude below the
    Sobel threshold). ``"literal_and"`` requires bright and Sobel magnitude
    above the threshold, the conjunctive reading of the original rule. A tile
    is background when the background-like fraction exceeds
    ``background_fraction``.
    """

    tile_size: int = 224
    background_intensity_threshold: int = 240
    sobel_threshold: float = 15
    background_fraction: float = 0.5
    rule_mode: str = "robust_or"

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not 0 <= self.background_intensity_threshold <= 255:
            raise ValueError("intensity threshold must be within the 8-bit range")
        if not 0 <= self.sobel_threshold <= 255 * 4 * np.sqrt(2):
            raise ValueError("sobel threshold out of range for 8-bit input")
        if self.rule_mode not in RULE_MODES:
            raise ValueError(f"rule_mode must be one of {RULE_MODES}")


def as_rgb(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected an H x W x 3 uint8 RGB raster")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("raster must be at least 1 x 1")
    return img


def grid_tiles(image, cfg: TilingConfig = TilingConfig()) -> List[Tuple[int, int, np.ndarray]]:
    """Non-overlapping ``tile_size`` squares in row-major order as ``(row, col, tile)``.

    ``row``/``col`` are the pixel origin. Partial tiles at the right and
    bottom edges are dropped.
    """
    img = as_rgb(image)
    s = cfg.tile_size
    h, w = img.shape[:2]
    if h < s or w < s:
        raise ValueError(f"image {w}x{h} is smaller than one {s}x{s} tile")
    return [(r, c, img[r:r + s, c:c + s]) for r in range(0, h - s + 1, s) for c in range(0, w - s + 1, s)]


def to_grayscale(rgb) -> np.ndarray:
    """Integer Rec.601 luminance, round(0.299 R + 0.587 G + 0.114 B)."""
    x = np.asarray(rgb, dtype=np.float64)
    gray = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    return np.floor(gray + 0.5).astype(np.uint8)


def sobel_magnitude(gray) -> np.ndarray:
    """sqrt(Gx^2 + Gy^2) with the 3x3 Sobel kernels and replicated borders."""
    g = np.asarray(gray, dtype=np.float64)
    gx = ndimage.sobel(g, axis=1, mode="nearest")
    gy = ndimage.sobel(g, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def background_like(tile, cfg: TilingConfig = TilingConfig()) -> np.ndarray:
    gray = to_grayscale(tile)
    sob = sobel_magnitude(gray)
    bright = gray > cfg.background_intensity_threshold
    if cfg.rule_mode == "robust_or":
        return bright | (sob < cfg.sobel_threshold)
    return bright & (sob > cfg.sobel_threshold)


def is_background(tile, cfg: TilingConfig = TilingConfig()) -> bool:
    tile = as_rgb(tile)
    s = cfg.tile_size
    if tile.shape[:2] != (s, s):
        raise ValueError(f"expected a {s}x{s} tile, got {tile.shape[1]}x{tile.shape[0]}")
    return bool(background_like(tile, cfg).mean() > cfg.background_fraction)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_png(path, rgb) -> None:
    from PIL import Image

    Image.fromarray(as_rgb(rgb)).save(path)


def tile_directory(img_dir, out_dir, cfg: TilingConfig = TilingConfig()) -> Dict[str, int]:
    """Tile every PNG in ``img_dir``.

    Tissue tiles go to ``out_dir/<wsi_id>/r<row>_c<col>.png`` where the WSI
    id is the file stem; ``out_dir/tile_index.csv`` lists every grid tile
    with its background flag. Returns the tissue-tile count per WSI.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kept: Dict[str, int] = {}
    with open(out / "tile_index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wsi_id", "row", "col", "background"])
        for path in sorted(Path(img_dir).glob("*.png")):
            wsi = path.stem
            (out / wsi).mkdir(exist_ok=True)
            kept[wsi] = 0
            for r, c, tile in grid_tiles(load_png(path), cfg):
                bg = is_background(tile, cfg)
                w.writerow([wsi, r, c, int(bg)])
                if not bg:
                    save_png(out / wsi / f"r{r}_c{c}.png", tile)
                    kept[wsi] += 1
    return kept


def read_tile_directory(tiles_dir) -> Dict[str, List[np.ndarray]]:
    """Tissue tiles per WSI from a directory written by ``tile_directory``."""
    root = Path(tiles_dir)
    out: Dict[str, List[np.ndarray]] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(sub.glob("*.png"), key=_tile_sort_key)
        if files:
            out[sub.name] = [load_png(f) for f in files]
    return out


def _tile_sort_key(path: Path):
    r, c = path.stem.split("_")
    return int(r[1:]), int(c[1:])

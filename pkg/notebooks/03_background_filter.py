"""
Dropping background tiles
=========================

A pixel looks like background when it is nearly white or nearly flat; a tile
is dropped when more than half of its pixels look like background.
"""
# %%
import numpy as np

from milkit.preprocess import TilingConfig, background_like, is_background, sobel_magnitude, to_grayscale

cfg = TilingConfig()
print(cfg)

# %%
# Three crafted tiles. The checkerboard uses two-pixel cells shifted by one
# pixel, so every pixel sits on an edge.
idx = ((np.arange(224) + 1) // 2) % 2
board = np.where(idx[:, None] ^ idx[None, :], 255, 0).astype(np.uint8)
tiles = {
    "white": np.full((224, 224, 3), 255, np.uint8),
    "gray": np.full((224, 224, 3), 128, np.uint8),
    "checkerboard": np.repeat(board[..., None], 3, axis=2),
}

for name, tile in tiles.items():
    gray = to_grayscale(tile)
    frac = background_like(tile, cfg).mean()
    print(f"{name:13s} min gradient {sobel_magnitude(gray).min():6.1f}  "
          f"background-like {frac:.3f}  -> {'background' if is_background(tile, cfg) else 'tissue'}")

# %%
# The literal conjunctive reading keeps the white tile, which is the reason
# it is not the default.
literal = TilingConfig(rule_mode="literal_and")
print("white under literal_and:", "background" if is_background(tiles["white"], literal) else "tissue")

"""
Contrastive pre-training of a small tile encoder
================================================

Two augmented views of each tile should land closer together than views of
different tiles. The margin between the two similarities grows as the
encoder trains.
"""
# %%
import numpy as np
from PIL import Image

from milkit.contrastive import AugmentConfig, EncoderParams, extract_features, pair_margin, pretrain

rng = np.random.default_rng(0)


def textured_tile(i, size=24):
    base = np.array([200, 80, 90]) if i % 2 else np.array([90, 60, 180])
    low = rng.normal(0, 50, (4, 4, 3)).astype(np.float32)
    pattern = np.stack([np.asarray(Image.fromarray(low[..., c]).resize((size, size), Image.BILINEAR))
                        for c in range(3)], axis=-1)
    return np.clip(base + pattern + rng.normal(0, 5, (size, size, 3)), 0, 255).astype(np.uint8)


tiles = [textured_tile(i) for i in range(64)]
cfg = AugmentConfig(output_size=12)

# %%
enc = EncoderParams.init(12 * 12 * 3, 64, 16, seed=0)
before = pair_margin(tiles, enc, cfg, np.random.default_rng(1))
enc, losses = pretrain(tiles, enc, cfg, epochs=10, batch_size=16, rng=np.random.default_rng(2),
                       learning_rate=3e-4)
after = pair_margin(tiles, enc, cfg, np.random.default_rng(1))
print(f"loss {losses[0]:.3f} -> {losses[-1]:.3f} (ln 31 = {np.log(31):.3f})")
print(f"positive-pair margin {before:.3f} -> {after:.3f}")

# %%
# Encoding every tile of a slide gives its feature bag.
bags = extract_features(enc, {"slide": tiles[:10]}, 12)
print("bag features:", bags[0].features.shape)

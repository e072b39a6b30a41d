"""
Attention pooling on two toy bags
=================================

Each bag holds five one-dimensional tiles plus one padded slot. With fixed
attention weights the pooled mean and Bessel-corrected spread can be checked
by hand.
"""
# %%
import numpy as np

from milkit import TileBag, weighted_mean, weighted_variance

bags = {
    "A": ([1, 1, 1, 3, 3], [0.17, 0.17, 0.17, 0.245, 0.245, 0.0]),
    "B": ([2, 2, 2, 2, 1], [0.22, 0.22, 0.22, 0.22, 0.12, 0.0]),
}

# %%
# The padded slot is zero and carries no weight.
for name, (values, a) in bags.items():
    feats = np.zeros((1, 6))
    feats[0, :5] = values
    bag = TileBag("patient", name, feats, real_tile_count=5)
    mu = weighted_mean(bag, a)
    var = weighted_variance(bag, a, mu)
    print(f"bag {name}: mean {mu[0]:.4f}  sigma {np.sqrt(var[0]):.4f}")

# %%
# Both bags have nearly the same mean, so mean pooling alone barely tells
# them apart. The spread differs by a factor of three.

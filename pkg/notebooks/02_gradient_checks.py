"""
Checking hand-written backward passes
=====================================

Every model in milkit carries its own backward pass. Here each one is
compared against central finite differences on a few random instances.
"""
# %%
import numpy as np

from milkit import MILModel, TileBag
from milkit.baseline import TileClassifierParams, batch_loss_and_grads
from milkit.contrastive import nt_xent_loss
from milkit.core import finite_diff_grad, max_rel_error
from milkit.mil import backward, bag_loss, forward

rng = np.random.default_rng(0)

# %%
# MIL models. The bias of the attention score gets a zero gradient because
# the softmax ignores a common shift, which is why the error uses a floor.
for kind in ("deepmil", "varmil"):
    worst = 0.0
    for seed in range(20):
        model = MILModel.init(4, kind, nu=6, seed=seed)
        bag = TileBag("p", "w", rng.normal(size=(4, 7)))
        label, weights = int(rng.integers(0, 2)), [1.0, 1.7]
        _, trace = forward(bag, model.attention, model.head)
        g = backward(trace, bag, model.attention, model.head, label, weights)
        params = model.params()
        num = finite_diff_grad(lambda: bag_loss(bag, model.attention, model.head, label, weights),
                               [p.value for p in params], 1e-4)
        worst = max(worst, max_rel_error([g[p.name] for p in params], num))
    print(f"{kind:8s} worst relative error {worst:.1e}")

# %%
# The tile classifier behind the majority-vote baseline.
params = TileClassifierParams.init(5, 8, seed=1)
Z, y = rng.normal(size=(5, 12)), rng.integers(0, 2, 12)
_, g = batch_loss_and_grads(Z, y, params, [1.0, 1.0])
num = finite_diff_grad(lambda: batch_loss_and_grads(Z, y, params, [1.0, 1.0])[0],
                       [p.value for p in params.params()], 1e-5)
print(f"tile     worst relative error {max_rel_error([g[p.name] for p in params.params()], num):.1e}")

# %%
# NT-Xent with respect to the projections themselves.
x = rng.normal(size=(8, 3))
_, g = nt_xent_loss(x, 0.5)
(num,) = finite_diff_grad(lambda: nt_xent_loss(x, 0.5)[0], [x], 1e-5)
print(f"nt-xent  worst relative error {max_rel_error([g], [num]):.1e}")

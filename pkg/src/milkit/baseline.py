"""Tile-supervised baseline: every tile inherits its bag's label, a small
classifier is trained per tile, and a bag is scored by the fraction of its
tiles predicted positive.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .config import RunConfig, TrainingLog
from .core import OUTPUTS, PROB_CLAMP, Param, adam_step, balance_weights, he_init, output_backward, sigmoid, spawn_seeds
from .metrics import aggregate_by_patient, roc_auc
from .mil import TileBag

logger = logging.getLogger(__name__)


@dataclass
class TileClassifierParams:
    W1: Param  # nu_t x H
    b1: Param
    W2: Param  # 2 x nu_t
    b2: Param
    output: str = "softmax"

    kind = "tilesup"

    def __post_init__(self):
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output activation {self.output!r}")

    @classmethod
    def init(cls, dim: int, nu: int = 128, seed=0, output: str = "softmax") -> "TileClassifierParams":
        ss = spawn_seeds(seed, 2)
        return cls(Param(he_init(nu, dim, ss[0]), "W1"), Param(np.zeros(nu), "b1"),
                   Param(he_init(2, nu, ss[1]), "W2"), Param(np.zeros(2), "b2"), output)

    @property
    def nu(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    def params(self) -> List[Param]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "TileClassifierParams":
        return TileClassifierParams(*(p.copy() for p in self.params()), output=self.output)


def _forward_batch(Z: np.ndarray, params: TileClassifierParams):
    hidden = np.tanh(params.W1.value @ Z + params.b1.value[:, None])
    logits = params.W2.value @ hidden + params.b2.value[:, None]
    if params.output == "sigmoid":
        return hidden, sigmoid(logits)
    e = np.exp(logits - logits.max(axis=0))
    return hidden, e / e.sum(axis=0)


def tile_forward(z, params: TileClassifierParams) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.dim,):
        raise ValueError(f"expected an {params.dim}-vector, got shape {z.shape}")
    return _forward_batch(z[:, None], params)[1][:, 0]


def tile_probs(bag: TileBag, params: TileClassifierParams) -> np.ndarray:
    """Per-tile probabilities of the real tiles, shape ``(I, 2)``."""
    return _forward_batch(bag.real_features, params)[1].T


def majority_vote(per_tile_probs) -> float:
    """Fraction of tiles whose positive output is strictly larger (ties vote 0)."""
    p = np.asarray(per_tile_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] != 2:
        raise ValueError("expected a nonempty list of 2-vectors")
    return float(np.mean(p[:, 1] > p[:, 0]))


def bag_score(bag: TileBag, params: TileClassifierParams) -> float:
    return majority_vote(tile_probs(bag, params))


def batch_loss_and_grads(Z: np.ndarray, y: np.ndarray, params: TileClassifierParams, class_weights):
    """Mean weighted cross-entropy over the columns of ``Z`` and its gradients."""
    hidden, probs = _forward_batch(Z, params)
    m = Z.shape[1]
    cols = np.arange(m)
    p_y = probs[y, cols]
    w = np.asarray(class_weights, dtype=np.float64)[y]
    clipped = np.clip(p_y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(np.mean(-w * np.log(clipped)))
    live = (p_y >= PROB_CLAMP) & (p_y <= 1.0 - PROB_CLAMP)
    g_probs = np.zeros_like(probs)
    g_probs[y, cols] = np.where(live, -w / np.where(live, p_y, 1.0), 0.0) / m
    g_logits = output_backward(probs, g_probs, params.output)
    g_hidden = params.W2.value.T @ g_logits
    g_pre = g_hidden * (1.0 - hidden**2)
    grads = {
        "W2": g_logits @ hidden.T,
        "b2": g_logits.sum(axis=1),
        "W1": g_pre @ Z.T,
        "b1": g_pre.sum(axis=1),
    }
    return loss, grads


def patient_auc(bags: Sequence[TileBag], labels: Sequence[int], score_fn) -> float:
    scores = [score_fn(b) for b in bags]
    return roc_auc(aggregate_by_patient([b.patient_id for b in bags], scores, labels))


def train_tile_supervised(train_bags: Sequence[TileBag], train_labels: Sequence[int],
                          val_bags: Sequence[TileBag], val_labels: Sequence[int], config: RunConfig):
    """Train the tile classifier; return ``(best_params, TrainingLog)``.

    Tiles from all training bags are pooled and reshuffled every epoch.
    Validation (majority vote, patient-level AUC) runs every
    ``config.eval_every_steps`` optimizer steps and once more after the final
    step; the parameters with the best validation AUC are returned.
    """
    if not train_bags:
        raise ValueError("no training bags")
    dim = train_bags[0].dim
    if any(b.dim != dim for b in list(train_bags) + list(val_bags)):
        raise ValueError("all bags must share one feature dimension")
    init_seed, shuffle_seed = spawn_seeds(config.seed, 2)
    params = TileClassifierParams.init(dim, config.nu, init_seed, config.head_output)
    log = TrainingLog()
    best = params.copy()
    if config.epochs == 0:
        return best, log

    Z = np.concatenate([b.real_features for b in train_bags], axis=1)
    y = np.concatenate([np.full(b.real_tile_count, int(lab)) for b, lab in zip(train_bags, train_labels)])
    class_weights = balance_weights(np.bincount(y, minlength=2))
    hyper = config.adam()
    val_labels = [int(v) for v in val_labels]
    step = 0
    running: List[float] = []

    def evaluate():
        nonlocal best
        auc = patient_auc(val_bags, val_labels, lambda b: bag_score(b, params))
        if log.add(step, float(np.mean(running)), auc):
            best = params.copy()
        logger.debug("tilesup step %d loss %.4f val auc %.4f", step, log.records[-1].train_loss, auc)
        running.clear()

    epoch_seeds = shuffle_seed.spawn(config.epochs)
    for epoch in range(config.epochs):
        order = np.random.default_rng(epoch_seeds[epoch]).permutation(Z.shape[1])
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = batch_loss_and_grads(Z[:, idx], y[idx], params, class_weights)
            for p in params.params():
                p.grad += grads[p.name]
                adam_step(p, hyper)
            step += 1
            running.append(loss)
            if step % config.eval_every_steps == 0:
                evaluate()
    if running:
        evaluate()
    return best, log

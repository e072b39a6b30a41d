"""Attention MIL over padded bags of tile features.

Two pooling variants share one attention network:

* ``deepmil``: the bag is represented by the attention-weighted mean of its
  tile features.
* ``varmil``: the mean is concatenated with the attention-weighted,
  Bessel-corrected per-feature variance.

A bag stores its features as an ``H x I`` matrix (tiles are columns). Padded
columns are zero and masked out; every computation slices to the real tiles,
which makes results bit-identical regardless of how far a bag is padded.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import (
    Param,
    he_init,
    masked_softmax,
    OUTPUTS,
    output_backward,
    output_probs,
    spawn_seeds,
    weighted_cross_entropy,
    weighted_cross_entropy_grad,
)

logger = logging.getLogger(__name__)

MODEL_KINDS = ("deepmil", "varmil")


@dataclass
class TileBag:
    patient_id: str
    wsi_id: str
    features: np.ndarray  # H x padded-I
    real_tile_count: int = -1
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be an H x I matrix")
        if self.real_tile_count < 0:
            self.real_tile_count = self.features.shape[1]
        if self.mask is None:
            self.mask = np.zeros(self.features.shape[1], dtype=bool)
            self.mask[: self.real_tile_count] = True
        self.mask = np.asarray(self.mask, dtype=bool)
        self.validate()

    def validate(self):
        n = self.real_tile_count
        if n < 1:
            raise ValueError(f"bag {self.wsi_id!r} has no tiles")
        if self.mask.shape != (self.features.shape[1],):
            raise ValueError("mask length must equal the padded tile count")
        if self.mask.sum() != n or not self.mask[:n].all():
            raise ValueError("mask must have exactly real_tile_count leading true entries")
        if np.any(self.features[:, n:] != 0):
            raise ValueError("padded columns must be zero")

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    @property
    def padded_size(self) -> int:
        return self.features.shape[1]

    @property
    def real_features(self) -> np.ndarray:
        # contiguous copy so BLAS sees the same layout whatever the padding
        return np.ascontiguousarray(self.features[:, : self.real_tile_count])

    def with_features(self, features: np.ndarray) -> "TileBag":
        return TileBag(self.patient_id, self.wsi_id, features)


def pad_bag(bag: TileBag, target: int) -> TileBag:
    n = bag.real_tile_count
    if target < n:
        raise ValueError(f"cannot pad a {n}-tile bag down to {target}")
    feats = np.zeros((bag.dim, target))
    feats[:, :n] = bag.real_features
    return TileBag(bag.patient_id, bag.wsi_id, feats, real_tile_count=n)


@dataclass
class AttentionParams:
    W1: Param
    b1: Param
    W2: Param
    b2: Param

    @property
    def nu(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, dim: int, nu: int = 128, seed=0) -> "AttentionParams":
        ss = spawn_seeds(seed, 2)
        return cls(
            Param(he_init(nu, dim, ss[0]), "W1"),
            Param(np.zeros(nu), "b1"),
            Param(he_init(1, nu, ss[1]), "W2"),
            Param(np.zeros(1), "b2"),
        )

    def params(self) -> List[Param]:
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass
class HeadParams:
    W: Param
    b: Param
    kind: str = "deepmil"
    output: str = "softmax"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output activation {self.output!r}")
        if self.W.shape[0] != 2 or self.b.shape != (2,):
            raise ValueError("head must produce two logits")

    @classmethod
    def init(cls, dim: int, kind: str = "deepmil", seed=0, output: str = "softmax") -> "HeadParams":
        width = dim if kind == "deepmil" else 2 * dim
        return cls(Param(he_init(2, width, seed), "W"), Param(np.zeros(2), "b"), kind, output)

    def params(self) -> List[Param]:
        return [self.W, self.b]


@dataclass
class ForwardTrace:
    n: int
    pre_tanh: np.ndarray  # nu x n
    hidden: np.ndarray  # nu x n, tanh(pre_tanh)
    scores: np.ndarray  # n attention logits
    attention: np.ndarray  # padded length
    mean: np.ndarray  # H
    variance: Optional[np.ndarray]  # H, varmil only
    representation: np.ndarray  # H or 2H
    logits: np.ndarray  # 2
    probs: np.ndarray  # 2


def _check_shapes(bag: TileBag, att: AttentionParams, head: Optional[HeadParams] = None):
    if att.dim != bag.dim:
        raise ValueError(f"attention expects H={att.dim}, bag has H={bag.dim}")
    if head is not None:
        width = bag.dim if head.kind == "deepmil" else 2 * bag.dim
        if head.W.shape[1] != width:
            raise ValueError(f"{head.kind} head expects {width} inputs, got {head.W.shape[1]}")


def _attention_parts(Z: np.ndarray, att: AttentionParams):
    pre = att.W1.value @ Z + att.b1.value[:, None]
    hidden = np.tanh(pre)
    scores = (att.W2.value @ hidden)[0] + att.b2.value[0]
    return pre, hidden, scores


def attention_weights(bag: TileBag, params: AttentionParams) -> np.ndarray:
    _check_shapes(bag, params)
    n = bag.real_tile_count
    _, _, scores = _attention_parts(bag.real_features, params)
    a = np.zeros(bag.padded_size)
    a[:n] = masked_softmax(scores, np.ones(n, dtype=bool))
    return a


def weighted_mean(bag: TileBag, a) -> np.ndarray:
    n = bag.real_tile_count
    return bag.real_features @ np.asarray(a, dtype=np.float64)[:n]


def weighted_variance(bag: TileBag, a, mean) -> np.ndarray:
    """Bessel-corrected attention-weighted variance over the real tiles.

    A single-tile bag has no spread; its variance is returned as zeros.
    """
    n = bag.real_tile_count
    if n == 1:
        warnings.warn("weighted variance of a single-tile bag is defined as zero", RuntimeWarning)
        return np.zeros(bag.dim)
    dev = bag.real_features - np.asarray(mean, dtype=np.float64)[:, None]
    return (n / (n - 1)) * ((dev * dev) @ np.asarray(a, dtype=np.float64)[:n])


def forward(bag: TileBag, att: AttentionParams, head: HeadParams):
    _check_shapes(bag, att, head)
    n, H = bag.real_tile_count, bag.dim
    pre, hidden, scores = _attention_parts(bag.real_features, att)
    a = np.zeros(bag.padded_size)
    a[:n] = masked_softmax(scores, np.ones(n, dtype=bool))
    mean = weighted_mean(bag, a)
    variance = None
    if head.kind == "varmil":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            variance = weighted_variance(bag, a, mean)
        rep = np.concatenate([mean, variance])
        # two blocks so a zero variance block leaves the mean logits bit-exact
        logits = (head.W.value[:, :H] @ mean + head.W.value[:, H:] @ variance) + head.b.value
    else:
        rep = mean
        logits = head.W.value @ mean + head.b.value
    probs = output_probs(logits, head.output)
    return probs, ForwardTrace(n, pre, hidden, scores, a, mean, variance, rep, logits, probs)


def backward(trace: ForwardTrace, bag: TileBag, att: AttentionParams, head: HeadParams,
             label: int, class_weights) -> Dict[str, np.ndarray]:
    """Gradients of the weighted cross-entropy w.r.t. all attention and head weights."""
    n = trace.n
    Z = bag.real_features
    H = bag.dim
    a = trace.attention[:n]

    g_probs = weighted_cross_entropy_grad(trace.probs, label, class_weights)
    g_logits = output_backward(trace.probs, g_probs, head.output)
    grads = {"W": np.outer(g_logits, trace.representation), "b": g_logits}
    g_rep = head.W.value.T @ g_logits

    g_mean = g_rep[:H].copy()
    g_a = Z.T @ g_mean
    if head.kind == "varmil" and n > 1:
        g_var = g_rep[H:]
        c = n / (n - 1)
        dev = Z - trace.mean[:, None]
        # the variance depends on a directly and through the mean
        g_a += c * ((dev * dev).T @ g_var)
        g_mean_from_var = -2.0 * c * g_var * (dev @ a)
        g_a += Z.T @ g_mean_from_var

    g_scores = a * (g_a - a @ g_a)
    grads["W2"] = (trace.hidden @ g_scores)[None, :]
    grads["b2"] = np.array([g_scores.sum()])
    g_hidden = att.W2.value[0][:, None] * g_scores[None, :]
    g_pre = g_hidden * (1.0 - trace.hidden**2)
    grads["W1"] = g_pre @ Z.T
    grads["b1"] = g_pre.sum(axis=1)
    return grads


def bag_loss(bag: TileBag, att: AttentionParams, head: HeadParams, label: int, class_weights) -> float:
    probs, _ = forward(bag, att, head)
    return weighted_cross_entropy(probs, label, class_weights)


def predict_score(bag: TileBag, att: AttentionParams, head: HeadParams) -> float:
    """Positive-class score: the second output probability."""
    probs, _ = forward(bag, att, head)
    return float(probs[1])


@dataclass
class MILModel:
    """Attention network plus classification head, trained as one unit."""

    attention: AttentionParams
    head: HeadParams
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.head.kind

    @classmethod
    def init(cls, dim: int, kind: str = "varmil", nu: int = 128, seed=0, output: str = "softmax") -> "MILModel":
        ss = spawn_seeds(seed, 2)
        return cls(AttentionParams.init(dim, nu, ss[0]), HeadParams.init(dim, kind, ss[1], output))

    def params(self) -> List[Param]:
        return self.attention.params() + self.head.params()

    def named_params(self) -> Dict[str, Param]:
        return {p.name: p for p in self.params()}

    def forward(self, bag: TileBag):
        return forward(bag, self.attention, self.head)

    def score(self, bag: TileBag) -> float:
        return predict_score(bag, self.attention, self.head)

    def accumulate_grads(self, bags, labels, class_weights) -> float:
        """Add mean-over-batch gradients into each ``Param.grad``; return mean loss."""
        named = self.named_params()
        total = 0.0
        m = len(bags)
        for bag, y in zip(bags, labels):
            probs, trace = forward(bag, self.attention, self.head)
            total += weighted_cross_entropy(probs, int(y), class_weights)
            for k, g in backward(trace, bag, self.attention, self.head, int(y), class_weights).items():
                named[k].grad += g / m
        return total / m

    def copy(self) -> "MILModel":
        att = AttentionParams(*(p.copy() for p in self.attention.params()))
        head = HeadParams(self.head.W.copy(), self.head.b.copy(), self.head.kind, self.head.output)
        return MILModel(att, head, dict(self.meta))

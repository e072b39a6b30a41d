"""Numeric substrate: masked softmax, weighted cross-entropy, Adam, He init
and a central finite-difference gradient oracle.

Matrices are plain ``numpy.float64`` arrays. Gradients are derived by hand
for every model; there is no autodiff graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_CLAMP = 1e-12


class EmptyBagError(ValueError):
    pass


def masked_softmax(logits, mask) -> np.ndarray:
    """Softmax over the entries where ``mask`` is true; masked entries are 0."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ValueError(f"logits {logits.shape} and mask {mask.shape} differ in shape")
    if not mask.any():
        raise EmptyBagError("empty bag")
    out = np.zeros_like(logits)
    live = logits[mask]
    e = np.exp(live - live.max())
    out[mask] = e / e.sum()
    return out


def weighted_cross_entropy(probs, label: int, class_weights) -> float:
    p = min(max(float(probs[label]), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -float(class_weights[label]) * np.log(p)


def weighted_cross_entropy_grad(probs, label: int, class_weights) -> np.ndarray:
    """d loss / d probs. Zero on the clamped side of the guard."""
    g = np.zeros(2)
    p = float(probs[label])
    if PROB_CLAMP <= p <= 1.0 - PROB_CLAMP:
        g[label] = -float(class_weights[label]) / p
    return g


def balance_weights(label_counts) -> np.ndarray:
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.shape != (2,) or np.any(counts <= 0):
        raise ValueError("degenerate class distribution")
    return counts.sum() / (2.0 * counts)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


OUTPUTS = ("softmax", "sigmoid")


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def output_probs(logits, output: str = "softmax") -> np.ndarray:
    """Class probabilities from a logit vector.

    ``softmax`` normalizes across classes; ``sigmoid`` squashes each logit
    independently, so the outputs need not sum to 1.
    """
    if output == "softmax":
        return softmax(logits)
    if output == "sigmoid":
        return sigmoid(logits)
    raise ValueError(f"output must be one of {OUTPUTS}")


def output_backward(probs, g_probs, output: str = "softmax") -> np.ndarray:
    """Chain ``d loss / d probs`` back to the logits (columns are samples if 2-D)."""
    if output == "softmax":
        return probs * (g_probs - np.sum(probs * g_probs, axis=0))
    return g_probs * probs * (1.0 - probs)


@dataclass
class AdamHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass
class Param:
    """A trainable matrix together with its gradient and Adam moments."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def copy(self) -> "Param":
        p = Param(self.value.copy(), self.name)
        p.grad = self.grad.copy()
        p.adam_m = self.adam_m.copy()
        p.adam_v = self.adam_v.copy()
        p.step_count = self.step_count
        return p


def adam_step(param: Param, hyper: AdamHyper) -> Param:
    """One Adam update with decoupled weight decay, in place.

    The decay shrinks the value before the moment update is applied; the
    gradient is zeroed afterwards.
    """
    g = param.grad
    if g.shape != param.value.shape:
        raise ValueError(f"gradient shape {g.shape} != value shape {param.value.shape} for {param.name!r}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient in parameter {param.name!r}")
    param.step_count += 1
    t = param.step_count
    lr = hyper.learning_rate
    if hyper.weight_decay:
        param.value *= 1.0 - lr * hyper.weight_decay
    param.adam_m = hyper.beta1 * param.adam_m + (1.0 - hyper.beta1) * g
    param.adam_v = hyper.beta2 * param.adam_v + (1.0 - hyper.beta2) * g * g
    m_hat = param.adam_m / (1.0 - hyper.beta1**t)
    v_hat = param.adam_v / (1.0 - hyper.beta2**t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    param.grad = np.zeros_like(param.value)
    return param


def spawn_seeds(seed, n: int):
    """``n`` independent child seeds from an int or a ``SeedSequence``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)


def he_init(rows: int, cols: int, rng_seed) -> np.ndarray:
    """Normal(0, 2/fan_in) with fan_in = cols."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    rng = np.random.default_rng(rng_seed)
    return rng.normal(0.0, np.sqrt(2.0 / cols), size=(rows, cols))


def finite_diff_grad(loss_fn: Callable[[], float], params: Sequence[np.ndarray], eps: float = 1e-6):
    """Central-difference gradient of ``loss_fn()`` w.r.t. every entry of ``params``.

    ``params`` are perturbed in place (and restored), so ``loss_fn`` must read
    them by reference.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    grads = []
    for arr in params:
        g = np.zeros(arr.shape, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_fn()
            arr[idx] = orig - eps
            down = loss_fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor) over a list of arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst

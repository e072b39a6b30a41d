"""Contrastive pre-training of a small tile encoder with the NT-Xent loss.

The encoder maps a flattened RGB tile to an ``H``-dimensional feature vector
through one ReLU hidden layer. A two-layer projection head sits on top of it
during pre-training only; feature extraction uses the encoder output.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import AdamHyper, Param, adam_step, he_init, spawn_seeds
from .mil import TileBag
from .preprocess import to_grayscale

logger = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    """Random view generation.

    Crops are square with an area fraction drawn from ``crop_scale_range``
    and resized (bilinear) to ``output_size``. Color jitter, applied with
    probability ``jitter_probability``, multiplies brightness, contrast and
    saturation by factors drawn uniformly from ``1 +- strength`` for the
    corresponding entry of ``jitter_strength``; a strength of 0 disables that
    component.
    """

    crop_scale_range: Tuple[float, float] = (0.5, 1.0)
    flip_probability: float = 0.5
    jitter_strength: Tuple[float, float, float] = (0.4, 0.4, 0.4)
    jitter_probability: float = 0.8
    grayscale_probability: float = 0.2
    output_size: int = 16

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale_range must satisfy 0 < min <= max <= 1")
        for p in (self.flip_probability, self.jitter_probability, self.grayscale_probability):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        if any(s < 0 or s >= 1 for s in self.jitter_strength):
            raise ValueError("jitter strengths must lie in [0, 1)")
        if self.output_size < 1:
            raise ValueError("output_size must be >= 1")

    @classmethod
    def identity(cls, output_size: int) -> "AugmentConfig":
        return cls((1.0, 1.0), 0.0, (0.0, 0.0, 0.0), 0.0, 0.0, output_size)


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    from PIL import Image

    return np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))


def _jitter(img: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    x = img.astype(np.float64)
    b, c, s = cfg.jitter_strength
    if b:
        x = x * rng.uniform(1 - b, 1 + b)
    if c:
        m = (0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]).mean()
        x = (x - m) * rng.uniform(1 - c, 1 + c) + m
    if s:
        gray = (0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2])[..., None]
        x = gray + (x - gray) * rng.uniform(1 - s, 1 + s)
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def augment(tile, cfg: AugmentConfig, rng) -> np.ndarray:
    img = np.asarray(tile)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected an H x W x 3 uint8 tile")
    short = min(img.shape[:2])
    if int(np.floor(np.sqrt(cfg.crop_scale_range[0]) * short)) < cfg.output_size:
        raise ValueError(f"tile of side {short} is too small for the minimum crop at output size {cfg.output_size}")
    side = int(np.floor(np.sqrt(rng.uniform(*cfg.crop_scale_range)) * short))
    side = max(side, cfg.output_size)
    r = int(rng.integers(0, img.shape[0] - side + 1))
    c = int(rng.integers(0, img.shape[1] - side + 1))
    view = _resize(np.ascontiguousarray(img[r:r + side, c:c + side]), cfg.output_size)
    if rng.random() < cfg.flip_probability:
        view = view[:, ::-1]
    if any(cfg.jitter_strength) and rng.random() < cfg.jitter_probability:
        view = _jitter(view, cfg, rng)
    if rng.random() < cfg.grayscale_probability:
        view = np.repeat(to_grayscale(view)[..., None], 3, axis=2)
    return np.ascontiguousarray(view)


def augment_pair(tile, cfg: AugmentConfig, rng) -> Tuple[np.ndarray, np.ndarray]:
    return augment(tile, cfg, rng), augment(tile, cfg, rng)


def _pixels(view: np.ndarray) -> np.ndarray:
    # centered to [-1, 1]; all-positive inputs make a fresh ReLU encoder
    # map every tile to nearly the same direction
    return view.reshape(-1) / 127.5 - 1.0


def tile_to_input(tile, size: int) -> np.ndarray:
    """Whole tile resized to ``size`` and flattened to floats in [-1, 1]."""
    return _pixels(_resize(np.asarray(tile, dtype=np.uint8), size))


# ---------------------------------------------------------------------------
# NT-Xent


def nt_xent_loss(projections, tau: float = 0.5):
    """NT-Xent over ``2N`` projections; rows ``i`` and ``i + N`` are a positive pair.

    Returns ``(loss, grad)`` with ``grad`` the gradient w.r.t. ``projections``.
    """
    x = np.asarray(projections, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] % 2 or x.shape[0] < 4:
        raise ValueError("need 2N projection rows with N >= 2")
    if tau <= 0:
        raise ValueError("tau must be positive")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero projection vector: cosine similarity undefined")
    m = x.shape[0]
    n = m // 2
    u = x / norms[:, None]
    logits = (u @ u.T) / tau
    np.fill_diagonal(logits, -np.inf)
    pos = (np.arange(m) + n) % m
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    lse = mx[:, 0] + np.log(e.sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(m), pos]))

    q = e / e.sum(axis=1, keepdims=True)
    q[np.arange(m), pos] -= 1.0
    q /= m
    g_u = (q + q.T) @ u / tau
    g_x = (g_u - u * np.sum(u * g_u, axis=1, keepdims=True)) / norms[:, None]
    return loss, g_x


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderParams:
    W1: Param  # hidden x D
    b1: Param
    W2: Param  # H x hidden
    b2: Param
    P1: Param  # proj_hidden x H
    c1: Param
    P2: Param  # P x proj_hidden
    c2: Param

    @classmethod
    def init(cls, input_dim: int, hidden: int = 64, dim: int = 16, proj_hidden: int = 32,
             proj_dim: int = 16, seed=0) -> "EncoderParams":
        ss = spawn_seeds(seed, 4)
        return cls(
            Param(he_init(hidden, input_dim, ss[0]), "W1"), Param(np.zeros(hidden), "b1"),
            Param(he_init(dim, hidden, ss[1]), "W2"), Param(np.zeros(dim), "b2"),
            Param(he_init(proj_hidden, dim, ss[2]), "P1"), Param(np.zeros(proj_hidden), "c1"),
            Param(he_init(proj_dim, proj_hidden, ss[3]), "P2"), Param(np.zeros(proj_dim), "c2"),
        )

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W2.shape[0]

    def params(self) -> List[Param]:
        return [self.W1, self.b1, self.W2, self.b2, self.P1, self.c1, self.P2, self.c2]

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(p.copy() for p in self.params()))


def encode(X, enc: EncoderParams) -> np.ndarray:
    """Features for a batch of flattened inputs, shape ``(B, H)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    h = np.maximum(X @ enc.W1.value.T + enc.b1.value, 0.0)
    return h @ enc.W2.value.T + enc.b2.value


def _forward_full(X, enc: EncoderParams):
    a1 = X @ enc.W1.value.T + enc.b1.value
    h = np.maximum(a1, 0.0)
    z = h @ enc.W2.value.T + enc.b2.value
    a2 = z @ enc.P1.value.T + enc.c1.value
    q = np.maximum(a2, 0.0)
    proj = q @ enc.P2.value.T + enc.c2.value
    return a1, h, z, a2, q, proj


def project(X, enc: EncoderParams) -> np.ndarray:
    return _forward_full(np.atleast_2d(np.asarray(X, dtype=np.float64)), enc)[-1]


def contrastive_loss_and_grads(X, enc: EncoderParams, tau: float = 0.5):
    """NT-Xent of the projections of ``X`` (pairs ``i``, ``i+N``) and parameter gradients."""
    X = np.asarray(X, dtype=np.float64)
    a1, h, z, a2, q, proj = _forward_full(X, enc)
    loss, g_proj = nt_xent_loss(proj, tau)
    grads = {"P2": g_proj.T @ q, "c2": g_proj.sum(axis=0)}
    g_a2 = (g_proj @ enc.P2.value) * (a2 > 0)
    grads["P1"] = g_a2.T @ z
    grads["c1"] = g_a2.sum(axis=0)
    g_z = g_a2 @ enc.P1.value
    grads["W2"] = g_z.T @ h
    grads["b2"] = g_z.sum(axis=0)
    g_a1 = (g_z @ enc.W2.value) * (a1 > 0)
    grads["W1"] = g_a1.T @ X
    grads["b1"] = g_a1.sum(axis=0)
    return loss, grads


def pretrain(tiles: Sequence[np.ndarray], enc: EncoderParams, cfg: AugmentConfig, epochs: int,
             batch_size: int, rng, tau: float = 0.5, learning_rate: float = 3e-4):
    """Minimize NT-Xent over augmented pairs; return ``(encoder, per-step losses)``.

    Adam with betas (0.9, 0.99), no weight decay and no schedule. The tile
    order is reshuffled each epoch; a trailing batch of fewer than two tiles
    is skipped.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if enc.input_dim != cfg.output_size * cfg.output_size * 3:
        raise ValueError("encoder input size does not match the augmentation output size")
    hyper = AdamHyper(learning_rate, 0.9, 0.99, 1e-8, 0.0)
    losses: List[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(tiles))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            views = [augment_pair(tiles[i], cfg, rng) for i in idx]
            X = np.stack([_pixels(v[0]) for v in views] + [_pixels(v[1]) for v in views])
            loss, grads = contrastive_loss_and_grads(X, enc, tau)
            for p in enc.params():
                p.grad += grads[p.name]
                adam_step(p, hyper)
            losses.append(loss)
    return enc, losses


def _paired_views(tiles, enc: EncoderParams, cfg: AugmentConfig, rng):
    views = [augment_pair(t, cfg, rng) for t in tiles]
    a = project(np.stack([_pixels(v[0]) for v in views]), enc)
    b = project(np.stack([_pixels(v[1]) for v in views]), enc)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def pair_similarity(tiles: Sequence[np.ndarray], enc: EncoderParams, cfg: AugmentConfig, rng) -> float:
    """Mean cosine similarity between the projections of two views of each tile."""
    return float(np.mean(np.diag(_paired_views(tiles, enc, cfg, rng))))


def pair_margin(tiles: Sequence[np.ndarray], enc: EncoderParams, cfg: AugmentConfig, rng) -> float:
    """Mean positive-pair cosine minus the mean cosine between views of different tiles.

    A freshly initialized ReLU encoder maps all inputs into a narrow cone, so
    the raw positive similarity starts high and first drops while training
    spreads the negatives apart. The margin tracks what the loss rewards.
    """
    if len(tiles) < 2:
        raise ValueError("need at least two tiles")
    S = _paired_views(tiles, enc, cfg, rng)
    n = len(tiles)
    off = (S.sum() - np.trace(S)) / (n * n - n)
    return float(np.trace(S) / n - off)


def extract_features(enc: EncoderParams, tiles_by_wsi: Mapping[str, Sequence[np.ndarray]], input_size: int,
                     patient_of: Optional[Mapping[str, str]] = None, out_dir=None) -> List[TileBag]:
    """Encode every tile and assemble one bag per WSI (features ``H x I``).

    When ``out_dir`` is given the bags and a label-less manifest are written
    there.
    """
    bags = []
    for wsi, tiles in tiles_by_wsi.items():
        if len(tiles) == 0:
            continue
        X = np.stack([tile_to_input(t, input_size) for t in tiles])
        feats = encode(X, enc).T
        pid = patient_of.get(wsi, wsi) if patient_of else wsi
        bags.append(TileBag(pid, wsi, feats))
    if out_dir is not None:
        from .datasets import write_dataset

        write_dataset(out_dir, bags)
    return bags


def write_loss_curve(path, losses: Sequence[float]) -> None:
    with open(path, "w") as fh:
        for step, loss in enumerate(losses):
            fh.write(f"{step} {loss!r}\n")


def save_encoder(path, enc: EncoderParams) -> None:
    from .checkpoint import write_checkpoint

    write_checkpoint(path, "enc", enc.hidden, enc.dim, [p.value for p in enc.params()])


def load_encoder(path) -> EncoderParams:
    from .checkpoint import CheckpointError, read_checkpoint

    kind, hidden, dim, mats = read_checkpoint(path)
    if kind != "enc" or len(mats) != 8:
        raise CheckpointError(f"{path} does not hold an encoder (kind {kind!r})")
    names = ["W1", "b1", "W2", "b2", "P1", "c1", "P2", "c2"]
    params = [Param(m[0] if n[0] in "bc" else m, n) for m, n in zip(mats, names)]
    enc = EncoderParams(*params)
    if enc.hidden != hidden or enc.dim != dim:
        raise CheckpointError("matrix shapes disagree with header")
    return enc

"""Bag files, manifests, label binarization, patient-level splits, and the
synthetic benchmark generator.

Bag file layout (little-endian)::

    magic    4s   b"SMLB"
    version  u16
    H        u32  feature dimension
    I        u32  tile count (>= 1)
    data     I*H float32, tile-major (row i is tile i)

In memory a bag is ``H x I``; the transpose happens on load.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .mil import TileBag

BAG_MAGIC = b"SMLB"
BAG_VERSION = 1
_BAG_HEADER = struct.Struct("<4sHII")
MAX_DIM = 1 << 20
MAX_TILES = 1 << 24

MANIFEST_COLUMNS = ("patient_id", "wsi_id", "bag_path", "raw_score", "label")


class BagFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# bag files


def write_bag(bag: TileBag, path) -> None:
    feats = bag.real_features.T.astype("<f4")
    header = _BAG_HEADER.pack(BAG_MAGIC, BAG_VERSION, bag.dim, bag.real_tile_count)
    Path(path).write_bytes(header + np.ascontiguousarray(feats).tobytes())


def read_bag(path, patient_id: str = "", wsi_id: str = "") -> TileBag:
    buf = Path(path).read_bytes()
    if len(buf) < _BAG_HEADER.size:
        raise BagFormatError(f"{path}: truncated header")
    magic, version, dim, n = _BAG_HEADER.unpack_from(buf, 0)
    if magic != BAG_MAGIC:
        raise BagFormatError(f"{path}: bad magic {magic!r}")
    if version != BAG_VERSION:
        raise BagFormatError(f"{path}: unsupported version {version}")
    if n == 0:
        raise BagFormatError(f"{path}: bag has no tiles")
    if dim == 0 or dim > MAX_DIM or n > MAX_TILES:
        raise BagFormatError(f"{path}: dimensions out of range (H={dim}, I={n})")
    expected = _BAG_HEADER.size + 4 * dim * n
    if len(buf) != expected:
        raise BagFormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=_BAG_HEADER.size).reshape(n, dim)
    return TileBag(patient_id, wsi_id or Path(path).stem, data.T.astype(np.float64))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRow:
    patient_id: str
    wsi_id: str
    bag_path: str
    raw_score: Optional[int] = None
    label: Optional[int] = None


@dataclass
class Manifest:
    rows: List[ManifestRow]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        keys = [(r.patient_id, r.wsi_id) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (patient_id, wsi_id) in manifest")

    @property
    def patients(self) -> List[str]:
        return list(dict.fromkeys(r.patient_id for r in self.rows))

    def rows_for(self, patient_ids) -> List[ManifestRow]:
        wanted = set(patient_ids)
        return [r for r in self.rows if r.patient_id in wanted]

    def patient_field(self, name: str) -> Dict[str, Optional[int]]:
        """Per-patient value of ``label`` or ``raw_score`` (first WSI wins)."""
        out: Dict[str, Optional[int]] = {}
        for r in self.rows:
            out.setdefault(r.patient_id, getattr(r, name))
        return out

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.bag_path)
        return p if p.is_absolute() else self.root / p

    def load_bag(self, row: ManifestRow) -> TileBag:
        return read_bag(self.resolve(row), row.patient_id, row.wsi_id)


def _opt_int(text: str) -> Optional[int]:
    text = text.strip()
    return int(text) if text else None


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}")
        rows = [
            ManifestRow(r["patient_id"], r["wsi_id"], r["bag_path"], _opt_int(r["raw_score"]), _opt_int(r["label"]))
            for r in reader
        ]
    for r in rows:
        if r.label not in (None, 0, 1):
            raise ValueError(f"{path}: label must be 0, 1 or empty (got {r.label})")
    return Manifest(rows, path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.rows:
            w.writerow([r.patient_id, r.wsi_id, r.bag_path,
                        "" if r.raw_score is None else r.raw_score,
                        "" if r.label is None else r.label])


# ---------------------------------------------------------------------------
# label binarization

MEDIAN_ALPHA = 0.5
LOWER_TERTILE_ALPHA = 0.33
UPPER_TERTILE_ALPHA = 0.66
DISCARD = -1


def quantile(scores, alpha: float) -> float:
    """Linear-interpolation quantile (Python's ``statistics`` 'inclusive')."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot take a quantile of no scores")
    return float(np.quantile(x, alpha, method="linear"))


@dataclass(frozen=True)
class MedianThreshold:
    median: float

    @classmethod
    def fit(cls, train_scores) -> "MedianThreshold":
        """Fit on the combined train+validation scores only."""
        return cls(quantile(train_scores, MEDIAN_ALPHA))

    def apply(self, scores) -> np.ndarray:
        return (np.asarray(scores, dtype=np.float64) > self.median).astype(int)


@dataclass(frozen=True)
class TertileThreshold:
    lower: float
    upper: float

    @classmethod
    def fit(cls, train_scores) -> "TertileThreshold":
        return cls(quantile(train_scores, LOWER_TERTILE_ALPHA), quantile(train_scores, UPPER_TERTILE_ALPHA))

    def apply(self, scores) -> np.ndarray:
        """1 above the upper tertile, 0 below the lower one, ``DISCARD`` between.

        The upper test runs first, so colliding thresholds resolve to 1.
        """
        s = np.asarray(scores, dtype=np.float64)
        out = np.full(s.shape, DISCARD, dtype=int)
        out[s <= self.lower] = 0
        out[s >= self.upper] = 1
        return out


def binarize_median(scores) -> np.ndarray:
    return MedianThreshold.fit(scores).apply(scores)


def binarize_tertile(scores) -> np.ndarray:
    return TertileThreshold.fit(scores).apply(scores)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    test_patients: List[str]
    folds: List[Tuple[List[str], List[str]]]
    stratify_keys: List[str] = field(default_factory=lambda: ["label"])
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_val_patients(self) -> List[str]:
        tr, va = self.folds[0]
        return sorted(set(tr) | set(va))

    def validate(self) -> None:
        test = set(self.test_patients)
        rest = None
        for train, val in self.folds:
            tr, va = set(train), set(val)
            if tr & va:
                raise ValueError("a patient is in both train and validation of one fold")
            if (tr | va) & test:
                raise ValueError("a test patient leaked into a fold")
            if rest is None:
                rest = tr | va
            elif rest != tr | va:
                raise ValueError("folds disagree on the non-test patient set")

    def to_json(self) -> str:
        return json.dumps(
            {"test_patients": self.test_patients,
             "folds": [{"train": list(t), "val": list(v)} for t, v in self.folds],
             "stratify_keys": self.stratify_keys, "seed": self.seed},
            indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        plan = cls(d["test_patients"], [(f["train"], f["val"]) for f in d["folds"]], d["stratify_keys"], d["seed"])
        plan.validate()
        return plan

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_json(Path(path).read_text())


def _largest_remainder(sizes: Sequence[int], total: int) -> List[int]:
    n = sum(sizes)
    if n == 0:
        return [0] * len(sizes)
    quotas = [s * total / n for s in sizes]
    alloc = [math.floor(q) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def stratified_split(manifest: Manifest, test_fraction: float = 0.25, k: int = 5,
                     stratify_keys: Sequence[str] = ("label",), seed: int = 0) -> SplitPlan:
    """Patient-level stratified test split plus ``k`` train/validation folds.

    The test size is ``round(test_fraction * n_patients)`` (half rounds up),
    distributed over strata by largest remainder. Within each stratum the
    remaining patients are dealt round-robin into the ``k`` validation folds,
    carrying the deal position from one stratum to the next so fold sizes stay
    within one of each other.
    """
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    if k < 2:
        raise ValueError("k must be at least 2")
    patients = sorted(manifest.patients)
    fields = [manifest.patient_field(key) for key in stratify_keys]
    strata: Dict[tuple, List[str]] = {}
    for pid in patients:
        strata.setdefault(tuple(f[pid] for f in fields), []).append(pid)
    keys = sorted(strata, key=repr)
    rng = np.random.default_rng(seed)
    for key in keys:
        members = strata[key]
        strata[key] = [members[i] for i in rng.permutation(len(members))]

    n_test = int(math.floor(test_fraction * len(patients) + 0.5))
    test_alloc = _largest_remainder([len(strata[key]) for key in keys], n_test)
    test: List[str] = []
    val_folds: List[List[str]] = [[] for _ in range(k)]
    deal = 0
    for key, n_t in zip(keys, test_alloc):
        members = strata[key]
        test.extend(members[:n_t])
        rest = members[n_t:]
        if len(rest) < k:
            raise ValueError(f"stratum {key!r} has {len(rest)} train-side patients, fewer than k={k}")
        for pid in rest:
            val_folds[deal % k].append(pid)
            deal += 1
    non_test = sorted(set(patients) - set(test))
    folds = []
    for val in val_folds:
        vset = set(val)
        folds.append(([p for p in non_test if p not in vset], sorted(val)))
    plan = SplitPlan(sorted(test), folds, list(stratify_keys), seed)
    plan.validate()
    return plan


# ---------------------------------------------------------------------------
# subsampling


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def subsample_bag(bag: TileBag, n: int = 500, seed: int = 0) -> TileBag:
    """Fixed random ``n``-tile subset; a pure function of ``(seed, wsi_id)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    m = bag.real_tile_count
    if m <= n:
        return bag
    rng = np.random.default_rng([seed, _stable_hash(bag.wsi_id)])
    keep = np.sort(rng.choice(m, size=n, replace=False))
    return TileBag(bag.patient_id, bag.wsi_id, bag.real_features[:, keep])


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SynthTruth:
    wsi_id: str
    label: int
    signal_mean: float
    signal_var: float


def _standardized(rng, n: int) -> np.ndarray:
    e = rng.standard_normal(n)
    e -= e.mean()
    return e / np.sqrt(np.mean(e * e))


# Default nuisance scale per task. With shift 2 the mean task stays nearly
# separable; the variance task gets a center offset large enough that the
# bag mean carries no usable signal.
SYNTH_NOISE = {"mean_signal": 0.25, "variance_signal": 3.0}


def synth_generate(task: str, n_bags: int = 200, tiles: Tuple[int, int] = (50, 200), dim: int = 16,
                   noise: Optional[float] = None, seed: int = 0, shift: float = 2.0, spread: float = 1.0,
                   variance_ratio: float = 5.0, signal_feature: int = 0):
    """Synthetic bags whose label lives in one designated feature.

    Tiles of a bag get ``signal = center + spread_b * e`` in the signal
    feature, where ``e`` is standardized per bag (mean exactly 0, variance
    exactly 1) and ``center = noise * N(0, 1)`` is a per-bag nuisance offset
    shared by both classes. ``noise=None`` picks the task default
    (``SYNTH_NOISE``).

    ``mean_signal``: positive bags add ``shift`` to the center; the spread is
    ``spread`` for everyone. ``variance_signal``: the bag mean is the same
    for both classes and positives have ``variance_ratio`` times the
    within-bag variance of negatives.

    All other features are standard normal. Returns ``(bags, labels, truth)``
    with half the bags positive (the extra bag is negative for odd
    ``n_bags``).
    """
    if task not in ("mean_signal", "variance_signal"):
        raise ValueError(f"unknown synthetic task {task!r}")
    if noise is None:
        noise = SYNTH_NOISE[task]
    lo, hi = tiles
    if (n_bags < 1 or lo < 2 or hi < lo or dim < 1 or noise < 0 or spread <= 0 or variance_ratio <= 0
            or not 0 <= signal_feature < dim):
        raise ValueError("invalid synthetic generator parameters")
    rng = np.random.default_rng(seed)
    labels = np.array([1] * (n_bags // 2) + [0] * (n_bags - n_bags // 2))
    labels = labels[rng.permutation(n_bags)]
    bags, truth = [], []
    width = len(str(n_bags - 1))
    for b, y in enumerate(labels):
        n = int(rng.integers(lo, hi + 1))
        feats = rng.standard_normal((dim, n))
        e = _standardized(rng, n)
        center = noise * rng.standard_normal()
        if task == "mean_signal":
            signal = center + shift * float(y) + spread * e
        else:
            signal = center + spread * (np.sqrt(variance_ratio) if y else 1.0) * e
        feats[signal_feature] = signal
        wsi = f"wsi{b:0{width}d}"
        bags.append(TileBag(f"pt{b:0{width}d}", wsi, feats))
        truth.append(SynthTruth(wsi, int(y), float(signal.mean()), float(signal.var())))
    return bags, labels, truth


def write_dataset(out_dir, bags: Sequence[TileBag], labels=None, raw_scores=None) -> Manifest:
    """Write bags as ``bags/<wsi_id>.bin`` and a ``manifest.csv`` beside them."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, bag in enumerate(bags):
        rel = f"bags/{bag.wsi_id}.bin"
        write_bag(bag, out / rel)
        rows.append(ManifestRow(bag.patient_id, bag.wsi_id, rel,
                                None if raw_scores is None else int(raw_scores[i]),
                                None if labels is None else int(labels[i])))
    manifest = Manifest(rows, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest


def write_truth(path, truth: Sequence[SynthTruth]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wsi_id", "label", "signal_mean", "signal_var"])
        for t in truth:
            w.writerow([t.wsi_id, t.label, repr(t.signal_mean), repr(t.signal_var)])

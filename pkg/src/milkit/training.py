"""Fold training with periodic validation, cross-validation, and grid search."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import baseline
from .config import RunConfig, TrainingLog
from .core import adam_step, balance_weights, spawn_seeds
from .datasets import DISCARD, Manifest, MedianThreshold, SplitPlan, TertileThreshold, subsample_bag
from .metrics import SingleClassError, aggregate_by_patient, kfold_report, roc_auc, roc_curve, write_fold_csv, write_roc_csv
from .mil import MILModel, TileBag, pad_bag

logger = logging.getLogger(__name__)


def _check_both_classes(labels, what: str):
    if len(set(int(v) for v in labels)) < 2:
        raise SingleClassError(f"{what} set must contain both classes")


def patient_level_auc(model, bags: Sequence[TileBag], labels: Sequence[int]) -> float:
    scores = [score_bag(model, b) for b in bags]
    return roc_auc(aggregate_by_patient([b.patient_id for b in bags], scores, labels))


def score_bag(model, bag: TileBag) -> float:
    if isinstance(model, MILModel):
        return model.score(bag)
    return baseline.bag_score(bag, model)


def _pad_batch(bags: Sequence[TileBag], pad_to: Optional[int]) -> List[TileBag]:
    target = max(b.real_tile_count for b in bags)
    if pad_to is not None:
        target = max(target, pad_to)
    return [pad_bag(b, target) for b in bags]


def train_fold(train_bags: Sequence[TileBag], train_labels: Sequence[int],
               val_bags: Sequence[TileBag], val_labels: Sequence[int], config: RunConfig):
    """Train one model on one fold; return ``(best_model, TrainingLog)``.

    ``best_model`` is a snapshot taken at the validation check with the
    highest patient-level AUC (earliest step on ties). Validation runs every
    ``eval_every_steps`` optimizer steps and after the last step.
    """
    _check_both_classes(val_labels, "validation")
    if config.model_kind == "tilesup":
        return baseline.train_tile_supervised(train_bags, train_labels, val_bags, val_labels, config)
    if not train_bags:
        raise ValueError("no training bags")
    dim = train_bags[0].dim
    init_seed, shuffle_seed = spawn_seeds(config.seed, 2)
    model = MILModel.init(dim, config.model_kind, config.nu, init_seed, config.head_output)
    log = TrainingLog()
    best = model.copy()
    if config.epochs == 0:
        return best, log

    labels = np.asarray(train_labels, dtype=int)
    class_weights = balance_weights(np.bincount(labels, minlength=2))
    hyper = config.adam()
    val_labels = [int(v) for v in val_labels]
    step = 0
    running: List[float] = []

    def evaluate():
        nonlocal best
        auc = patient_level_auc(model, val_bags, val_labels)
        if log.add(step, float(np.mean(running)), auc):
            best = model.copy()
        logger.debug("%s step %d loss %.4f val auc %.4f", config.model_kind, step, log.records[-1].train_loss, auc)
        running.clear()

    epoch_seeds = shuffle_seed.spawn(config.epochs)
    for epoch in range(config.epochs):
        order = np.random.default_rng(epoch_seeds[epoch]).permutation(len(train_bags))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = _pad_batch([train_bags[i] for i in idx], config.pad_to)
            running.append(model.accumulate_grads(batch, labels[idx], class_weights))
            for p in model.params():
                adam_step(p, hyper)
            step += 1
            if step % config.eval_every_steps == 0:
                evaluate()
    if running:
        evaluate()
    return best, log


# ---------------------------------------------------------------------------
# data assembly


@dataclass
class FoldData:
    bags: Dict[str, List[TileBag]]  # patient -> bags
    labels: Dict[str, int]  # patient -> label

    def select(self, patients) -> Tuple[List[TileBag], List[int]]:
        bags, labels = [], []
        for pid in patients:
            if pid not in self.labels:
                continue
            for b in self.bags[pid]:
                bags.append(b)
                labels.append(self.labels[pid])
        return bags, labels


def patient_labels(manifest: Manifest, plan: SplitPlan, mode: str = "label") -> Dict[str, int]:
    """Binary label per patient.

    ``mode="label"`` reads the manifest's label column. ``median`` and
    ``tertile`` binarize ``raw_score`` with thresholds fitted on the
    train+validation patients only and then applied to everyone. Patients
    without a usable label (or discarded by the tertile rule) are omitted.
    """
    if mode == "label":
        lab = manifest.patient_field("label")
        return {p: int(v) for p, v in lab.items() if v is not None}
    raw = manifest.patient_field("raw_score")
    fit_on = [raw[p] for p in plan.train_val_patients() if raw.get(p) is not None]
    thr = MedianThreshold.fit(fit_on) if mode == "median" else TertileThreshold.fit(fit_on)
    scored = [p for p in manifest.patients if raw[p] is not None]
    out = dict(zip(scored, (int(v) for v in thr.apply([raw[p] for p in scored]))))
    return {p: v for p, v in out.items() if v != DISCARD}


def load_fold_data(manifest: Manifest, plan: SplitPlan, config: RunConfig) -> FoldData:
    labels = patient_labels(manifest, plan, config.label_mode)
    bags: Dict[str, List[TileBag]] = {}
    for row in manifest.rows:
        if row.patient_id not in labels:
            continue
        bag = manifest.load_bag(row)
        if config.subsample_n is not None:
            bag = subsample_bag(bag, config.subsample_n, config.seed)
        bags.setdefault(row.patient_id, []).append(bag)
    return FoldData(bags, labels)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    test_auc: float
    best_val_auc: float
    log: TrainingLog
    roc: list
    model: object = field(repr=False, default=None)


@dataclass
class CVResult:
    config: RunConfig
    folds: List[FoldResult]

    @property
    def test_aucs(self) -> List[float]:
        return [f.test_auc for f in self.folds]

    @property
    def mean_val_auc(self) -> float:
        return float(np.mean([f.best_val_auc for f in self.folds]))

    def report(self) -> Tuple[float, float]:
        return kfold_report(self.test_aucs)

    def summary_text(self) -> str:
        mean, std = self.report()
        lines = self.config.header_lines()
        lines.append(f"model: {self.config.model_kind}")
        for f in self.folds:
            lines.append(f"fold {f.fold}: test_auc={f.test_auc:.6f} best_val_auc={f.best_val_auc:.6f} "
                         f"best_step={f.log.best_step}")
        lines.append(f"{self.config.model_kind} test AUC: {mean:.4f} +- {std:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.txt").write_text(self.summary_text())
        write_fold_csv(out / "folds.csv", self.test_aucs)
        for f in self.folds:
            write_roc_csv(out / f"roc_fold{f.fold}.csv", f.roc)
            f.log.write_csv(out / f"log_fold{f.fold}.csv")


def run_crossval(manifest: Manifest, plan: SplitPlan, config: RunConfig,
                 data: Optional[FoldData] = None) -> CVResult:
    """Train each fold, keep its best-on-validation model, score the shared test set."""
    plan.validate()
    if plan.k < 2:
        raise ValueError("cross-validation needs at least two folds")
    data = data or load_fold_data(manifest, plan, config)
    test_bags, test_labels = data.select(plan.test_patients)
    fold_seeds = spawn_seeds(config.seed, plan.k)
    results = []
    for k, (train_ids, val_ids) in enumerate(plan.folds):
        tr_bags, tr_labels = data.select(train_ids)
        va_bags, va_labels = data.select(val_ids)
        fold_cfg = config.with_(seed=int(fold_seeds[k].generate_state(1)[0]))
        model, log = train_fold(tr_bags, tr_labels, va_bags, va_labels, fold_cfg)
        scores = [score_bag(model, b) for b in test_bags]
        scored = aggregate_by_patient([b.patient_id for b in test_bags], scores, test_labels)
        results.append(FoldResult(k, roc_auc(scored), log.best_val_auc, log, roc_curve(scored), model))
        logger.info("fold %d: test auc %.4f (val %.4f)", k, results[-1].test_auc, log.best_val_auc)
    return CVResult(config, results)


@dataclass
class GridRow:
    learning_rate: float
    weight_decay: float
    batch_size: int
    mean_val_auc: float
    mean_test_auc: float


def grid_search(manifest: Manifest, plan: SplitPlan, config: RunConfig, learning_rates: Sequence[float],
                weight_decays: Sequence[float], batch_sizes: Sequence[int]) -> List[GridRow]:
    """Cross-validate every (lr, wd, batch) combination, best mean val AUC first."""
    if not (learning_rates and weight_decays and batch_sizes):
        raise ValueError("every grid axis needs at least one value")
    data = load_fold_data(manifest, plan, config)
    rows = []
    for lr, wd, bs in itertools.product(learning_rates, weight_decays, batch_sizes):
        cfg = config.with_(learning_rate=float(lr), weight_decay=float(wd), batch_size=int(bs))
        res = run_crossval(manifest, plan, cfg, data)
        rows.append(GridRow(cfg.learning_rate, cfg.weight_decay, cfg.batch_size,
                            res.mean_val_auc, float(np.mean(res.test_aucs))))
    return sorted(rows, key=lambda r: -r.mean_val_auc)


def write_grid_csv(path, rows: Sequence[GridRow], config: Optional[RunConfig] = None) -> None:
    with open(path, "w") as fh:
        if config is not None:
            fh.write("\n".join(config.header_lines()) + "\n")
        fh.write("learning_rate,weight_decay,batch_size,mean_val_auc,mean_test_auc\n")
        for r in rows:
            fh.write(f"{r.learning_rate!r},{r.weight_decay!r},{r.batch_size},{r.mean_val_auc!r},{r.mean_test_auc!r}\n")

"""Run configuration and training log shared by every trainer."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

from .core import OUTPUTS, AdamHyper

MODEL_CHOICES = ("deepmil", "varmil", "tilesup")
LABEL_MODES = ("label", "median", "tertile")


@dataclass
class RunConfig:
    """Hyperparameters for one training run.

    The defaults are the MIL settings (lr 5e-4, weight decay 1e-4, batch 16,
    16 epochs, 500-tile subsample padded to 550, validation every 5 steps).
    ``RunConfig.for_model("tilesup")`` gives the tile-supervised defaults.
    """

    model_kind: str = "varmil"
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 16
    eval_every_steps: int = 5
    subsample_n: Optional[int] = 500
    pad_to: Optional[int] = 550
    seed: int = 0
    nu: int = 128
    beta1: float = 0.9
    beta2: float = 0.99
    label_mode: str = "label"
    head_output: str = "softmax"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model_kind not in MODEL_CHOICES:
            raise ValueError(f"model_kind must be one of {MODEL_CHOICES}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}")
        if self.head_output not in OUTPUTS:
            raise ValueError(f"head_output must be one of {OUTPUTS}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every_steps < 1 or self.nu < 1:
            raise ValueError("batch_size, eval_every_steps and nu must be >= 1; epochs >= 0")
        if self.subsample_n is not None and self.subsample_n < 1:
            raise ValueError("subsample_n must be >= 1")
        if self.pad_to is not None and self.subsample_n is not None and self.pad_to < self.subsample_n:
            raise ValueError("pad_to must be at least subsample_n")

    @classmethod
    def for_model(cls, kind: str, **overrides) -> "RunConfig":
        if kind == "tilesup":
            base = dict(learning_rate=5e-5, weight_decay=0.0, batch_size=512, epochs=4, eval_every_steps=100)
        else:
            base = {}
        base.update(overrides)
        return cls(model_kind=kind, **base)

    def adam(self) -> AdamHyper:
        return AdamHyper(self.learning_rate, self.beta1, self.beta2, 1e-8, self.weight_decay)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def header_lines(self) -> List[str]:
        return [f"# {k} = {v!r}" for k, v in sorted(self.to_dict().items())]

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    val_auc: float


@dataclass
class TrainingLog:
    records: List[EvalRecord] = field(default_factory=list)
    best_step: int = -1
    best_val_auc: float = float("nan")

    def add(self, step: int, train_loss: float, val_auc: float) -> bool:
        """Append a record; return True if it is a new best (ties keep the earliest)."""
        self.records.append(EvalRecord(step, train_loss, val_auc))
        if self.best_step < 0 or val_auc > self.best_val_auc:
            self.best_step, self.best_val_auc = step, val_auc
            return True
        return False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "val_auc"])
            for r in self.records:
                w.writerow([r.step, repr(r.train_loss), repr(r.val_auc)])

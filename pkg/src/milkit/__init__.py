"""Multiple-instance learning on bags of tile features.

Attention pooling (DeepMIL), its attention-weighted variance extension
(VarMIL), a tile-supervised majority-vote baseline, small-scale contrastive
pre-training, and the tiling, splitting and evaluation pipeline around them.
Everything is plain numpy with hand-derived gradients.
"""
from .baseline import TileClassifierParams, bag_score, majority_vote, tile_forward, train_tile_supervised
from .checkpoint import CheckpointError, load_mil, load_model, save_mil, save_model
from .config import RunConfig, TrainingLog
from .core import (
    AdamHyper,
    EmptyBagError,
    Param,
    adam_step,
    balance_weights,
    finite_diff_grad,
    he_init,
    masked_softmax,
    weighted_cross_entropy,
)
from .datasets import (
    BagFormatError,
    Manifest,
    SplitPlan,
    binarize_median,
    binarize_tertile,
    read_bag,
    read_manifest,
    stratified_split,
    subsample_bag,
    synth_generate,
    write_bag,
    write_dataset,
)
from .metrics import SingleClassError, ScoredSet, kfold_report, patient_aggregate, roc_auc, roc_curve
from .mil import AttentionParams, HeadParams, MILModel, TileBag, attention_weights, forward, pad_bag, weighted_mean, weighted_variance
from .training import grid_search, run_crossval, train_fold

__version__ = "0.1.0"

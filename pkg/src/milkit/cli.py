"""Command-line entry point: ``milkit <subcommand> ...``.

Every report a subcommand writes starts with the full run configuration as
``# key = value`` comment lines, so a report is self-describing.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import LABEL_MODES, MODEL_CHOICES, RunConfig
from .core import OUTPUTS

logger = logging.getLogger("milkit")


def _header(settings: dict) -> str:
    return "".join(f"# {k} = {v!r}\n" for k, v in sorted(settings.items()))


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (unset flags keep the per-model defaults)")
    g.add_argument("--model", choices=MODEL_CHOICES, default="varmil")
    g.add_argument("--lr", type=float, dest="learning_rate")
    g.add_argument("--wd", type=float, dest="weight_decay")
    g.add_argument("--batch", type=int, dest="batch_size")
    g.add_argument("--epochs", type=int)
    g.add_argument("--eval-every", type=int, dest="eval_every_steps")
    g.add_argument("--subsample", type=int, dest="subsample_n", help="tiles kept per bag; 0 keeps all")
    g.add_argument("--pad-to", type=int, dest="pad_to", help="padded bag length; 0 pads to the batch maximum")
    g.add_argument("--seed", type=int)
    g.add_argument("--nu", type=int)
    g.add_argument("--label-mode", choices=LABEL_MODES)
    g.add_argument("--head-output", choices=OUTPUTS)
    g.add_argument("--config", type=Path, help="JSON file of RunConfig fields; flags override it")


def _run_config(args) -> RunConfig:
    overrides = {}
    if args.config is not None:
        overrides.update(json.loads(args.config.read_text()))
        overrides.pop("model_kind", None)
    for name in ("learning_rate", "weight_decay", "batch_size", "epochs", "eval_every_steps", "subsample_n",
                 "pad_to", "seed", "nu", "label_mode", "head_output"):
        v = getattr(args, name)
        if v is not None:
            overrides[name] = v
    for name in ("subsample_n", "pad_to"):
        if overrides.get(name) == 0:
            overrides[name] = None
    return RunConfig.for_model(args.model, **overrides)


def _load_inputs(args):
    from .datasets import SplitPlan, read_manifest

    return read_manifest(args.manifest), SplitPlan.load(args.split)


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    from .preprocess import TilingConfig, tile_directory

    cfg = TilingConfig(tile_size=args.tile_size, background_intensity_threshold=args.intensity,
                       sobel_threshold=args.sobel, background_fraction=args.fraction, rule_mode=args.rule_mode)
    kept = tile_directory(args.img_dir, args.out, cfg)
    for wsi, n in kept.items():
        print(f"{wsi}: {n} tissue tiles")
    return 0


def cmd_synth(args) -> int:
    from .datasets import synth_generate, write_dataset, write_truth

    bags, labels, truth = synth_generate(args.task, args.n_bags, tuple(args.tiles), args.dim, args.noise, args.seed,
                                         variance_ratio=args.variance_ratio)
    write_dataset(args.out, bags, labels)
    write_truth(Path(args.out) / "truth.csv", truth)
    print(f"wrote {len(bags)} bags ({int(np.sum(labels))} positive) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from .contrastive import AugmentConfig, EncoderParams, pretrain, save_encoder, write_loss_curve
    from .preprocess import read_tile_directory

    tiles = [t for ts in read_tile_directory(args.tiles).values() for t in ts]
    if len(tiles) < 2:
        print("error: need at least two tissue tiles", file=sys.stderr)
        return 2
    cfg = AugmentConfig(output_size=args.size)
    enc = EncoderParams.init(args.size * args.size * 3, args.hidden, args.dim, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    enc, losses = pretrain(tiles, enc, cfg, args.epochs, args.batch, rng, args.tau, args.lr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_encoder(out / "encoder.smlp", enc)
    write_loss_curve(out / "loss.txt", losses)
    if losses:
        print(f"{len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return 0


def cmd_extract(args) -> int:
    from .contrastive import extract_features, load_encoder
    from .preprocess import read_tile_directory

    enc = load_encoder(args.encoder)
    size = int(round(np.sqrt(enc.input_dim / 3)))
    if size * size * 3 != enc.input_dim:
        print("error: encoder input is not a square RGB tile", file=sys.stderr)
        return 2
    bags = extract_features(enc, read_tile_directory(args.tiles), size, out_dir=args.out)
    print(f"wrote {len(bags)} bags of dimension {enc.dim} to {args.out}")
    return 0


def cmd_split(args) -> int:
    from .datasets import read_manifest, stratified_split

    manifest = read_manifest(args.manifest)
    plan = stratified_split(manifest, args.test_frac, args.k, tuple(args.stratify), args.seed)
    out = args.out or Path(args.manifest).with_name("split.json")
    plan.save(out)
    print(f"{len(plan.test_patients)} test patients, {plan.k} folds -> {out}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import save_model
    from .training import load_fold_data, patient_level_auc, train_fold

    manifest, plan = _load_inputs(args)
    config = _run_config(args)
    if not 0 <= args.fold < plan.k:
        print(f"error: fold must be in [0, {plan.k})", file=sys.stderr)
        return 2
    data = load_fold_data(manifest, plan, config)
    train_ids, val_ids = plan.folds[args.fold]
    model, log = train_fold(*data.select(train_ids), *data.select(val_ids), config)
    test_bags, test_labels = data.select(plan.test_patients)
    test_auc = patient_level_auc(model, test_bags, test_labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.smlp", model)
    log.write_csv(out / "log.csv")
    summary = (_header(config.to_dict()) + f"fold {args.fold}: best_step={log.best_step} "
               f"best_val_auc={log.best_val_auc:.6f} test_auc={test_auc:.6f}\n")
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def cmd_cv(args) -> int:
    from .checkpoint import save_model
    from .training import run_crossval

    manifest, plan = _load_inputs(args)
    config = _run_config(args)
    res = run_crossval(manifest, plan, config)
    res.write(args.out)
    if args.save_models:
        for f in res.folds:
            save_model(Path(args.out) / f"model_fold{f.fold}.smlp", f.model)
    print(res.summary_text(), end="")
    return 0


def cmd_gridsearch(args) -> int:
    from .training import grid_search, write_grid_csv

    manifest, plan = _load_inputs(args)
    config = _run_config(args)
    grid = json.loads(Path(args.grid_file).read_text())
    try:
        axes = [grid[k] for k in ("learning_rate", "weight_decay", "batch_size")]
    except KeyError as e:
        print(f"error: grid file lacks {e.args[0]!r}", file=sys.stderr)
        return 2
    rows = grid_search(manifest, plan, config, *axes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_grid_csv(out / "grid.csv", rows, config)
    best = rows[0]
    print(f"best: lr={best.learning_rate!r} wd={best.weight_decay!r} batch={best.batch_size} "
          f"mean val AUC {best.mean_val_auc:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_model
    from .datasets import read_manifest
    from .metrics import aggregate_by_patient, roc_auc, roc_curve, write_roc_csv
    from .training import score_bag

    model = load_model(args.checkpoint)
    manifest = read_manifest(args.manifest)
    rows = [r for r in manifest.rows if r.label is not None]
    if not rows:
        print("error: manifest has no labels", file=sys.stderr)
        return 2
    scores = [score_bag(model, manifest.load_bag(r)) for r in rows]
    scored = aggregate_by_patient([r.patient_id for r in rows], scores, [r.label for r in rows])
    auc = roc_auc(scored)
    header = _header({"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "kind": model.kind})
    text = header + f"{model.kind} patient AUC: {auc:.6f} ({len(scored.labels)} patients)\n"
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.txt").write_text(text)
        write_roc_csv(out / "roc.csv", roc_curve(scored))
        with open(out / "scores.csv", "w") as fh:
            fh.write("patient_id,score,label\n")
            for pid, s, y in zip(scored.patient_ids, scored.scores, scored.labels):
                fh.write(f"{pid},{float(s)!r},{int(y)}\n")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="tile PNG rasters and drop background tiles")
    p.add_argument("img_dir", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--tile-size", type=int, default=224)
    p.add_argument("--intensity", type=int, default=240)
    p.add_argument("--sobel", type=float, default=15)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--rule-mode", choices=("robust_or", "literal_and"), default="robust_or")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic bag dataset")
    p.add_argument("task", choices=("mean_signal", "variance_signal"))
    p.add_argument("out", type=Path)
    p.add_argument("--n-bags", type=int, default=200)
    p.add_argument("--tiles", type=int, nargs=2, default=(50, 200), metavar=("MIN", "MAX"))
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=None, help="per-bag nuisance scale (task default if unset)")
    p.add_argument("--variance-ratio", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pre-training of the tile encoder")
    p.add_argument("tiles", type=Path, help="directory written by 'preprocess'")
    p.add_argument("out", type=Path)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--size", type=int, default=16, help="augmented view side length")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--dim", type=int, default=16, help="feature dimension H")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="encode tiles into bags with a trained encoder")
    p.add_argument("encoder", type=Path)
    p.add_argument("tiles", type=Path)
    p.add_argument("out", type=Path)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("split", help="patient-level stratified test split and k folds")
    p.add_argument("manifest", type=Path)
    p.add_argument("--test-frac", type=float, default=0.25)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stratify", nargs="+", default=["label"])
    p.add_argument("--out", type=Path, help="defaults to split.json beside the manifest")
    p.set_defaults(func=cmd_split)

    for name, func, helptext in (("train", cmd_train, "train one fold"),
                                 ("cv", cmd_cv, "k-fold cross-validation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("manifest", type=Path)
        p.add_argument("split", type=Path)
        p.add_argument("--out", type=Path, default=Path(name))
        if name == "train":
            p.add_argument("--fold", type=int, default=0)
        else:
            p.add_argument("--save-models", action="store_true")
        _add_run_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("gridsearch", help="cross-validate a learning-rate / weight-decay / batch grid")
    p.add_argument("manifest", type=Path)
    p.add_argument("split", type=Path)
    p.add_argument("grid_file", type=Path, help='JSON: {"learning_rate": [...], "weight_decay": [...], '
                                                '"batch_size": [...]}')
    p.add_argument("--out", type=Path, default=Path("gridsearch"))
    _add_run_flags(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("eval", help="patient-level AUC of a saved model on a labelled manifest")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

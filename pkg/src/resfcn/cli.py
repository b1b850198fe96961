"""``resfcn`` command line: gen, train, predict, eval and sweep.

Every command accepts ``--config FILE`` (a JSON object whose keys are flag
names with dashes or underscores); explicit flags override file values.
Exit status is 0 on success, 1 when the configuration or inputs fail
validation (nothing is written), and 2 when a run fails part way.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import data as D
from .evaluation import (SWEEP_GRID, EvaluationError, binarize, check_threshold, evaluate_masks,
                         predict_dataset, sweep_from_probabilities, write_sweep_csv, connected_components)
from .network import GCN_KERNELS, CheckpointError, build_resfcn, load_checkpoint, save_checkpoint
from .tensor import stream
from .training import LossConfig, OptimizerConfig, TrainConfig, TrainingError, train, write_history_csv

logger = logging.getLogger("resfcn")

MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Raised for anything detected before work starts; maps to exit status 1."""


# ---------------------------------------------------------------------------
# reusable pipeline pieces


def load_dataset(root, subset: Optional[Tuple[int, int]] = None) -> List[D.VolumeCase]:
    """Cases of a ``gen`` directory in manifest order, optionally sliced by index."""
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    entries = manifest["cases"]
    if subset is not None:
        entries = entries[subset[0]:subset[1]]
    return [D.load_volume(root / e["file"]) for e in entries]


def training_samples(cases: Sequence[D.VolumeCase], seed: int, split: str = "case", fraction: float = 0.1,
                     patch: D.PatchSpec = D.PatchSpec()):
    """Normalize, extract lesion patches, split, then augment the training side only."""
    cases = [D.normalize_slices(c) for c in cases]
    if split == "case":
        tr, va = D.split_cases(cases, fraction, stream(seed, "split"))
        train_p = [p for c in tr for p in D.extract_patches(c, patch)]
        val_p = [p for c in va for p in D.extract_patches(c, patch)]
    elif split == "patch":
        allp = [p for c in cases for p in D.extract_patches(c, patch)]
        train_p, val_p = D.split_train_val(allp, fraction, stream(seed, "split"))
    else:
        raise ConfigError(f"split must be 'case' or 'patch', got {split!r}")
    if not train_p or not val_p:
        raise ConfigError("dataset yields no lesion patches on one side of the split")
    return D.augment(train_p, stream(seed, "augment")), val_p


def run_training(cases, *, k=9, seed=0, split="case", cfg: TrainConfig = TrainConfig(), width=1.0,
                 checkpoint=None, history=None):
    train_p, val_p = training_samples(cases, seed, split)
    logger.info("%d training patches (augmented), %d validation patches", len(train_p), len(val_p))
    net = build_resfcn(k, stream(seed, "init"), width=width)
    net, hist = train(net, train_p, val_p, cfg, stream(seed, "train"), checkpoint_path=checkpoint,
                      history_path=history)
    if checkpoint is not None:
        save_checkpoint(net, checkpoint, history=hist, metadata={"seed": seed, "split": split})
    return net, hist


# ---------------------------------------------------------------------------
# argument handling


def _subset(text: str) -> Tuple[int, int]:
    try:
        a, b = text.split(":")
        lo, hi = int(a or 0), int(b) if b else 1 << 30
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:END, got {text!r}") from None
    if lo < 0 or hi <= lo:
        raise argparse.ArgumentTypeError(f"empty or negative subset {text!r}")
    return lo, hi


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# dest -> built-in default; flags default to None so config-file values can fill gaps
DEFAULTS = {
    "seed": 0, "cases": 10, "slices": 18, "k": 9, "epsilon": 1.0, "batch": 32, "max_epochs": 100,
    "lr": 1e-3, "l2": 1e-4, "patience": 15, "samples_per_epoch": None, "max_val_samples": None,
    "split": "case", "delta": 0.5, "stride": 32, "subset": None, "width": 1.0,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="resfcn", description="Res-FCN lesion segmentation on multi-modal MR volumes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON file of flag values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)

    g = sub.add_parser("gen", help="write a synthetic MVOL dataset")
    common(g)
    g.add_argument("--cases", type=int)
    g.add_argument("--slices", type=int)

    t = sub.add_parser("train", help="train a network on a dataset directory")
    common(t)
    t.add_argument("--data", type=Path)
    t.add_argument("--checkpoint", type=Path)
    t.add_argument("--k", type=int, choices=GCN_KERNELS)
    t.add_argument("--epsilon", type=float, help="Dice smoothing term")
    t.add_argument("--batch", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--l2", type=float)
    t.add_argument("--patience", type=int, help="early-stopping patience in epochs")
    t.add_argument("--samples-per-epoch", type=int)
    t.add_argument("--max-val-samples", type=int)
    t.add_argument("--split", choices=("case", "patch"))
    t.add_argument("--subset", type=_subset, help="case index range START:END of the dataset")
    t.add_argument("--width", type=float, help=argparse.SUPPRESS)

    for name, help_ in (("predict", "write predicted masks"), ("eval", "score predictions at one threshold"),
                        ("sweep", "score predictions across the threshold grid")):
        s = sub.add_parser(name, help=help_)
        common(s)
        s.add_argument("--data", type=Path)
        s.add_argument("--checkpoint", type=Path)
        s.add_argument("--stride", type=int)
        s.add_argument("--subset", type=_subset)
        if name != "sweep":
            s.add_argument("--delta", type=float)
        if name == "eval":
            s.add_argument("--predictions", type=Path, help="directory of mask-only MVOL files to score")
    return p


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge built-in defaults, config file and flags (flags win)."""
    file_cfg = {}
    if getattr(args, "config", None) is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - set(vars(args))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    for key, val in vars(args).items():
        if val is not None or key in ("config", "command", "verbose"):
            continue
        if key in file_cfg:
            v = file_cfg[key]
            if key == "subset" and isinstance(v, str):
                v = _subset(v)
            elif key in ("data", "checkpoint", "out", "predictions") and v is not None:
                v = Path(v)
            setattr(args, key, v)
        elif key in DEFAULTS:
            setattr(args, key, DEFAULTS[key])
    return args


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required for {args.command}")


def _require_dataset(path: Path):
    if not (path / MANIFEST).is_file():
        raise ConfigError(f"{path} is not a dataset directory (no {MANIFEST})")


def _train_config(args) -> TrainConfig:
    if args.k not in GCN_KERNELS:
        raise ConfigError(f"k must be one of {GCN_KERNELS}, got {args.k}")
    if args.split not in ("case", "patch"):
        raise ConfigError(f"split must be 'case' or 'patch', got {args.split!r}")
    if not args.width > 0:
        raise ConfigError("width must be positive")
    try:
        return TrainConfig(
            batch_size=args.batch, max_epochs=args.max_epochs, early_stop_patience=args.patience,
            samples_per_epoch=args.samples_per_epoch, max_val_samples=args.max_val_samples,
            loss=LossConfig(args.epsilon), optimizer=OptimizerConfig(learning_rate=args.lr, l2_factor=args.l2))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    _require(args, "out")
    try:
        cfg = D.SyntheticConfig(seed=args.seed, cases=args.cases, slices=args.slices)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in D.generate_synthetic(cfg):
        fname = f"{case.case_id}.mvol"
        D.save_volume(case, out / fname)
        entries.append({"case_id": case.case_id, "file": fname, "lesions": connected_components(case.mask)[1]})
    manifest = {"format": "MVOL v1", "seed": cfg.seed, "slices": cfg.slices, "count": len(entries),
                "cases": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(entries)} cases to {out}")
    return 0


def cmd_train(args) -> int:
    _require(args, "data", "checkpoint")
    _require_dataset(args.data)
    cfg = _train_config(args)
    history = args.out if args.out is not None else args.checkpoint.with_suffix(".history.csv")
    args.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    cases = load_dataset(args.data, args.subset)
    if len(cases) < 2:
        raise ConfigError("training needs at least 2 cases")
    net, hist = run_training(cases, k=args.k, seed=args.seed, split=args.split, cfg=cfg, width=args.width,
                             checkpoint=args.checkpoint, history=history)
    write_history_csv(hist, history)
    best = min(hist, key=lambda r: r["val_loss"])
    print(f"trained {len(hist)} epochs; best val loss {best['val_loss']:.4f} at epoch {best['epoch']}")
    return 0


def _inference_inputs(args):
    _require(args, "data")
    _require_dataset(args.data)
    if getattr(args, "delta", None) is not None:
        try:
            check_threshold(args.delta)
        except EvaluationError as exc:
            raise ConfigError(str(exc)) from None
    if args.stride < 1:
        raise ConfigError("--stride must be >= 1")
    cases = [D.normalize_slices(c) for c in load_dataset(args.data, args.subset)]
    return cases


def _probabilities(args, cases):
    _require(args, "checkpoint")
    net = load_checkpoint(args.checkpoint)
    return predict_dataset(net, cases, args.stride)


def cmd_predict(args) -> int:
    _require(args, "out", "checkpoint")
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.checkpoint} not found")
    cases = _inference_inputs(args)
    probs = _probabilities(args, cases)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        D.save_mask(out / f"{case.case_id}.mask.mvol", case.case_id, binarize(probs[case.case_id], args.delta),
                    case.spacing)
    print(f"wrote {len(cases)} masks to {out} (delta={args.delta:g})")
    return 0


def cmd_eval(args) -> int:
    _require(args, "out")
    if args.predictions is None:
        _require(args, "checkpoint")
    cases = _inference_inputs(args)
    if args.predictions is not None:
        preds = {}
        for case in cases:
            for name in (f"{case.case_id}.mask.mvol", f"{case.case_id}.mvol"):
                f = Path(args.predictions) / name
                if f.is_file():
                    preds[case.case_id] = D.load_mask(f)[1]
                    break
    else:
        probs = _probabilities(args, cases)
        preds = {k: binarize(p, args.delta) for k, p in probs.items()}
    report = evaluate_masks(preds, cases, args.delta)
    report.to_csv(args.out)
    print(report.summary())
    return 0


def cmd_sweep(args) -> int:
    _require(args, "out", "checkpoint")
    cases = _inference_inputs(args)
    rows = sweep_from_probabilities(_probabilities(args, cases), cases, SWEEP_GRID)
    write_sweep_csv(rows, args.out)
    for r in rows:
        print(f"delta={r.delta:.2f} DC={r.dice:.4f} m#FN={r.m_fn:.3f} m#FP={r.m_fp:.3f}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args = resolve(args)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"resfcn {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, CheckpointError, EvaluationError, D.VolumeError, OSError, ValueError) as exc:
        print(f"resfcn {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Tiled whole-volume inference, thresholding, Dice and lesion-level FN/FP counts."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data import VolumeCase


class EvaluationError(ValueError):
    pass


SWEEP_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(11))
_STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)


def check_threshold(delta: float) -> float:
    delta = float(delta)
    if not 0.0 <= delta <= 1.0:
        raise EvaluationError(f"threshold must lie in [0, 1], got {delta}")
    return delta


def _binary(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.all((a == 0) | (a == 1)):
        raise EvaluationError(f"{what} must be binary")
    return a.astype(bool)


# ---------------------------------------------------------------------------
# inference


def tile_offsets(extent: int, size: int, stride: int) -> List[int]:
    """Window starts at 0, stride, ...; the last window is pinned to the far edge."""
    if extent < size:
        raise EvaluationError(f"slice extent {extent} is smaller than the {size}-pixel window")
    if stride < 1:
        raise EvaluationError("tiling stride must be >= 1")
    offs = list(range(0, extent - size + 1, stride))
    if offs[-1] != extent - size:
        offs.append(extent - size)
    return offs


def predict_volume(net, case: VolumeCase, stride: int = 32, batch_size: int = 32) -> np.ndarray:
    """Probability volume (Z,H,W): mean of all overlapping tile predictions per pixel."""
    n = net.input_size
    _, z, h, w = case.images.shape
    rows, cols = tile_offsets(h, n, stride), tile_offsets(w, n, stride)
    acc = np.zeros((z, h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.int64)
    for r in rows:
        for c in cols:
            hits[r:r + n, c:c + n] += 1
    tiles = [(k, r, c) for k in range(z) for r in rows for c in cols]
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start:start + batch_size]
        x = np.stack([case.images[:, k, r:r + n, c:c + n] for k, r, c in chunk]).astype(np.float32)
        p = net.forward(x, train=False)
        for (k, r, c), tile in zip(chunk, p[:, 0]):
            acc[k, r:r + n, c:c + n] += tile
    return (acc / hits).astype(np.float32)


def binarize(prob: np.ndarray, delta: float) -> np.ndarray:
    """1 where prob >= delta (ties count as lesion)."""
    return np.asarray(prob) >= check_threshold(delta)


# ---------------------------------------------------------------------------
# metrics


def dice_coefficient(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks agree perfectly and score 1."""
    a, b = _binary(pred, "prediction"), _binary(truth, "truth")
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def connected_components(volume: np.ndarray) -> Tuple[np.ndarray, int]:
    """26-connected labeling; labels 1..n in raster order of each component's first voxel."""
    v = _binary(volume, "volume")
    if v.ndim != 3:
        raise EvaluationError(f"expected a 3-D volume, got shape {v.shape}")
    labels, n = ndimage.label(v, structure=_STRUCTURE_26)
    return labels, int(n)


def count_fn_fp(pred: np.ndarray, truth: np.ndarray) -> Tuple[int, int, int]:
    """(FN, FP, TP) at lesion level; a lesion is found when it shares at least one voxel."""
    a, b = _binary(pred, "prediction"), _binary(truth, "truth")
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    t_lab, n_t = connected_components(b)
    p_lab, n_p = connected_components(a)
    hit_truth = np.unique(t_lab[a & b])
    hit_pred = np.unique(p_lab[a & b])
    tp = int(np.count_nonzero(hit_truth))
    fp = n_p - int(np.count_nonzero(hit_pred))
    return n_t - tp, fp, tp


@dataclass
class EvalRow:
    case_id: str
    dice: float
    fn: int
    fp: int
    tp: int


@dataclass
class EvalReport:
    delta: float
    rows: List[EvalRow] = field(default_factory=list)

    @property
    def dice(self) -> float:
        return float(np.mean([r.dice for r in self.rows]))

    @property
    def m_fn(self) -> float:
        return float(np.mean([r.fn for r in self.rows]))

    @property
    def m_fp(self) -> float:
        return float(np.mean([r.fp for r in self.rows]))

    def summary(self) -> str:
        return f"delta={self.delta:g} DC={self.dice:.4f} m#FN={self.m_fn:.3f} m#FP={self.m_fp:.3f}"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "dice", "fn", "fp", "tp"])
            for r in self.rows:
                w.writerow([r.case_id, repr(r.dice), r.fn, r.fp, r.tp])
            w.writerow(["mean", repr(self.dice), repr(self.m_fn), repr(self.m_fp), ""])


def evaluate_masks(preds: Dict[str, np.ndarray], cases: Sequence[VolumeCase], delta: float = 0.5) -> EvalReport:
    """Score already-binarized predictions keyed by case id."""
    report = EvalReport(delta)
    for case in sorted(cases, key=lambda c: c.case_id):
        if case.case_id not in preds:
            raise EvaluationError(f"no prediction for case {case.case_id}")
        p = preds[case.case_id]
        if p.shape != case.mask.shape:
            raise EvaluationError(f"{case.case_id}: prediction shape {p.shape} != mask shape {case.mask.shape}")
        fn, fp, tp = count_fn_fp(p, case.mask)
        report.rows.append(EvalRow(case.case_id, dice_coefficient(p, case.mask), fn, fp, tp))
    if not report.rows:
        raise EvaluationError("no cases to evaluate")
    return report


def predict_dataset(net, cases: Sequence[VolumeCase], stride: int = 32) -> Dict[str, np.ndarray]:
    return {c.case_id: predict_volume(net, c, stride) for c in cases}


def evaluate_dataset(net, cases: Sequence[VolumeCase], delta: float = 0.5, stride: int = 32) -> EvalReport:
    probs = predict_dataset(net, cases, stride)
    return evaluate_masks({k: binarize(p, delta) for k, p in probs.items()}, cases, delta)


@dataclass
class SweepRow:
    delta: float
    dice: float
    m_fn: float
    m_fp: float


def sweep_from_probabilities(probs: Dict[str, np.ndarray], cases: Sequence[VolumeCase],
                             grid: Iterable[float] = SWEEP_GRID) -> List[SweepRow]:
    grid = sorted(check_threshold(d) for d in grid)
    rows = []
    for d in grid:
        rep = evaluate_masks({k: binarize(p, d) for k, p in probs.items()}, cases, d)
        rows.append(SweepRow(d, rep.dice, rep.m_fn, rep.m_fp))
    for lo, hi in zip(rows, rows[1:]):
        if hi.m_fn < lo.m_fn:
            raise EvaluationError(f"m#FN decreased from {lo.m_fn} at {lo.delta} to {hi.m_fn} at {hi.delta}")
    return rows


def threshold_sweep(net, cases: Sequence[VolumeCase], grid: Iterable[float] = SWEEP_GRID,
                    stride: int = 32) -> List[SweepRow]:
    """One evaluation per threshold, sharing a single probability pass."""
    return sweep_from_probabilities(predict_dataset(net, cases, stride), cases, grid)


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "dice", "m_fn", "m_fp"])
        for r in rows:
            w.writerow([f"{r.delta:.2f}", repr(r.dice), repr(r.m_fn), repr(r.m_fp)])

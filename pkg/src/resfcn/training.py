"""Negative-Dice loss, Adam with kernel L2 and plateau decay, and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LossConfig:
    epsilon: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("loss epsilon must be positive")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    l2_factor: float = 1e-4
    plateau_factor: float = math.sqrt(0.1)
    plateau_patience: int = 5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.l2_factor < 0:
            raise ValueError("l2 factor must be >= 0")
        if not 0 < self.plateau_factor < 1 or self.plateau_patience < 1:
            raise ValueError("invalid plateau schedule")


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 15
    # None means one full pass over the training samples per epoch
    samples_per_epoch: Optional[int] = None
    max_val_samples: Optional[int] = None
    stop_train_loss: Optional[float] = None
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch size, epochs and patience must be >= 1")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            raise ValueError("samples_per_epoch must be >= 1")


@dataclass
class TrainState:
    learning_rate: float
    step: int = 0
    epoch: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    best_val: float = math.inf
    plateau_wait: int = 0
    stop_wait: int = 0
    lr_history: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# loss


def _check_pair(pred: np.ndarray, truth: np.ndarray):
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if pred.ndim < 2:
        raise ValueError("expected a leading batch axis")
    if not np.all((truth == 0) | (truth == 1)):
        raise ValueError("truth must be binary")


def _dice_terms(pred, truth, eps):
    b = pred.shape[0]
    p = pred.reshape(b, -1).astype(np.float64)
    t = truth.reshape(b, -1).astype(np.float64)
    num = 2.0 * np.einsum("bi,bi->b", p, t) + eps
    den = t.sum(axis=1) + p.sum(axis=1) + eps
    return p, t, num, den


def dice_loss_per_sample(pred: np.ndarray, truth: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    _check_pair(pred, truth)
    _, _, num, den = _dice_terms(pred, truth, cfg.epsilon)
    return -num / den


def dice_loss(pred: np.ndarray, truth: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    """Batch mean of -(2 sum(p t) + eps) / (sum(t) + sum(p) + eps), summed per patch."""
    return float(dice_loss_per_sample(pred, truth, cfg).mean())


def dice_loss_backward(pred: np.ndarray, truth: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    _check_pair(pred, truth)
    b = pred.shape[0]
    _, t, num, den = _dice_terms(pred, truth, cfg.epsilon)
    # d/dp_i of -num/den = -(2 t_i den - num) / den^2
    grad = -(2.0 * t * den[:, None] - num[:, None]) / np.square(den)[:, None] / b
    return grad.reshape(pred.shape).astype(pred.dtype)


# ---------------------------------------------------------------------------
# optimizer


def init_state(cfg: OptimizerConfig) -> TrainState:
    return TrainState(learning_rate=cfg.learning_rate)


def adam_step(state: TrainState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              cfg: OptimizerConfig, decayed: Sequence[str] = ()) -> None:
    """One bias-corrected Adam update, in place.  Names in ``decayed`` get the L2 term 2*lambda*theta."""
    decayed = set(decayed)
    if set(grads) - set(params):
        raise ValueError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))[:3]}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr_t = state.learning_rate * math.sqrt(c2) / c1
    eps_t = cfg.adam_epsilon * math.sqrt(c2)
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        if name in decayed and cfg.l2_factor:
            g = g + (2.0 * cfg.l2_factor) * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        theta -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(theta.dtype, copy=False)


def plateau_scheduler(state: TrainState, val_loss: float, cfg: OptimizerConfig) -> float:
    """Decay the learning rate after ``plateau_patience`` epochs without strict improvement."""
    if val_loss < state.best_val:
        state.best_val = val_loss
        state.plateau_wait = 0
        state.stop_wait = 0
    else:
        state.plateau_wait += 1
        state.stop_wait += 1
        if state.plateau_wait >= cfg.plateau_patience:
            state.learning_rate *= cfg.plateau_factor
            state.plateau_wait = 0
    return state.learning_rate


# ---------------------------------------------------------------------------
# loop


def stack_batch(samples, idx):
    x = np.stack([samples[i].input for i in idx]).astype(np.float32, copy=False)
    y = np.stack([samples[i].truth for i in idx]).astype(np.float32, copy=False)
    return x, y


def evaluate_loss(net, samples, cfg: TrainConfig) -> float:
    losses = []
    for start in range(0, len(samples), cfg.batch_size):
        idx = range(start, min(start + cfg.batch_size, len(samples)))
        x, y = stack_batch(samples, idx)
        pred = net.forward(x, train=False)
        losses.append(dice_loss_per_sample(pred, y, cfg.loss))
    return float(np.concatenate(losses).mean())


def _epoch_order(n: int, count: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if count is None:
        return rng.permutation(n)
    reps = -(-count // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:count]


def write_history_csv(history: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "learning_rate"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["learning_rate"])])


def train(net, train_samples, val_samples, cfg: TrainConfig, rng: np.random.Generator, *,
          checkpoint_path=None, history_path=None, on_epoch: Optional[Callable[[dict], None]] = None):
    """Mini-batch training with per-epoch validation and plateau scheduling.

    The best-validation parameters are restored into ``net`` before
    returning ``(net, history)``.
    """
    from .network import save_checkpoint

    if not train_samples or not val_samples:
        raise TrainingError("training and validation sets must be non-empty")
    val = list(val_samples)
    if cfg.max_val_samples is not None and len(val) > cfg.max_val_samples:
        keep = np.sort(rng.choice(len(val), cfg.max_val_samples, replace=False))
        val = [val[i] for i in keep]
    state = init_state(cfg.optimizer)
    params = net.parameters()
    decayed = net.decayed_names()
    history: List[dict] = []
    best_state = None

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.time()
        state.epoch = epoch
        lr_used = state.learning_rate
        order = _epoch_order(len(train_samples), cfg.samples_per_epoch, rng)
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = stack_batch(train_samples, idx)
            pred = net.forward(x, train=True)
            loss = dice_loss(pred, y, cfg.loss)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
            net.zero_grad()
            net.backward(dice_loss_backward(pred, y, cfg.loss))
            adam_step(state, params, net.gradients(), cfg.optimizer, decayed)
            batch_losses.append(loss * len(idx))
        train_loss = float(sum(batch_losses) / len(order))
        val_loss = evaluate_loss(net, val, cfg)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        improved = val_loss < state.best_val
        plateau_scheduler(state, val_loss, cfg.optimizer)
        state.lr_history.append(lr_used)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "learning_rate": lr_used}
        history.append(row)
        if improved:
            best_state = {k: a.copy() for k, a in net.state().items()}
            if checkpoint_path is not None:
                save_checkpoint(net, checkpoint_path, history=history)
        if history_path is not None:
            write_history_csv(history, history_path)
        logger.info("epoch %d train %.4f val %.4f lr %.3g (%.1fs)", epoch, train_loss, val_loss, lr_used,
                    time.time() - t0)
        if on_epoch is not None:
            on_epoch(row)
        if cfg.stop_train_loss is not None and train_loss < cfg.stop_train_loss:
            break
        if state.stop_wait >= cfg.early_stop_patience:
            break

    if best_state is not None:
        net.load_state(best_state)
    net.train_state = state
    return net, history

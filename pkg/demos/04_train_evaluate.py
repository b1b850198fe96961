"""Train on synthetic lesions, then evaluate Dice and lesion-level FN/FP across thresholds.

The defaults are a short run (a few minutes on one core).  The full
experiment used by the acceptance suite is ``--cases 50 --epochs 40``.

Run:  python3 demos/04_train_evaluate.py [--cases N] [--epochs E]
"""
import argparse
import logging
import time

import numpy as np

from resfcn import cli
from resfcn.data import SyntheticConfig, generate_synthetic, normalize_slices
from resfcn.evaluation import evaluate_masks, predict_dataset, sweep_from_probabilities
from resfcn.training import TrainConfig

ap = argparse.ArgumentParser()
ap.add_argument("--cases", type=int, default=12)
ap.add_argument("--epochs", type=int, default=4)
ap.add_argument("--seed", type=int, default=7)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

cases = generate_synthetic(SyntheticConfig(seed=args.seed, cases=args.cases))
n_test = max(1, args.cases // 5)
train_cases, test_cases = cases[:-n_test], [normalize_slices(c) for c in cases[-n_test:]]

cfg = TrainConfig(max_epochs=args.epochs, samples_per_epoch=320, max_val_samples=128)
t0 = time.time()
net, hist = cli.run_training(train_cases, k=9, seed=args.seed, cfg=cfg)
print(f"trained {len(hist)} epochs in {time.time() - t0:.0f}s")

probs = predict_dataset(net, test_cases)
empty = evaluate_masks({c.case_id: np.zeros_like(c.mask, bool) for c in test_cases}, test_cases)
print(f"all-background baseline: DC={empty.dice:.3f}")
print("delta   DC     m#FN   m#FP")
for r in sweep_from_probabilities(probs, test_cases):
    print(f"{r.delta:.2f}   {r.dice:.3f}  {r.m_fn:.2f}   {r.m_fp:.2f}")

"""Acceptance gate: one test per criterion, each printed as PASS/FAIL in the terminal summary.

Criteria 7 and 8 train the full network and dominate the runtime.
"""
from __future__ import annotations

import filecmp
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import naive_conv2d, numeric_grad, rel_error, union_find_components
from resfcn import cli
from resfcn.data import SyntheticConfig, extract_patches, generate_synthetic, normalize_slices
from resfcn.evaluation import (SWEEP_GRID, binarize, connected_components, count_fn_fp, dice_coefficient,
                               evaluate_masks, predict_dataset, sweep_from_probabilities)
from resfcn.layers import (BatchNormParams, ConvParams, batchnorm_backward, batchnorm_forward, conv2d_backward,
                           conv2d_forward, deconv2d_backward, deconv2d_forward, maxpool2x2_backward,
                           maxpool2x2_forward, relu, relu_backward, sigmoid, sigmoid_backward)
from resfcn.network import build_resfcn
from resfcn.tensor import stream
from resfcn.training import LossConfig, TrainConfig, dice_loss, dice_loss_backward, train

SEEDS = range(20)
GRAD_TOL = 1e-4
FD_STEP = 1e-5


def report(tag, ok, detail):
    print(f"[{tag}] {'PASS' if ok else 'FAIL'}: {detail}")


# ---------------------------------------------------------------------------
# 1. gradient suite


def _grad_check(forward, backward, inputs, rng):
    """Compare analytic gradients of sum(forward(*inputs) * g) against central differences."""
    out = forward(*inputs)
    g = rng.standard_normal(out.shape)
    analytic = backward(*inputs, g)
    worst = 0.0
    for i, arr in enumerate(inputs):
        def f(a, i=i):
            args = list(inputs)
            args[i] = a
            return float(np.sum(forward(*args) * g))
        num = numeric_grad(f, arr.copy(), FD_STEP)
        worst = max(worst, rel_error(analytic[i], num))
    return worst


def _conv_case(rng, stride, d):
    h, w = rng.integers(5, 10, size=2)
    cin, cout = rng.integers(1, 4, size=2)
    x = rng.standard_normal((2, cin, h, w))
    wt = rng.standard_normal((cout, cin, 3, 3))
    b = rng.standard_normal(cout)
    fwd = lambda x, wt, b: conv2d_forward(x, ConvParams(wt, b, stride=stride, dilation=d))
    bwd = lambda x, wt, b, g: conv2d_backward(x, ConvParams(wt, b, stride=stride, dilation=d), g)
    return fwd, bwd, [x, wt, b]


def _deconv_case(rng):
    h, w = rng.integers(2, 6, size=2)
    cin, cout = rng.integers(1, 4, size=2)
    x = rng.standard_normal((2, cin, h, w))
    wt = rng.standard_normal((cin, cout, 3, 3))
    b = rng.standard_normal(cout)
    fwd = lambda x, wt, b: deconv2d_forward(x, ConvParams(wt, b, stride=2))
    bwd = lambda x, wt, b, g: deconv2d_backward(x, ConvParams(wt, b, stride=2), g)
    return fwd, bwd, [x, wt, b]


def _bn_case(rng):
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((3, c, 4, 5)) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
    gamma, beta = rng.standard_normal(c), rng.standard_normal(c)

    def params(gamma, beta):
        p = BatchNormParams.create(c, np.float64)
        p.gamma, p.beta = gamma, beta
        return p

    fwd = lambda x, ga, be: batchnorm_forward(x, params(ga, be), "train", update_stats=False)
    bwd = lambda x, ga, be, g: batchnorm_backward(x, params(ga, be), g)
    return fwd, bwd, [x, gamma, beta]


def _pool_case(rng):
    shape = (2, 2, 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)))
    # distinct values spaced well above the FD step keep every window tie-free
    x = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.01
    fwd = lambda x: maxpool2x2_forward(x)[0]
    bwd = lambda x, g: (maxpool2x2_backward(maxpool2x2_forward(x)[1], g),)
    return fwd, bwd, [x.astype(np.float64)]


def _relu_case(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)
    return relu, lambda x, g: (relu_backward(x, g),), [x]


def _sigmoid_case(rng):
    x = rng.standard_normal((2, 3, 4, 4)) * 3
    return sigmoid, lambda x, g: (sigmoid_backward(sigmoid(x), g),), [x]


def _dice_case(rng):
    p = rng.uniform(0.05, 0.95, size=(3, 1, 5, 5))
    t = (rng.random((3, 1, 5, 5)) < 0.3).astype(np.float64)
    cfg = LossConfig(float(rng.choice([1e-3, 1.0])))
    fwd = lambda p: np.array(dice_loss(p, t, cfg))
    bwd = lambda p, g: (dice_loss_backward(p, t, cfg) * g,)
    return fwd, bwd, [p]


def test_criterion_1_gradient_suite():
    t0 = time.time()
    worst = {}
    cases = {f"conv d={d} stride={s}": (lambda r, s=s, d=d: _conv_case(r, s, d)) for d in (1, 2, 4) for s in (1, 2)}
    cases.update(deconv=_deconv_case, batchnorm=_bn_case, maxpool=_pool_case, relu=_relu_case,
                 sigmoid=_sigmoid_case, dice_loss=_dice_case)
    for name, make in cases.items():
        errs = []
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            fwd, bwd, inputs = make(rng)
            errs.append(_grad_check(fwd, bwd, inputs, rng))
        worst[name] = max(errs)
    elapsed = time.time() - t0
    ok = all(e <= GRAD_TOL for e in worst.values())
    report("1", ok, ", ".join(f"{k}: {v:.1e}" for k, v in worst.items()) + f" ({elapsed:.0f}s)")
    assert ok, worst
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. convolution oracle


def test_criterion_2_convolution_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        bsz = int(rng.integers(1, 3))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        kh, kw = (int(v) for v in rng.choice([1, 3, 5], size=2))
        stride, d = int(rng.choice([1, 2])), int(rng.choice([1, 2, 4]))
        h, w = (int(v) for v in rng.integers(4, 12, size=2))
        x = rng.standard_normal((bsz, cin, h, w)).astype(np.float32)
        wt = rng.standard_normal((cout, cin, kh, kw)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        got = conv2d_forward(x, ConvParams(wt, b, stride=stride, dilation=d))
        ref = naive_conv2d(x, wt, b, stride, d)
        assert got.shape == ref.shape
        worst = max(worst, float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-12)))
    # d = 1 against conventional direct convolution: integer-valued data makes every
    # partial sum exact, so any correct summation order must agree bit for bit
    bitwise = True
    for _ in range(20):
        x = rng.integers(-4, 5, size=(2, 3, 9, 8)).astype(np.float64)
        wt = rng.integers(-3, 4, size=(4, 3, 3, 3)).astype(np.float64)
        b = rng.integers(-2, 3, size=4).astype(np.float64)
        atrous = conv2d_forward(x, ConvParams(wt, b, stride=1, dilation=1))
        bitwise &= np.array_equal(atrous, naive_conv2d(x, wt, b, 1, 1))
        bitwise &= np.array_equal(atrous, conv2d_forward(x, ConvParams(wt, b)))
    ok = worst <= 1e-5 and bitwise
    report("2", ok, f"max relative deviation {worst:.2e} over 100 configs; d=1 bitwise: {bitwise}")
    assert ok


# ---------------------------------------------------------------------------
# 3. architecture conformance

EXPECTED_CHAIN = [
    ("input", (2, 3, 64, 64)),
    ("conv_block", (2, 32, 64, 64)),
    ("max_pooling", (2, 32, 32, 32)),
    ("res_block1", (2, 256, 16, 16)),
    ("res_block2", (2, 512, 8, 8)),
    ("res_block3", (2, 1024, 4, 4)),
    ("res_block4", (2, 2048, 4, 4)),
    ("deconv1", (2, 21, 8, 8)),
    ("deconv2", (2, 21, 16, 16)),
    ("deconv3", (2, 21, 32, 32)),
    ("deconv4", (2, 21, 64, 64)),
    ("conv", (2, 1, 64, 64)),
]


def test_criterion_3_architecture_conformance():
    net = build_resfcn(9, np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((2, 3, 64, 64)).astype(np.float32)
    y = net.forward(x, train=False)
    chain_ok = net.trace == EXPECTED_CHAIN
    range_ok = bool(np.all((y > 0) & (y < 1)))
    report("3", chain_ok and range_ok, f"chain match {chain_ok}, output in (0,1) {range_ok}")
    assert chain_ok, net.trace
    assert range_ok


# ---------------------------------------------------------------------------
# 4. loss properties


def test_criterion_4_loss_properties():
    rng = np.random.default_rng(5)
    lo, hi = 0.0, -1.0
    for _ in range(1000):
        shape = (int(rng.integers(1, 4)), 1, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        p = rng.random(shape)
        t = (rng.random(shape) < rng.random()).astype(np.float64)
        v = dice_loss(p, t, LossConfig(float(rng.choice([1e-6, 1e-3, 1.0]))))
        lo, hi = min(lo, v), max(hi, v)
    in_range = -1.0 <= lo and hi < 0.0
    t = (rng.random((2, 1, 8, 8)) < 0.3).astype(np.float64)
    perfect = dice_loss(t.copy(), t)
    empty = dice_loss(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))
    # |A| = 4, |B| = 6, |A n B| = 3
    a = np.zeros((1, 1, 4, 4)); a.flat[[0, 1, 2, 3]] = 1
    b = np.zeros((1, 1, 4, 4)); b.flat[[1, 2, 3, 4, 5, 6]] = 1
    micro = dice_loss(b, a, LossConfig(1e-9))
    ok = in_range and perfect == -1.0 and empty == -1.0 and abs(micro + 0.6) <= 1e-6
    report("4", ok, f"range [{lo:.4f}, {hi:.4f}], perfect {perfect}, empty {empty}, micro {micro:.9f}")
    assert ok


# ---------------------------------------------------------------------------
# 5. metrics oracle


def test_criterion_5_metrics_oracle():
    rng = np.random.default_rng(6)
    exact = True
    for _ in range(200):
        vol = rng.random((16, 16, 16)) < rng.uniform(0.02, 0.3)
        labels, n = connected_components(vol)
        comps = union_find_components(vol)
        exact &= n == len(comps)
        # partitions must coincide: every oracle component maps to exactly one label, all distinct
        seen = set()
        for comp in comps:
            labs = {int(labels[p]) for p in comp}
            exact &= len(labs) == 1 and 0 not in labs
            seen |= labs
        exact &= len(seen) == n and int((labels > 0).sum()) == int(vol.sum())
    a = np.zeros(10, bool); a[:4] = True
    b = np.zeros(10, bool); b[1:7] = True
    dice_case = dice_coefficient(b, a)
    fn_tp_ok = True
    for _ in range(50):
        truth = rng.random((6, 10, 10)) < 0.05
        pred = rng.random((6, 10, 10)) < 0.05
        fn, fp, tp = count_fn_fp(pred, truth)
        fn_tp_ok &= fn + tp == len(union_find_components(truth))
    ok = exact and abs(dice_case - 0.6) < 1e-12 and fn_tp_ok
    report("5", ok, f"labeling exact {exact}, hand dice {dice_case}, FN+TP consistent {fn_tp_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 6. sweep invariant


def _sweep_invariants(probs, cases):
    nested = True
    for cid, p in probs.items():
        masks = [binarize(p, d) for d in SWEEP_GRID]
        nested &= all(np.all(hi <= lo) for lo, hi in zip(masks, masks[1:]))
    rows = sweep_from_probabilities(probs, cases)
    fn = [r.m_fn for r in rows]
    return nested, all(b >= a for a, b in zip(fn, fn[1:])), rows


def test_criterion_6_sweep_invariant():
    cfg = SyntheticConfig(seed=11, cases=5, slices=4)
    cases = [normalize_slices(c) for c in generate_synthetic(cfg)]
    net = build_resfcn(9, np.random.default_rng(6))
    # a small random scoring layer spreads the probabilities over the whole grid
    w = net.parameters()["head.weight"]
    w[...] = 1e-3 * np.random.default_rng(66).standard_normal(w.shape)
    probs = predict_dataset(net, cases, stride=64)
    nested, monotone, rows = _sweep_invariants(probs, cases)
    sizes = [sum(int(binarize(p, d).sum()) for p in probs.values()) for d in SWEEP_GRID]
    spread = len(set(sizes)) == len(sizes)
    ok = nested and monotone and spread
    report("6", ok, f"random network: nested {nested}, m#FN monotone {monotone}, mask sizes distinct {spread}: "
           + " ".join(f"{r.m_fn:g}" for r in rows))
    assert ok


# ---------------------------------------------------------------------------
# 7. end-to-end synthetic experiment

E2E_SEED = 7
E2E_TRAIN = TrainConfig(max_epochs=26, samples_per_epoch=320, max_val_samples=128, early_stop_patience=15)


@pytest.fixture(scope="module")
def e2e():
    cases = generate_synthetic(SyntheticConfig(seed=E2E_SEED, cases=50))
    train_cases, test_cases = cases[:40], [normalize_slices(c) for c in cases[40:]]
    t0 = time.time()
    net, hist = cli.run_training(train_cases, k=9, seed=E2E_SEED, split="case", cfg=E2E_TRAIN)
    train_s = time.time() - t0
    probs = predict_dataset(net, test_cases, stride=32)
    return dict(net=net, history=hist, cases=test_cases, probs=probs, seconds=time.time() - t0, train_s=train_s)


def test_criterion_7_end_to_end(e2e):
    cases, probs = e2e["cases"], e2e["probs"]
    baseline = evaluate_masks({c.case_id: np.zeros_like(c.mask, bool) for c in cases}, cases).dice
    nested, monotone, rows = _sweep_invariants(probs, cases)
    by = {r.delta: r for r in rows}
    r5, r95 = by[0.5], by[0.95]
    best = max(rows, key=lambda r: r.dice)
    checks = {
        "baseline dice ~ 0": baseline < 0.01,
        "dice(0.5) >= 0.60": r5.dice >= 0.60,
        "m#FN(0.5) <= 1.0": r5.m_fn <= 1.0,
        "m#FN(0.95) > m#FN(0.5)": r95.m_fn > r5.m_fn,
        "some delta with dice >= dice(0.5)": best.dice >= r5.dice,
        "runtime <= 45 min": e2e["seconds"] <= 45 * 60,
    }
    detail = (f"baseline {baseline:.3f}; delta=0.5 DC {r5.dice:.3f} m#FN {r5.m_fn:.2f} m#FP {r5.m_fp:.2f}; "
              f"delta=0.95 DC {r95.dice:.3f} m#FN {r95.m_fn:.2f} m#FP {r95.m_fp:.2f}; best delta {best.delta} "
              f"DC {best.dice:.3f}; {len(e2e['history'])} epochs, {e2e['seconds'] / 60:.1f} min")
    report("7", all(checks.values()), detail + "; failed: " + str([k for k, v in checks.items() if not v]))
    assert all(checks.values()), checks


def test_sweep_invariant_on_trained_network(e2e):
    nested, monotone, _ = _sweep_invariants(e2e["probs"], e2e["cases"])
    assert nested and monotone


# ---------------------------------------------------------------------------
# 8. overfit sanity


def test_criterion_8_overfit():
    cases = [normalize_slices(c) for c in generate_synthetic(SyntheticConfig(seed=8, cases=2))]
    patches = [s for c in cases for s in extract_patches(c)]
    pick = np.random.default_rng(8).choice(len(patches), 50, replace=False)
    fixed = [patches[i] for i in sorted(pick)]
    cfg = TrainConfig(max_epochs=200, early_stop_patience=200, stop_train_loss=-0.9)
    net = build_resfcn(9, stream(8, "init"))
    _, hist = train(net, fixed, fixed, cfg, stream(8, "train"))
    best = min(r["train_loss"] for r in hist)
    ok = best < -0.9
    report("8", ok, f"best train loss {best:.4f} after {len(hist)} epochs")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism


def _pipeline(root: Path):
    data, ck = root / "data", root / "net.ckpt"
    argv = [
        ["gen", "--cases", "6", "--slices", "6", "--seed", "9", "--out", str(data)],
        ["train", "--data", str(data), "--checkpoint", str(ck), "--seed", "9", "--max-epochs", "2",
         "--samples-per-epoch", "16", "--batch", "8", "--max-val-samples", "16", "--width", "0.125",
         "--out", str(root / "history.csv")],
        ["eval", "--data", str(data), "--checkpoint", str(ck), "--stride", "64", "--out", str(root / "eval.csv")],
        ["sweep", "--data", str(data), "--checkpoint", str(ck), "--stride", "64", "--out", str(root / "sweep.csv")],
    ]
    for a in argv:
        assert cli.main(a) == 0, a


def test_criterion_9_determinism(tmp_path):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    a, b = tmp_path / "a", tmp_path / "b"
    names = sorted(p.name for p in (a / "data").iterdir())
    same_data = filecmp.cmpfiles(a / "data", b / "data", names, shallow=False)[0] == names
    same_hist = (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    same_eval = all((a / f).read_bytes() == (b / f).read_bytes() for f in ("eval.csv", "sweep.csv"))
    ok = same_data and same_hist and same_eval
    report("9", ok, f"dataset {same_data}, history {same_hist}, eval/sweep {same_eval}")
    assert ok

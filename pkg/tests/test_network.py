import json

import numpy as np
import pytest

from resfcn.layers import LayerError
from resfcn.network import (ArchitectureMismatch, CheckpointError, TruncatedCheckpoint, backward, build_resfcn,
                            forward, load_checkpoint, read_checkpoint, save_checkpoint, table2_chain)


@pytest.fixture(scope="module")
def small_net():
    return build_resfcn(5, np.random.default_rng(0), width=0.0625, channels=3, input_size=32)


def test_full_network_size_and_chain():
    net = build_resfcn(9, np.random.default_rng(0))
    assert net.parameter_count() == 24_722_790
    chain = [(n, s) for n, s in table2_chain()]
    assert chain[3] == ("res_block1", (256, 16, 16)) and chain[6] == ("res_block4", (2048, 4, 4))


@pytest.mark.parametrize("k", [5, 7, 9])
def test_k_recorded(k):
    net = build_resfcn(k, np.random.default_rng(0), width=0.0625)
    assert net.config()["k"] == k
    assert net.parameters()["top.0.a.0.weight"].shape[-1] == k


def test_invalid_k_and_input(small_net):
    with pytest.raises(LayerError):
        build_resfcn(4)
    with pytest.raises(LayerError):
        small_net.forward(np.zeros((1, 3, 16, 16), np.float32))
    with pytest.raises(LayerError):
        forward(small_net, np.zeros((1, 3, 32, 32), np.float32), mode="eval")


def test_trace_matches_reduced_chain(small_net):
    small_net.forward(np.random.default_rng(1).standard_normal((2, 3, 32, 32)).astype(np.float32), train=False)
    expected = [(n, (2,) + s) for n, s in table2_chain(32, 3, 0.0625)]
    assert small_net.trace == expected


def test_network_gradient_directional():
    """Whole-network backward against a float64 directional central difference.

    The step is 1e-7 rather than 1e-5: across a deep ReLU/max-pool stack the
    larger step straddles activation kinks and the difference quotient stops
    being a derivative.
    """
    h = 1e-7
    rng = np.random.default_rng(2)
    net = build_resfcn(3, rng, width=0.0625, channels=2, input_size=32, dtype=np.float64, allow_any_k=True)
    x = rng.standard_normal((3, 3, 32, 32))
    g_out = rng.standard_normal((3, 1, 32, 32))
    params = net.parameters()
    # the scoring layer starts at zero, which would zero every upstream gradient
    params["head.weight"][...] = rng.standard_normal(params["head.weight"].shape)

    def loss():
        return float(np.sum(net.forward(x, train=True) * g_out))

    loss()
    grads = backward(net, g_out)
    for name in ["entry.conv1.0.weight", "stage2.0.conv2.0.weight", "stage4.2.bn3.gamma", "tap0.0.a.0.weight",
                 "deconv2.weight", "fuse1.body.2.bias", "head.weight"]:
        d = rng.standard_normal(params[name].shape)
        base = params[name].copy()
        params[name][...] = base + h * d
        fp = loss()
        params[name][...] = base - h * d
        fm = loss()
        params[name][...] = base
        num = (fp - fm) / (2 * h)
        ana = float(np.sum(grads[name] * d))
        # absolute slack covers round-off in the difference quotient, about eps * |loss| / h
        assert abs(num - ana) <= 1e-5 * max(abs(num), abs(ana)) + 1e-5, name


def test_untrained_output_near_half():
    x = np.random.default_rng(5).standard_normal((2, 3, 64, 64)).astype(np.float32)
    for seed in range(10):
        net = build_resfcn(9, np.random.default_rng(seed))
        for train in (True, False):
            y = net.forward(x, train=train)
            assert y.shape == (2, 1, 64, 64) and abs(float(y.mean()) - 0.5) < 0.2
    assert not np.any(net.parameters()["head.weight"])
    assert np.any(net.parameters()["refine.body.2.weight"])


def test_infer_mode_is_deterministic_and_leaves_stats(small_net):
    x = np.random.default_rng(3).standard_normal((2, 3, 32, 32)).astype(np.float32)
    before = {k: v.copy() for k, v in small_net.buffers().items()}
    a = small_net.forward(x, train=False)
    b = small_net.forward(x, train=False)
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], v) for k, v in small_net.buffers().items())
    assert np.all((a > 0) & (a < 1))


def test_checkpoint_round_trip(tmp_path, small_net):
    path = save_checkpoint(small_net, tmp_path / "n.ckpt", history=[{"epoch": 1}], metadata={"created": "x"})
    net2 = load_checkpoint(path, k=5)
    assert net2.manifest["history"] == [{"epoch": 1}] and net2.manifest["created"] == "x"
    for name, arr in small_net.state().items():
        assert np.array_equal(arr, net2.state()[name])
    x = np.random.default_rng(4).standard_normal((1, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(small_net.forward(x, train=False), net2.forward(x, train=False))
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(path, k=9)


def test_checkpoint_errors(tmp_path, small_net):
    path = save_checkpoint(small_net, tmp_path / "n.ckpt")
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(TruncatedCheckpoint):
        read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE\n" + raw)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.ckpt")
    # tamper with the recorded hash
    head, rest = raw.split(b"\n", 1)
    manifest, blobs = rest.split(b"\n", 1)
    m = json.loads(manifest)
    m["arch_hash"] = "0" * 64
    (tmp_path / "h.ckpt").write_bytes(head + b"\n" + json.dumps(m).encode() + b"\n" + blobs)
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(tmp_path / "h.ckpt")

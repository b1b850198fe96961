"""Res-FCN assembly, end-to-end forward/backward and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"RESFCN-CKPT\\n"
    <manifest: one line of UTF-8 JSON terminated by b"\\n">
    <blob 0><blob 1>...   raw float32 little-endian, in manifest order

The manifest carries ``version`` (currently 1), ``arch_hash``, ``k``,
``channels``, ``input_size``, ``width``, ``created``, ``history`` and a
``tensors`` list of ``{"name", "shape", "offset", "nbytes"}`` records with
offsets relative to the first byte after the manifest line.  Parameters and
batch-norm running statistics are both stored.
"""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .blocks import AtrousStack, BoundaryRefinement, GcnBr, GcnSpec, ResStage
from .layers import Conv2d, Deconv2d, LayerError, MaxPool2x2, Module, Sigmoid, swap_bc
from .tensor import check_finite

SCORE_CHANNELS = 21
GCN_KERNELS = (5, 7, 9)
ENTRY_FILTERS = 32
CKPT_MAGIC = b"RESFCN-CKPT\n"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


def _nchw(t: np.ndarray) -> tuple:
    return (t.shape[1], t.shape[0]) + t.shape[2:]


class ResFCN(Module):
    """Residual fully convolutional network for binary lesion segmentation.

    ``width`` scales every filter count and only exists for reduced test
    variants; the default 1.0 is the full network.
    """

    def __init__(self, k: int = 9, rng: Optional[np.random.Generator] = None, *, channels: int = SCORE_CHANNELS,
                 input_size: int = 64, width: float = 1.0, dtype=np.float32, allow_any_k: bool = False):
        super().__init__()
        if not allow_any_k and k not in GCN_KERNELS:
            raise LayerError(f"unsupported GCN kernel size {k}; expected one of {GCN_KERNELS}")
        if input_size % 16:
            raise LayerError("input size must be divisible by 16")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k, self.channels, self.input_size, self.width = k, channels, input_size, width
        self.dtype = np.dtype(dtype)
        gspec = GcnSpec(k, channels)
        kw = dict(rng=rng, dtype=dtype)
        entry = max(1, int(round(ENTRY_FILTERS * width)))

        self.entry = self.add("entry", AtrousStack(3, entry, **kw))
        self.pool = self.add("pool", MaxPool2x2())
        stages, ch, taps = [], entry, [entry]
        for i in range(1, 5):
            st = self.add(f"stage{i}", ResStage(i, ch, width, **kw))
            stages.append(st)
            ch = st.out_channels
            taps.append(ch)
        self.stages = stages
        # taps: pool output, stage1, stage2 feed the decoder levels 32^2, 16^2, 8^2
        self.top = self.add("top", GcnBr(taps[4], gspec, **kw))
        self.deconv = [self.add(f"deconv{i}", Deconv2d(channels, channels, 3, **kw)) for i in range(1, 5)]
        self.tap = [
            self.add("tap2", GcnBr(taps[2], gspec, **kw)),
            self.add("tap1", GcnBr(taps[1], gspec, **kw)),
            self.add("tap0", GcnBr(taps[0], gspec, **kw)),
        ]
        self.fuse = [self.add(f"fuse{i}", BoundaryRefinement(channels, **kw)) for i in range(1, 4)]
        self.refine = self.add("refine", BoundaryRefinement(channels, **kw))
        self.head = self.add("head", Conv2d(channels, 1, 1, **kw))
        # zero scoring layer: an untrained net predicts 0.5 everywhere instead of
        # a large random offset; gradients still reach it on the first step
        self.head.p.weight[...] = 0
        self.sigmoid = self.add("sigmoid", Sigmoid())
        self.trace: List[Tuple[str, tuple]] = []

    # -- passes -------------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        n = self.input_size
        if x.ndim != 4 or x.shape[1:] != (3, n, n):
            raise LayerError(f"expected input (B,3,{n},{n}), got {x.shape}")
        trace = [("input", x.shape)]
        # modules run channel-major (C,B,H,W)
        x = swap_bc(x.astype(self.dtype, copy=False))
        e = self.entry.forward(x, train)
        trace.append(("conv_block", _nchw(e)))
        p = self.pool.forward(e, train)
        trace.append(("max_pooling", _nchw(p)))
        feats = [p]
        h = p
        for i, st in enumerate(self.stages, 1):
            h = st.forward(h, train)
            trace.append((f"res_block{i}", _nchw(h)))
            feats.append(h)
        d = self.top.forward(h, train)
        # feats: [pool, s1, s2, s3, s4]; decoder fuses s2, s1, pool
        for level in range(4):
            d = self.deconv[level].forward(d, train)
            trace.append((f"deconv{level + 1}", _nchw(d)))
            if level < 3:
                t = self.tap[level].forward(feats[2 - level], train)
                d = self.fuse[level].forward(d + t, train)
        d = self.refine.forward(d, train)
        z = self.head.forward(d, train)
        y = swap_bc(self.sigmoid.forward(z, train))
        trace.append(("conv", y.shape))
        self.trace = trace
        return check_finite(y, "network output")

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Backpropagate d(loss)/d(output); parameter gradients land in ``grads``."""
        g = self.sigmoid.backward(swap_bc(grad_out.astype(self.dtype, copy=False)))
        g = self.head.backward(g)
        g = self.refine.backward(g)
        tap_grads = [None, None, None]
        for level in reversed(range(4)):
            if level < 3:
                g = self.fuse[level].backward(g)
                tap_grads[level] = self.tap[level].backward(g)
            g = self.deconv[level].backward(g)
        g = self.top.backward(g)
        # stages 4..1; tap into stage-i output joins before that stage's backward
        for i in reversed(range(4)):
            if i == 1:
                g = g + tap_grads[0]  # stage2 output
            elif i == 0:
                g = g + tap_grads[1]  # stage1 output
            g = self.stages[i].backward(g)
        g = g + tap_grads[2]  # pool output
        g = self.pool.backward(g)
        g = self.entry.backward(g)
        self.clear_cache()
        return swap_bc(g)

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> Dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def buffers(self) -> Dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def gradients(self) -> Dict[str, np.ndarray]:
        return dict(self.named_grads())

    def state(self) -> Dict[str, np.ndarray]:
        out = self.parameters()
        out.update(self.buffers())
        return out

    def load_state(self, state: Dict[str, np.ndarray]):
        mine = self.state()
        if set(mine) != set(state):
            raise ArchitectureMismatch("parameter names differ")
        for name, arr in mine.items():
            if arr.shape != tuple(state[name].shape):
                raise ArchitectureMismatch(f"{name}: shape {state[name].shape} != {arr.shape}")
        for name, arr in mine.items():
            arr[...] = state[name]

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.parameters().values()))

    def config(self) -> dict:
        return {"k": self.k, "channels": self.channels, "input_size": self.input_size, "width": self.width}

    def arch_hash(self) -> str:
        desc = {"config": self.config(), "tensors": [[n, list(a.shape)] for n, a in self.state().items()]}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()


def build_resfcn(k: int = 9, rng: Optional[np.random.Generator] = None, **kwargs) -> ResFCN:
    return ResFCN(k, rng, **kwargs)


def forward(net: ResFCN, x: np.ndarray, mode: str = "train") -> np.ndarray:
    if mode not in ("train", "infer"):
        raise LayerError(f"unknown mode {mode!r}")
    return net.forward(x, train=mode == "train")


def backward(net: ResFCN, loss_grad: np.ndarray) -> Dict[str, np.ndarray]:
    net.zero_grad()
    net.backward(loss_grad)
    return net.gradients()


def table2_chain(input_size: int = 64, channels: int = SCORE_CHANNELS, width: float = 1.0) -> List[Tuple[str, tuple]]:
    """Expected per-layer output shapes (C,H,W), with 4n channels on the Res-blocks."""
    n = input_size
    entry = max(1, int(round(ENTRY_FILTERS * width)))
    res = [4 * max(1, int(round(f * width))) for _, f, _ in ((3, 64, 0), (4, 128, 0), (6, 256, 0), (3, 512, 0))]
    return [
        ("input", (3, n, n)),
        ("conv_block", (entry, n, n)),
        ("max_pooling", (entry, n // 2, n // 2)),
        ("res_block1", (res[0], n // 4, n // 4)),
        ("res_block2", (res[1], n // 8, n // 8)),
        ("res_block3", (res[2], n // 16, n // 16)),
        ("res_block4", (res[3], n // 16, n // 16)),
        ("deconv1", (channels, n // 8, n // 8)),
        ("deconv2", (channels, n // 4, n // 4)),
        ("deconv3", (channels, n // 2, n // 2)),
        ("deconv4", (channels, n, n)),
        ("conv", (1, n, n)),
    ]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: ResFCN, path, history: Optional[list] = None, metadata: Optional[dict] = None) -> Path:
    if net.dtype != np.float32:
        raise CheckpointError("checkpoints store float32 networks only")
    path = Path(path)
    records, blobs, offset = [], [], 0
    for name, arr in net.state().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        records.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "version": CKPT_VERSION,
        "arch_hash": net.arch_hash(),
        **net.config(),
        "created": metadata.get("created") if metadata and "created" in metadata else time.strftime("%Y-%m-%dT%H:%M:%S"),
        "metadata": metadata or {},
        "history": history or [],
        "tensors": records,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Parse a checkpoint into (manifest, named arrays) without building a network."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError("not a Res-FCN checkpoint")
    end = raw.find(b"\n", len(CKPT_MAGIC))
    if end < 0:
        raise TruncatedCheckpoint("manifest line is incomplete")
    try:
        manifest = json.loads(raw[len(CKPT_MAGIC):end].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from None
    if manifest.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    body = memoryview(raw)[end + 1:]
    expected = sum(r["nbytes"] for r in manifest["tensors"])
    if len(body) != expected:
        raise TruncatedCheckpoint(f"blob section has {len(body)} bytes, manifest declares {expected}")
    arrays = {}
    for r in manifest["tensors"]:
        n = int(np.prod(r["shape"])) if r["shape"] else 1
        if r["nbytes"] != 4 * n:
            raise TruncatedCheckpoint(f"{r['name']}: blob length does not match shape")
        chunk = body[r["offset"]:r["offset"] + r["nbytes"]]
        arrays[r["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(r["shape"]).astype(np.float32)
    return manifest, arrays


def load_checkpoint(path, k: Optional[int] = None) -> ResFCN:
    """Rebuild the network recorded in ``path``; ``k`` asserts the expected GCN size."""
    manifest, arrays = read_checkpoint(path)
    if k is not None and manifest["k"] != k:
        raise ArchitectureMismatch(f"checkpoint has GCN k={manifest['k']}, expected k={k}")
    net = ResFCN(manifest["k"], np.random.default_rng(0), channels=manifest["channels"],
                 input_size=manifest["input_size"], width=manifest["width"])
    if net.arch_hash() != manifest["arch_hash"]:
        raise ArchitectureMismatch("architecture hash does not match manifest")
    net.load_state(arrays)
    net.manifest = manifest
    return net

"""Multi-modal volumes: MVOL files, slice normalization, patches and synthetic cases.

MVOL v1 layout::

    b"MVOL v1\\n"
    <header: one line of UTF-8 JSON terminated by b"\\n">
    <one float32 little-endian blob per modality, Z*H*W*4 bytes each>
    <mask blob, Z*H*W bytes, each 0 or 1>

Header keys: ``version`` (1), ``case_id``, ``shape`` ([Z, H, W]),
``modalities`` (names in blob order; empty for mask-only files),
``spacing`` (mm, informational), ``dtype`` ("f32le") and ``mask_dtype``
("u8").  Blob lengths are implied by the shape; any other file length is an
error.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

MODALITIES = ("DWI", "ADC", "T2WI")
MVOL_MAGIC = b"MVOL v1\n"


class VolumeError(ValueError):
    pass


class TruncatedVolume(VolumeError):
    pass


@dataclass
class VolumeCase:
    """One subject: ``images`` is (3, Z, H, W) float32 in DWI, ADC, T2WI order."""

    case_id: str
    images: np.ndarray
    mask: np.ndarray
    spacing: Tuple[float, float, float] = (5.0, 1.77, 1.77)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[0] != len(MODALITIES):
            raise VolumeError(f"images must be (3, Z, H, W), got {self.images.shape}")
        if self.mask.shape != self.images.shape[1:]:
            raise VolumeError(f"mask shape {self.mask.shape} != modality shape {self.images.shape[1:]}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise VolumeError("mask must be binary")
        self.mask = self.mask.astype(np.uint8, copy=False)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.mask.shape)

    def modality(self, name: str) -> np.ndarray:
        return self.images[MODALITIES.index(name)]


# ---------------------------------------------------------------------------
# MVOL files


def _write_mvol(path, case_id, shape, spacing, images: Optional[np.ndarray], mask: np.ndarray):
    header = {
        "version": 1,
        "case_id": case_id,
        "shape": list(shape),
        "modalities": list(MODALITIES) if images is not None else [],
        "spacing": [float(s) for s in spacing],
        "dtype": "f32le",
        "mask_dtype": "u8",
    }
    with open(path, "wb") as fh:
        fh.write(MVOL_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        if images is not None:
            for img in images:
                fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def _read_mvol(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(MVOL_MAGIC):
        raise VolumeError(f"{path}: not an MVOL v1 file")
    end = raw.find(b"\n", len(MVOL_MAGIC))
    if end < 0:
        raise VolumeError(f"{path}: header line is not terminated")
    try:
        header = json.loads(raw[len(MVOL_MAGIC):end].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        names = list(header["modalities"])
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeError(f"{path}: malformed header ({exc})") from None
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeError(f"{path}: invalid shape {shape}")
    if header.get("dtype") != "f32le" or header.get("mask_dtype", "u8") != "u8":
        raise VolumeError(f"{path}: unsupported dtype tag")
    if names and tuple(names) != MODALITIES:
        raise VolumeError(f"{path}: modalities must be {MODALITIES}, got {names}")
    n = int(np.prod(shape))
    body = raw[end + 1:]
    expected = len(names) * 4 * n + n
    if len(body) != expected:
        raise TruncatedVolume(f"{path}: data section has {len(body)} bytes, header implies {expected}")
    images = None
    if names:
        images = np.frombuffer(body, dtype="<f4", count=len(names) * n).reshape((len(names),) + shape)
        images = images.astype(np.float32)
    mask = np.frombuffer(body, dtype=np.uint8, offset=len(names) * 4 * n).reshape(shape).copy()
    if mask.max(initial=0) > 1:
        raise VolumeError(f"{path}: mask contains values other than 0 and 1")
    return header, images, mask


def save_volume(case: VolumeCase, path) -> Path:
    _write_mvol(path, case.case_id, case.shape, case.spacing, case.images, case.mask)
    return Path(path)


def load_volume(path) -> VolumeCase:
    header, images, mask = _read_mvol(path)
    if images is None:
        raise VolumeError(f"{path}: mask-only file has no modality data")
    return VolumeCase(header["case_id"], images, mask, tuple(header.get("spacing", (1.0, 1.0, 1.0))))


def save_mask(path, case_id: str, mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    """Write a mask-only MVOL file (no modality blobs)."""
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise VolumeError("mask must be binary")
    _write_mvol(path, case_id, mask.shape, spacing, None, mask)
    return Path(path)


def load_mask(path) -> Tuple[str, np.ndarray]:
    header, _, mask = _read_mvol(path)
    return header["case_id"], mask


# ---------------------------------------------------------------------------
# preprocessing


def normalize_slices(case: VolumeCase) -> VolumeCase:
    """Z-score every slice of every modality; constant slices become zeros."""
    img = case.images.astype(np.float64)
    mean = img.mean(axis=(2, 3), keepdims=True)
    std = img.std(axis=(2, 3), keepdims=True)
    safe = np.where(std > 1e-8, std, 1.0)
    out = np.where(std > 1e-8, (img - mean) / safe, 0.0)
    return replace(case, images=out.astype(np.float32), mask=case.mask.copy())


@dataclass(frozen=True)
class PatchSpec:
    size: int = 64
    lesion_only: bool = True

    def __post_init__(self):
        if self.size < 8 or self.size % 8:
            raise ValueError("patch size must be a positive multiple of 8")

    @property
    def stride(self) -> int:
        return self.size // 8


@dataclass
class PatchSample:
    """``input`` (3,N,N) and ``truth`` (1,N,N); both may be views into the source case."""

    input: np.ndarray
    truth: np.ndarray
    provenance: Tuple[str, int, int, int]
    transform: str = "identity"


def window_offsets(extent: int, size: int, stride: int) -> List[int]:
    return list(range(0, extent - size + 1, stride))


def extract_patches(case: VolumeCase, spec: PatchSpec = PatchSpec()) -> List[PatchSample]:
    """Sliding-window patches at offsets 0, stride, 2*stride, ... fully inside each slice."""
    n, s = spec.size, spec.stride
    _, z, h, w = case.images.shape
    truth = case.mask.astype(np.float32)
    rows, cols = window_offsets(h, n, s), window_offsets(w, n, s)
    if spec.lesion_only:
        # lesion pixels per window via a summed-area table
        sat = np.zeros((z, h + 1, w + 1), dtype=np.int64)
        sat[:, 1:, 1:] = case.mask.astype(np.int64).cumsum(1).cumsum(2)
    out = []
    for k in range(z):
        if spec.lesion_only and not case.mask[k].any():
            continue
        for r in rows:
            for c in cols:
                if spec.lesion_only:
                    cnt = sat[k, r + n, c + n] - sat[k, r, c + n] - sat[k, r + n, c] + sat[k, r, c]
                    if cnt == 0:
                        continue
                out.append(PatchSample(case.images[:, k, r:r + n, c:c + n], truth[k:k + 1, r:r + n, c:c + n],
                                       (case.case_id, k, r, c)))
    return out


def hflip(s: PatchSample) -> PatchSample:
    return PatchSample(np.flip(s.input, -1), np.flip(s.truth, -1), s.provenance, s.transform + "+hflip")


def rot90(s: PatchSample, k: int) -> PatchSample:
    return PatchSample(np.rot90(s.input, k, axes=(-2, -1)), np.rot90(s.truth, k, axes=(-2, -1)),
                       s.provenance, s.transform + f"+rot{90 * k}")


def augment(samples: Sequence[PatchSample], rng: np.random.Generator, rotations: str = "random") -> List[PatchSample]:
    """Each sample plus its horizontal flip and right-angle rotation(s).

    ``rotations="random"`` adds one rotation by 90, 180 or 270 degrees drawn
    per sample; ``"all"`` adds all three.
    """
    if rotations not in ("random", "all"):
        raise ValueError("rotations must be 'random' or 'all'")
    out = []
    for s in samples:
        out.append(s)
        out.append(hflip(s))
        ks = (1, 2, 3) if rotations == "all" else (int(rng.integers(1, 4)),)
        out.extend(rot90(s, k) for k in ks)
    return out


def split_train_val(samples: Sequence, fraction: float = 0.1, rng: Optional[np.random.Generator] = None):
    """Disjoint random split; ``round(fraction * n)`` items go to validation."""
    if len(samples) < 10:
        raise ValueError(f"need at least 10 samples to split, got {len(samples)}")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(fraction * len(samples))))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def split_cases(cases: Sequence[VolumeCase], fraction: float = 0.1, rng: Optional[np.random.Generator] = None):
    """Case-level split so no subject contributes to both sides."""
    if len(cases) < 2:
        raise ValueError("need at least 2 cases for a case-level split")
    rng = rng if rng is not None else np.random.default_rng(0)
    order = rng.permutation(len(cases))
    n_val = min(len(cases) - 1, max(1, int(round(fraction * len(cases)))))
    val_idx = set(order[:n_val].tolist())
    return ([c for i, c in enumerate(cases) if i not in val_idx],
            [c for i, c in enumerate(cases) if i in val_idx])


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    seed: int = 0
    cases: int = 10
    slices: int = 18
    height: int = 128
    width: int = 128
    lesions: Tuple[int, int] = (1, 4)
    radius: Tuple[float, float] = (2.0, 15.0)
    thickness: Tuple[int, int] = (1, 3)
    # lesion offsets in background standard deviations (DWI, ADC, T2WI)
    contrast: Tuple[float, float, float] = (2.5, -2.0, 1.0)
    contrast_jitter: float = 0.2
    noise: float = 0.1
    smoothness: Tuple[float, float, float] = (1.5, 8.0, 8.0)

    def __post_init__(self):
        lo, hi = self.radius
        if not 0 < lo <= hi or 2 * hi + 1 > min(self.height, self.width):
            raise ValueError("lesion radius range must fit the field of view")
        if not 1 <= self.lesions[0] <= self.lesions[1]:
            raise ValueError("invalid lesion count range")
        if not 1 <= self.thickness[0] <= self.thickness[1] <= self.slices:
            raise ValueError("invalid lesion thickness range")
        if self.cases < 1 or self.noise < 0 or not 0 <= self.contrast_jitter < 1:
            raise ValueError("invalid synthetic configuration")


_NEIGHBOURS_26 = np.ones((3, 3, 3), dtype=bool)


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / f.std()


def _place_lesion(rng, cfg: SyntheticConfig, occupied: np.ndarray):
    z, h, w = occupied.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(200):
        ry, rx = rng.uniform(*cfg.radius, size=2)
        t = int(rng.integers(cfg.thickness[0], cfg.thickness[1] + 1))
        z0 = int(rng.integers(0, z - t + 1))
        cy = rng.uniform(ry, h - 1 - ry)
        cx = rng.uniform(rx, w - 1 - rx)
        disk = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        if not disk.any():
            continue
        blob = np.zeros_like(occupied)
        blob[z0:z0 + t] = disk
        # keep lesions separated so each one is its own 26-connected component
        if (ndimage.binary_dilation(blob, _NEIGHBOURS_26) & occupied).any():
            continue
        return blob
    return None


def generate_case(cfg: SyntheticConfig, rng: np.random.Generator, case_id: str) -> VolumeCase:
    shape = (cfg.slices, cfg.height, cfg.width)
    common = _smooth_field(rng, shape, cfg.smoothness)
    images = np.empty((3,) + shape, dtype=np.float64)
    for m in range(3):
        own = _smooth_field(rng, shape, cfg.smoothness)
        bg = common + own
        # contrast offsets are quoted in units of this background's standard deviation
        images[m] = bg / np.std(bg)
    mask = np.zeros(shape, dtype=bool)
    n_lesions = int(rng.integers(cfg.lesions[0], cfg.lesions[1] + 1))
    for _ in range(n_lesions):
        blob = _place_lesion(rng, cfg, mask)
        if blob is None:
            break
        jitter = 1.0 + rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter, size=3)
        for m in range(3):
            images[m][blob] += cfg.contrast[m] * jitter[m]
        mask |= blob
    if not mask.any():
        raise RuntimeError("lesion placement failed")
    images += cfg.noise * rng.standard_normal(images.shape)
    return VolumeCase(case_id, images.astype(np.float32), mask.astype(np.uint8))


def generate_synthetic(cfg: SyntheticConfig) -> List[VolumeCase]:
    """Deterministic list of synthetic cases; case i draws from its own child stream."""
    root = np.random.SeedSequence(cfg.seed)
    return [generate_case(cfg, np.random.default_rng(ss), f"case{i:03d}")
            for i, ss in enumerate(root.spawn(cfg.cases))]

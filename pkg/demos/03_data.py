"""Synthetic multi-modal volumes, the MVOL file format, patches and augmentation.

Run:  python3 demos/03_data.py
"""
import tempfile
from pathlib import Path

import numpy as np

from resfcn.data import (SyntheticConfig, augment, extract_patches, generate_synthetic, load_volume,
                         normalize_slices, save_volume, split_train_val)
from resfcn.evaluation import connected_components

cases = generate_synthetic(SyntheticConfig(seed=0, cases=3))
for c in cases:
    m = c.mask.astype(bool)
    contrast = [f"{name} {img[m].mean() - img[~m].mean():+.2f}" for name, img in zip(("DWI", "ADC", "T2WI"), c.images)]
    print(f"{c.case_id}: shape {c.shape}, {connected_components(c.mask)[1]} lesions, "
          f"{int(m.sum())} lesion voxels, mean offset {', '.join(contrast)}")

with tempfile.TemporaryDirectory() as d:
    path = save_volume(cases[0], Path(d) / "case.mvol")
    back = load_volume(path)
    print(f"\nMVOL round trip: {path.stat().st_size} bytes, identical: "
          f"{back.images.tobytes() == cases[0].images.tobytes() and np.array_equal(back.mask, cases[0].mask)}")

norm = [normalize_slices(c) for c in cases]
patches = [p for c in norm for p in extract_patches(c)]
print(f"\n{len(patches)} lesion patches of 64x64 (stride 8) from {len(cases)} cases")
train, val = split_train_val(patches, 0.1, np.random.default_rng(1))
train = augment(train, np.random.default_rng(2))
print(f"split before augmentation: {len(val)} validation, {len(train)} training after flip + rotation")
print("transforms in the first sample group:", [s.transform for s in train[:3]])

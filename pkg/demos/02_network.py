"""The Res-FCN network: layer-by-layer output shapes and parameter budget.

Run:  python3 demos/02_network.py
"""
import time

import numpy as np

from resfcn.network import build_resfcn

for k in (5, 7, 9):
    net = build_resfcn(k, np.random.default_rng(0))
    print(f"k={k}: {net.parameter_count():,} parameters")

x = np.random.default_rng(1).standard_normal((2, 3, 64, 64)).astype(np.float32)
t0 = time.time()
y = net.forward(x, train=False)
print(f"\nforward pass on {x.shape} took {time.time() - t0:.2f}s")
for name, shape in net.trace:
    print(f"  {name:<12} {shape}")
print(f"output range ({y.min():.3f}, {y.max():.3f})")

"""Layer building blocks: atrous convolution, transposed convolution and gradient checks.

Run:  python3 demos/01_layers.py
"""
import numpy as np

from resfcn.layers import ConvParams, conv2d_backward, conv2d_forward, deconv2d_forward

rng = np.random.default_rng(0)

# A dilated 3x3 kernel samples the input with gaps of d-1 pixels.  It is the
# same operator as a dense (2d+1)x(2d+1) kernel with zeros between the taps.
x = rng.standard_normal((1, 2, 16, 16))
w = rng.standard_normal((4, 2, 3, 3))
b = np.zeros(4)
for d in (1, 2, 4):
    dense = np.zeros((4, 2, 2 * d + 1, 2 * d + 1))
    dense[:, :, ::d, ::d] = w
    same = np.allclose(conv2d_forward(x, ConvParams(w, b, dilation=d)), conv2d_forward(x, ConvParams(dense, b)))
    print(f"dilation {d}: receptive field {2 * d + 1}x{2 * d + 1}, matches zero-inserted kernel: {same}")

# Stride-2 transposed convolution doubles height and width and is the exact
# adjoint of the stride-2 convolution sharing its kernel.
y = rng.standard_normal((1, 3, 4, 4))
k = rng.standard_normal((3, 2, 3, 3))
up = deconv2d_forward(y, ConvParams(k, np.zeros(2), stride=2))
print("deconv", y.shape, "->", up.shape)
z = rng.standard_normal(up.shape)
lhs = np.sum(conv2d_forward(z, ConvParams(k, np.zeros(3), stride=2)) * y)
print(f"adjoint identity <conv z, y> = <z, deconv y>: {lhs:.6f} vs {np.sum(z * up):.6f}")

# Central differences confirm the analytic weight gradient.
p = ConvParams(w, b, stride=2, dilation=2)
g = rng.standard_normal(conv2d_forward(x, p).shape)
_, gw, _ = conv2d_backward(x, p, g)
direction = rng.standard_normal(w.shape)
h = 1e-5
f = lambda wt: np.sum(conv2d_forward(x, ConvParams(wt, b, stride=2, dilation=2)) * g)
numeric = (f(w + h * direction) - f(w - h * direction)) / (2 * h)
print(f"directional derivative: analytic {np.sum(gw * direction):.8f}, numeric {numeric:.8f}")

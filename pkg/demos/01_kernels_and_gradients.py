"""
Convolution kernels and gradient checking
=========================================

A tour of the numeric core: a 3-D convolution on a toy volume, max
pooling with its argmax bookkeeping, and a finite-difference check of
the full network's backward pass.
"""

import numpy as np

from neurovol import tensor_core as tc
from neurovol.gradcheck import model_gradcheck
from neurovol.model import ArchConfig, build_model, forward

rng = np.random.default_rng(0)

# a single impulse in the middle of a 5x5x5 volume
x = np.zeros((1, 1, 5, 5, 5))
x[0, 0, 2, 2, 2] = 1.0

# convolving an impulse copies the (flipped) kernel around it
kernel = rng.standard_normal((1, 1, 3, 3, 3))
out = tc.conv3d_forward(x, tc.ConvParams(kernel, np.zeros(1)))
print("impulse response matches the flipped kernel:",
      np.allclose(out[0, 0, 1:4, 1:4, 1:4], kernel[0, 0, ::-1, ::-1, ::-1]))

# 2x2x2 pooling of a 5^3 volume drops the last plane on every axis
pooled, argmax = tc.maxpool3d_forward(rng.standard_normal((1, 1, 5, 5, 5)), tc.PoolSpec(2))
print("pooled shape:", pooled.shape)

# the backward pass routes gradient only to the winning voxels
grad = tc.maxpool3d_backward(argmax, np.ones_like(pooled))
print("voxels receiving gradient:", int(grad.sum()), "of", grad.size)

# the network used throughout the tests: 6^3 input, two stages, FC 4
arch = ArchConfig.preset("tiny")
model = build_model(arch, seed=0)
logits, _ = forward(model, rng.standard_normal((2, 1, 6, 6, 6)).astype(np.float32),
                    np.array([[0.3, 0.0], [-1.2, 1.0]], np.float32))
print("logits for two subjects:\n", logits)

# central differences in float64 against backprop, dropout masks held fixed
for seed in range(3):
    report = model_gradcheck(arch, seed=seed)
    print(f"seed {seed}: max relative error {report['max_rel_error']:.2e}")

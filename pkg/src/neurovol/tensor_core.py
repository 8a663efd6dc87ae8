"""Forward/backward kernels for the volumetric network layers.

Tensors are plain ``numpy.ndarray`` objects laid out as
``[batch, channel, depth, height, width]`` (row-major, width fastest).
Every kernel preserves the floating dtype of its inputs, so the same code
runs in single precision for training and in double precision for
gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

# Left-right axis of a stored volume (W, the last axis).
LR_AXIS = -1


class ShapeError(ValueError):
    """Raised when tensor extents do not agree."""


@dataclass
class ConvParams:
    kernels: np.ndarray  # [c_out, c_in, k, k, k]
    bias: np.ndarray  # [c_out]

    def __post_init__(self):
        if self.kernels.ndim != 5:
            raise ShapeError(f"kernels must be 5-D, got shape {self.kernels.shape}")
        c_out, c_in, kd, kh, kw = self.kernels.shape
        if not kd == kh == kw:
            raise ShapeError(f"kernels must be cubic, got {self.kernels.shape[2:]}")
        if kd % 2 == 0:
            raise ShapeError(f"kernel extent must be odd, got {kd}")
        if self.bias.shape != (c_out,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={c_out}")

    @property
    def k(self) -> int:
        return self.kernels.shape[2]

    @property
    def c_in(self) -> int:
        return self.kernels.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernels.shape[0]


@dataclass(frozen=True)
class PoolSpec:
    window: int

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"pool window must be >= 2, got {self.window}")


@dataclass
class PoolArgmax:
    """Flat indices (into the full input tensor) of each pooled maximum."""

    indices: np.ndarray  # int64, same shape as the pooled output
    input_shape: tuple


def _check_5d(x: np.ndarray, name: str):
    if x.ndim != 5:
        raise ShapeError(f"{name} must be [B,C,D,H,W], got shape {x.shape}")


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-pad by k//2 and unfold into a ``[B*D*H*W, C*k**3]`` patch matrix.

    Column order is (channel, dz, dy, dx), matching a flattened kernel row.
    """
    p = k // 2
    B, C, D, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    view = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    return cols.reshape(B * D * H * W, C * k**3)


def conv3d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Stride-1 "same" 3-D convolution (cross-correlation) plus bias."""
    _check_5d(x, "input")
    if x.shape[1] != params.c_in:
        raise ShapeError(
            f"channel axis: input has {x.shape[1]} channels, kernels expect {params.c_in}"
        )
    B, _, D, H, W = x.shape
    kmat_t = params.kernels.reshape(params.c_out, -1).T
    out = np.empty((B, params.c_out, D, H, W), dtype=np.result_type(x, params.kernels))
    # one GEMM per sample: results do not depend on batch composition
    for b in range(B):
        y = im2col(x[b : b + 1], params.k) @ kmat_t
        y += params.bias
        out[b] = y.reshape(D, H, W, params.c_out).transpose(3, 0, 1, 2)
    return out


def conv3d_backward(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray, need_input_grad: bool = True
):
    """Return ``(grad_input, grad_kernels, grad_bias)`` for :func:`conv3d_forward`.

    ``grad_input`` is None when ``need_input_grad`` is False (first layer).
    """
    _check_5d(x, "input")
    B, C, D, H, W = x.shape
    O, k = params.c_out, params.k
    if grad_out.shape != (B, O, D, H, W):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(B, O, D, H, W)}")
    gmat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 4, 1)).reshape(-1, O)
    grad_bias = gmat.sum(axis=0)
    grad_kernels = (gmat.T @ im2col(x, k)).reshape(params.kernels.shape)
    if not need_input_grad:
        return None, grad_kernels, grad_bias

    # col2im: scatter each kernel tap's contribution back onto the padded grid
    kmat = params.kernels.transpose(0, 2, 3, 4, 1).reshape(O, k**3 * C)
    gcols = (gmat @ kmat).reshape(B, D, H, W, k**3, C)
    p = k // 2
    gpad = np.zeros((B, D + 2 * p, H + 2 * p, W + 2 * p, C), dtype=gcols.dtype)
    tap = 0
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                gpad[:, dz : dz + D, dy : dy + H, dx : dx + W, :] += gcols[:, :, :, :, tap, :]
                tap += 1
    grad_in = gpad[:, p : p + D, p : p + H, p : p + W, :].transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(grad_in), grad_kernels, grad_bias


def pooled_shape(spatial: tuple, window: int) -> tuple:
    return tuple(s // window for s in spatial)


def maxpool3d_forward(x: np.ndarray, spec: PoolSpec):
    """Non-overlapping max pooling; trailing remainder voxels are dropped.

    Ties resolve to the first voxel of the window in z, y, x scan order.
    """
    _check_5d(x, "input")
    w = spec.window
    B, C, D, H, W = x.shape
    Do, Ho, Wo = pooled_shape((D, H, W), w)
    if min(Do, Ho, Wo) < 1:
        raise ShapeError(f"pool window {w} larger than spatial extent {(D, H, W)}")
    xc = x[:, :, : Do * w, : Ho * w, : Wo * w]
    blocks = xc.reshape(B, C, Do, w, Ho, w, Wo, w).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(B, C, Do, Ho, Wo, w * w * w)
    local = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]

    dz, rem = np.divmod(local, w * w)
    dy, dx = np.divmod(rem, w)
    b, c, zo, yo, xo = np.indices((B, C, Do, Ho, Wo), sparse=True)
    flat = np.ravel_multi_index(
        (b, c, zo * w + dz, yo * w + dy, xo * w + dx), x.shape
    ).astype(np.int64)
    return np.ascontiguousarray(out), PoolArgmax(flat, x.shape)


def maxpool3d_backward(argmax: PoolArgmax, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != argmax.indices.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match argmax {argmax.indices.shape}"
        )
    grad_in = np.zeros(int(np.prod(argmax.input_shape)), dtype=grad_out.dtype)
    # windows never overlap, so indices are unique
    grad_in[argmax.indices.ravel()] = grad_out.ravel()
    return grad_in.reshape(argmax.input_shape)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weights {weights.shape}")
    # row-by-row so each output row is independent of the batch size
    out = np.empty((x.shape[0], weights.shape[1]), dtype=np.result_type(x, weights))
    for i in range(x.shape[0]):
        out[i] = x[i] @ weights + bias
    return out


def dense_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(
            f"dense: grad_out {grad_out.shape} != ({x.shape[0]}, {weights.shape[1]})"
        )
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probs, grad_logits)`` with ``grad_logits = (probs - onehot) / B``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    B, c = logits.shape
    if B < 1:
        raise ShapeError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c}): {labels.tolist()}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(B)
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= B
    return loss, probs, grad


def dropout_apply(x: np.ndarray, keep_rate: float, rng: np.random.Generator):
    """Inverted dropout. Returns ``(output, mask)``; the mask holds the 0 or 1/keep_rate factors."""
    if not 0 < keep_rate <= 1:
        raise ValueError(f"keep_rate must be in (0, 1], got {keep_rate}")
    if keep_rate == 1:
        return x.copy(), np.ones_like(x)
    keep = rng.random(x.shape) < keep_rate
    mask = (keep / keep_rate).astype(x.dtype)
    return x * mask, mask


def dropout_backward(mask: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * mask


def flip_lr(volume: np.ndarray) -> np.ndarray:
    """Swap left and right hemispheres by reversing the W (last) axis."""
    return np.ascontiguousarray(np.flip(volume, axis=LR_AXIS))

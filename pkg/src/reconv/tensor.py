"""Reference CPU kernels: full and region-restricted conv2d, ReLU, dense, softmax.

A *feature map* is a C-contiguous numpy array of shape (channels, rows, cols)
in float32 or float64. Single precision is the default throughout the engine;
double precision is used by gradient checks.

Every output element of :func:`conv2d` and :func:`conv2d_region` is
accumulated in one fixed order — bias first, then input channel (outer),
kernel row, kernel column (inner) — so recomputing any sub-rectangle of the
output reproduces the full computation *bitwise*, not merely within a
tolerance. The jitted loops below are compiled without fastmath, which keeps
LLVM from reassociating the sums or contracting them into FMAs. The dense
layer delegates to BLAS: its operand shapes never vary between the full and
reuse paths, so its (shape-dependent) summation order is fixed too.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .region import ConvGeometry, Rect

__all__ = [
    "ConvWeights",
    "DenseWeights",
    "conv2d",
    "conv2d_region",
    "relu",
    "dense",
    "softmax",
]

_FLOAT_DTYPES = (np.float32, np.float64)


def _check_float(name: str, a: np.ndarray) -> None:
    if a.dtype.type not in _FLOAT_DTYPES:
        raise ValueError(f"{name} must be float32 or float64, got {a.dtype}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ConvWeights:
    """Weights of one conv layer: (out, in, k, k) kernel tensor plus bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError(f"conv weights must be (out, in, k, k), got {self.weights.shape}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.bias.shape != (self.out_channels,):
            raise ValueError("bias length must equal out_channels")
        if self.bias.dtype != self.weights.dtype:
            raise ValueError("weights and bias dtypes differ")
        _check_float("conv weights", self.weights)
        _check_float("conv bias", self.bias)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    @property
    def dtype(self) -> np.dtype:
        return self.weights.dtype


@dataclass(frozen=True, eq=False)
class DenseWeights:
    """Weights of the dense head: (out_size, in_size) matrix plus bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 2:
            raise ValueError(f"dense weights must be 2-D, got {self.weights.shape}")
        if self.bias.shape != (self.out_size,):
            raise ValueError("bias length must equal out_size")
        if self.bias.dtype != self.weights.dtype:
            raise ValueError("weights and bias dtypes differ")
        _check_float("dense weights", self.weights)
        _check_float("dense bias", self.bias)

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.weights.dtype


@numba.njit(cache=True)
def _conv_fill(padded: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int,
               out: np.ndarray) -> None:
    """Accumulate conv outputs into ``out``.

    ``padded`` row 0 corresponds to the receptive-field origin of output
    row 0, so out[c, rr, col] reads padded[ci, rr*stride + dr,
    col*stride + dc]. The per-element accumulation order (bias, then ci, dr,
    dc) is the bitwise contract shared by the full and region paths.
    """
    n_out, n_in, k, _ = w.shape
    rh, rw = out.shape[1], out.shape[2]
    for c in range(n_out):
        for rr in range(rh):
            row = out[c, rr]
            for col in range(rw):
                row[col] = b[c]
            for ci in range(n_in):
                for dr in range(k):
                    xrow = padded[ci, rr * stride + dr]
                    for dc in range(k):
                        wv = w[c, ci, dr, dc]
                        if stride == 1:
                            for col in range(rw):
                                row[col] += wv * xrow[col + dc]
                        else:
                            for col in range(rw):
                                row[col] += wv * xrow[col * stride + dc]


def _check_conv_args(x: np.ndarray, w: ConvWeights, g: ConvGeometry) -> None:
    if x.ndim != 3:
        raise ValueError(f"input must be (channels, rows, cols), got {x.shape}")
    if x.shape != (w.in_channels, g.in_rows, g.in_cols):
        raise ValueError(
            f"input shape {x.shape} does not match weights/geometry "
            f"({w.in_channels}, {g.in_rows}, {g.in_cols})"
        )
    if w.kernel != g.kernel:
        raise ValueError(f"weight kernel {w.kernel} != geometry kernel {g.kernel}")
    if x.dtype != w.dtype:
        raise ValueError(f"input dtype {x.dtype} != weight dtype {w.dtype}")


def conv2d(x: np.ndarray, w: ConvWeights, g: ConvGeometry) -> np.ndarray:
    """Full 2-D convolution with zero padding. Returns (out_channels,
    out_rows, out_cols)."""
    _check_conv_args(x, w, g)
    p = g.padding
    padded = np.zeros(
        (w.in_channels, g.in_rows + 2 * p, g.in_cols + 2 * p), dtype=x.dtype
    )
    padded[:, p : p + g.in_rows, p : p + g.in_cols] = x
    out = np.empty((w.out_channels, g.out_rows, g.out_cols), dtype=x.dtype)
    _conv_fill(padded, w.weights, w.bias, g.stride, out)
    return out


def conv2d_region(
    x: np.ndarray, w: ConvWeights, g: ConvGeometry, r_out: Rect
) -> np.ndarray:
    """Convolution restricted to the output rect ``r_out``.

    Returns the (out_channels, r_out.height, r_out.width) patch, bitwise
    identical to the same slice of :func:`conv2d`. Cost is proportional to
    the patch, not the frame.
    """
    _check_conv_args(x, w, g)
    if r_out.row1 >= g.out_rows or r_out.col1 >= g.out_cols:
        raise ValueError(f"rect {r_out} outside output {g.out_rows}x{g.out_cols}")
    s, k, p = g.stride, g.kernel, g.padding
    # Input span read by the patch, in unpadded input coordinates (may
    # extend past the borders; those cells stay zero).
    pr0, pr1 = r_out.row0 * s - p, r_out.row1 * s - p + k - 1
    pc0, pc1 = r_out.col0 * s - p, r_out.col1 * s - p + k - 1
    patch = np.zeros(
        (w.in_channels, pr1 - pr0 + 1, pc1 - pc0 + 1), dtype=x.dtype
    )
    sr0, sr1 = max(pr0, 0), min(pr1, g.in_rows - 1)
    sc0, sc1 = max(pc0, 0), min(pc1, g.in_cols - 1)
    if sr0 <= sr1 and sc0 <= sc1:
        patch[:, sr0 - pr0 : sr1 - pr0 + 1, sc0 - pc0 : sc1 - pc0 + 1] = x[
            :, sr0 : sr1 + 1, sc0 : sc1 + 1
        ]
    out = np.empty((w.out_channels, r_out.height, r_out.width), dtype=x.dtype)
    _conv_fill(patch, w.weights, w.bias, g.stride, out)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def dense(x: np.ndarray, w: DenseWeights) -> np.ndarray:
    """Affine layer: weights @ x + bias for a flat input vector."""
    if x.ndim != 1 or x.shape[0] != w.in_size:
        raise ValueError(f"dense input length {x.shape} != in_size {w.in_size}")
    if x.dtype != w.dtype:
        raise ValueError(f"input dtype {x.dtype} != weight dtype {w.dtype}")
    return w.weights @ x + w.bias


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max subtraction before exponentiation)."""
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()

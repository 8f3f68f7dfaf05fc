"""Dense tensor primitives.

A tensor is a C-ordered ``numpy.ndarray`` of rank 1 to 4. Images and feature
maps use the ``[n, c, h, w]`` convention (batch, channels, height, width),
row-major with the last axis fastest.

float32 is the training precision; float64 is used by the gradient-check
and oracle paths. Every operation here preserves the dtype of its inputs.
"""

from typing import NamedTuple, Sequence

import numpy as np

from ..errors import ShapeError

DEFAULT_DTYPE = np.float32
_MAX_RANK = 4


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int


def as_shape4(x: np.ndarray) -> Shape4:
    """Return the ``[n, c, h, w]`` extents of a rank-4 tensor."""
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-4 [n,c,h,w] tensor, got shape {list(x.shape)}")
    return Shape4(*(int(e) for e in x.shape))


def tensor_new(shape: Sequence[int], fill: float = 0.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Create a tensor of ``shape`` with every element equal to ``fill``."""
    extents = list(shape)
    if not 1 <= len(extents) <= _MAX_RANK:
        raise ShapeError(f"rank must be 1..{_MAX_RANK}, got {len(extents)}")
    for e in extents:
        if int(e) != e or e < 1:
            raise ShapeError(f"invalid shape {extents}: every extent must be a positive integer")
    return np.full([int(e) for e in extents], fill, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product ``[m,k] x [k,n] -> [m,n]``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {list(a.shape)} x {list(b.shape)}")
    return np.matmul(a, b)


def conv_output_size(size: int, kernel: int, stride: int = 1) -> int:
    """Valid-padding output extent."""
    return (size - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """Gather receptive fields of ``x [n,c,h,w]`` into columns.

    Result shape is ``[c*kh*kw, n*oh*ow]``. Rows run over ``(c, u, v)`` with
    ``v`` fastest, matching ``weights.reshape(filters, -1)``; columns run over
    ``(b, i, j)`` with ``j`` fastest, so column ``t`` is output position
    ``t`` of the row-major ``[n, oh, ow]`` grid.
    """
    n, c, h, w = as_shape4(x)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")

    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]            # [n, c, oh, ow, kh, kw]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape: Sequence[int], kh: int, kw: int,
           stride: int = 1) -> np.ndarray:
    """Scatter-add columns produced by :func:`im2col` back onto ``x_shape``.

    Overlapping windows accumulate in a fixed ``(u, v)`` order.
    """
    n, c, h, w = (int(e) for e in x_shape)
    oh = conv_output_size(h, kh, stride)
    ow = conv_output_size(w, kw, stride)
    if cols.shape != (c * kh * kw, n * oh * ow):
        raise ShapeError(
            f"columns of shape {list(cols.shape)} do not match input {[n, c, h, w]} "
            f"with kernel {kh}x{kw}"
        )

    patches = cols.reshape(c, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += patches[:, :, u, v]
    return out

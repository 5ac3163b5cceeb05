"""Strided single-precision matrices and the elementwise ops the gradient math needs.

All operations are pure: inputs are never modified and outputs are freshly
allocated with stride == cols. Storage is always float32; dot products and
error sums accumulate in float64 so that line-search sign decisions stay
stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._jit import njit, select


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


@dataclass
class Mat32:
    """Row-major float32 matrix with an explicit row stride.

    ``data`` is a flat array; row ``i`` starts at ``i * stride`` and only the
    first ``cols`` elements of each row are meaningful. ``stride >= cols``
    and ``len(data) >= rows * stride``; trailing pad elements are never read.
    """

    rows: int
    cols: int
    stride: int
    data: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"degenerate shape {self.rows}x{self.cols}")
        if self.stride < self.cols:
            raise ShapeError(f"stride {self.stride} < cols {self.cols}")
        if self.data.ndim != 1 or self.data.dtype != np.float32:
            raise ShapeError("data must be a flat float32 array")
        if self.data.size < self.rows * self.stride:
            raise ShapeError(
                f"data length {self.data.size} < rows*stride {self.rows * self.stride}"
            )

    @classmethod
    def zeros(cls, rows: int, cols: int, stride: int | None = None) -> "Mat32":
        stride = cols if stride is None else stride
        return cls(rows, cols, stride, np.zeros(rows * stride, dtype=np.float32))

    @classmethod
    def from_array(cls, arr, stride: int | None = None) -> "Mat32":
        """Copy a 2-D array-like into a fresh Mat32 (default stride = cols)."""
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim != 2:
            raise ShapeError(f"expected 2-D input, got ndim={a.ndim}")
        rows, cols = a.shape
        stride = cols if stride is None else stride
        if stride < cols:
            raise ShapeError(f"stride {stride} < cols {cols}")
        data = np.zeros(rows * stride, dtype=np.float32)
        data.reshape(rows, stride)[:, :cols] = a
        return cls(rows, cols, stride, data)

    def view(self) -> np.ndarray:
        """Writable (rows, cols) view into the strided storage."""
        return self.data[: self.rows * self.stride].reshape(self.rows, self.stride)[
            :, : self.cols
        ]

    def copy(self) -> "Mat32":
        return Mat32(self.rows, self.cols, self.stride, self.data.copy())

    def row_slice(self, r0: int, r1: int) -> "Mat32":
        """View of rows [r0, r1) sharing this matrix's storage."""
        if not 0 <= r0 < r1 <= self.rows:
            raise ShapeError(f"row range [{r0}, {r1}) outside 0..{self.rows}")
        return Mat32(r1 - r0, self.cols, self.stride,
                     self.data[r0 * self.stride:r1 * self.stride])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


def _require_same_shape(a: Mat32, b: Mat32, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elemwise_mul(a: Mat32, b: Mat32) -> Mat32:
    """Hadamard product, out[i,j] = a[i,j] * b[i,j]."""
    _require_same_shape(a, b, "elemwise_mul")
    return Mat32(a.rows, a.cols, a.cols, np.multiply(a.view(), b.view()).ravel())


def tanh_map(a: Mat32) -> Mat32:
    """Elementwise tanh. Saturates to exactly +-1.0 in float32 for huge inputs."""
    return Mat32(a.rows, a.cols, a.cols, np.tanh(a.view()).ravel())


def ones_minus_sq(a: Mat32) -> Mat32:
    """out[i,j] = 1 - a[i,j]**2 (the tanh derivative applied to activations)."""
    v = a.view()
    return Mat32(a.rows, a.cols, a.cols, (np.float32(1.0) - v * v).ravel())


def sub_mat(a: Mat32, b: Mat32) -> Mat32:
    """out = a - b."""
    _require_same_shape(a, b, "sub_mat")
    return Mat32(a.rows, a.cols, a.cols, np.subtract(a.view(), b.view()).ravel())


def axpy_mat(alpha: float, x: Mat32, y: Mat32) -> Mat32:
    """out = alpha * x + y, alpha applied in float32."""
    _require_same_shape(x, y, "axpy_mat")
    out = np.float32(alpha) * x.view() + y.view()
    return Mat32(x.rows, x.cols, x.cols, out.ravel())


@njit(cache=True, nogil=True)
def _dot_f64(adata, astride, bdata, bstride, rows, cols):
    s = 0.0
    for i in range(rows):
        ar = i * astride
        br = i * bstride
        for j in range(cols):
            s += np.float64(adata[ar + j]) * np.float64(bdata[br + j])
    return s


_dot = select(_dot_f64)


def dot_flat(a: Mat32, b: Mat32) -> float:
    """Flattened inner product, accumulated sequentially in float64."""
    _require_same_shape(a, b, "dot_flat")
    return float(_dot(a.data, a.stride, b.data, b.stride, a.rows, a.cols))

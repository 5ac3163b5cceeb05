"""One-hidden-layer tanh network expressed entirely as GEMM + elementwise ops.

Forward pass over a pattern batch X (one pattern per row):

    H = tanh(X @ W_ih^T)        hidden activations, n_p x n_h
    Y = tanh(H @ W_ho^T)        outputs, n_p x n_o

Error is the summed squared deviation E = sum_ij (Y_ij - T_ij)^2. The
gradient is computed in matrix form:

    Yd = (1 - Y*Y) * (T - Y)            (elementwise)
    Hd = (1 - H*H) * (Yd @ W_ho)
    g_ih = Hd^T @ X,   g_ho = Yd^T @ H

Sign convention: with the (T - Y) factor these g matrices equal -1/2 of the
calculus gradient dE/dW, i.e. an ascent direction for -E. The optimizer
therefore steps W := W + step*d. The finite-difference tests pin this factor.

Flop accounting counts exactly the multiply-adds of the five GEMMs:
error_flops = 2*n_p*(n_i+n_o)*n_h, gradient_flops = n_p*(4*n_i*n_h + 6*n_h*n_o).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._jit import njit, select
from .matcore import Mat32, ShapeError, elemwise_mul, ones_minus_sq, sub_mat, tanh_map
from .gemm import BlockConfig, matmul

CHECKPOINT_MAGIC = b"ULSNN1"

U64_MAX = 2**64 - 1


class FormatError(ValueError):
    """Corrupt or truncated parameter file."""


@dataclass
class MlpParams:
    """Layer sizes plus the two weight matrices.

    w_ih is n_h x n_i (hidden j collects inputs k), w_ho is n_o x n_h.
    """

    n_i: int
    n_h: int
    n_o: int
    w_ih: Mat32
    w_ho: Mat32

    def __post_init__(self):
        if self.w_ih.shape != (self.n_h, self.n_i):
            raise ShapeError(f"w_ih shape {self.w_ih.shape} != ({self.n_h}, {self.n_i})")
        if self.w_ho.shape != (self.n_o, self.n_h):
            raise ShapeError(f"w_ho shape {self.w_ho.shape} != ({self.n_o}, {self.n_h})")

    @property
    def param_count(self) -> int:
        return param_count(self.n_i, self.n_h, self.n_o)

    def copy(self) -> "MlpParams":
        return MlpParams(self.n_i, self.n_h, self.n_o, self.w_ih.copy(), self.w_ho.copy())


@dataclass
class Batch:
    """Training patterns x (n_p x n_i) and targets t (n_p x n_o) in [-1, 1]."""

    x: Mat32
    t: Mat32

    def __post_init__(self):
        if self.x.rows != self.t.rows:
            raise ShapeError(f"x has {self.x.rows} rows, t has {self.t.rows}")

    @property
    def n_patterns(self) -> int:
        return self.x.rows

    def rows(self, r0: int, r1: int) -> "Batch":
        return Batch(self.x.row_slice(r0, r1), self.t.row_slice(r0, r1))


@dataclass
class GradResult:
    g_ih: Mat32
    g_ho: Mat32
    error: float
    n_patterns: int
    flops: int


def init_params(n_i: int, n_h: int, n_o: int, seed: int = 0) -> MlpParams:
    """Random small weights, scaled by fan-in to keep tanh units unsaturated."""
    rng = np.random.default_rng(seed)
    w_ih = (rng.standard_normal((n_h, n_i)) / np.sqrt(n_i)).astype(np.float32)
    w_ho = (rng.standard_normal((n_o, n_h)) / np.sqrt(n_h)).astype(np.float32)
    return MlpParams(n_i, n_h, n_o, Mat32.from_array(w_ih), Mat32.from_array(w_ho))


def forward(p: MlpParams, x: Mat32, cfg: BlockConfig | None = None,
            blocked: bool = True) -> tuple[Mat32, Mat32]:
    """Hidden activations and outputs for a batch of input rows."""
    if x.cols != p.n_i:
        raise ShapeError(f"x has {x.cols} columns, network expects {p.n_i}")
    h = tanh_map(matmul(x, p.w_ih, trans_b=True, cfg=cfg, blocked=blocked))
    y = tanh_map(matmul(h, p.w_ho, trans_b=True, cfg=cfg, blocked=blocked))
    return h, y


@njit(cache=True, nogil=True)
def _sq_err_f64(ydata, ystride, tdata, tstride, rows, cols):
    s = 0.0
    for i in range(rows):
        yr = i * ystride
        tr = i * tstride
        for j in range(cols):
            d = np.float64(ydata[yr + j]) - np.float64(tdata[tr + j])
            s += d * d
    return s


_sq_err = select(_sq_err_f64)


def mse_error(y: Mat32, t: Mat32) -> float:
    """Summed squared error, accumulated sequentially in float64.

    The name follows the quantity's conventional label even though no mean
    is taken; totals stay comparable across batch splits this way.
    """
    if y.shape != t.shape:
        raise ShapeError(f"mse_error: shape mismatch {y.shape} vs {t.shape}")
    return float(_sq_err(y.data, y.stride, t.data, t.stride, y.rows, y.cols))


def gradient(p: MlpParams, batch: Batch, cfg: BlockConfig | None = None,
             blocked: bool = True) -> GradResult:
    """Error and ascent-direction weight gradients over one batch."""
    if batch.x.cols != p.n_i:
        raise ShapeError(f"batch x has {batch.x.cols} cols, expected {p.n_i}")
    if batch.t.cols != p.n_o:
        raise ShapeError(f"batch t has {batch.t.cols} cols, expected {p.n_o}")
    h, y = forward(p, batch.x, cfg=cfg, blocked=blocked)
    y_delta = elemwise_mul(ones_minus_sq(y), sub_mat(batch.t, y))
    back = matmul(y_delta, p.w_ho, cfg=cfg, blocked=blocked)
    h_delta = elemwise_mul(ones_minus_sq(h), back)
    g_ih = matmul(h_delta, batch.x, trans_a=True, cfg=cfg, blocked=blocked)
    g_ho = matmul(y_delta, h, trans_a=True, cfg=cfg, blocked=blocked)
    err = mse_error(y, batch.t)
    n_p = batch.n_patterns
    return GradResult(g_ih, g_ho, err, n_p,
                      gradient_flops(n_p, p.n_i, p.n_h, p.n_o))


def param_count(n_i: int, n_h: int, n_o: int) -> int:
    if min(n_i, n_h, n_o) < 1:
        raise ValueError("layer sizes must be >= 1")
    return n_i * n_h + n_h * n_o


def error_flops(n_p: int, n_i: int, n_h: int, n_o: int) -> int:
    """Flops of one error evaluation: 2 * n_p * (n_i + n_o) * n_h."""
    if min(n_p, n_i, n_h, n_o) < 1:
        raise ValueError("counts must be >= 1")
    v = 2 * n_p * (n_i + n_o) * n_h
    if v > U64_MAX:
        raise OverflowError(f"flop count {v} exceeds 64 bits")
    return v


def gradient_flops(n_p: int, n_i: int, n_h: int, n_o: int) -> int:
    """Flops of one gradient evaluation: n_p * (4*n_i*n_h + 6*n_h*n_o)."""
    if min(n_p, n_i, n_h, n_o) < 1:
        raise ValueError("counts must be >= 1")
    v = n_p * (4 * n_i * n_h + 6 * n_h * n_o)
    if v > U64_MAX:
        raise OverflowError(f"flop count {v} exceeds 64 bits")
    return v


def param_message_bytes(p: MlpParams) -> int:
    """Wire size of one parameter (or gradient/direction) vector."""
    return 4 * p.param_count


# ---------------------------------------------------------------------------
# checkpoint file: magic, then n_i/n_h/n_o as u64 LE, then w_ih and w_ho as
# row-major little-endian float32 with stride == cols.


def save_params(p: MlpParams, path) -> int:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QQQ", p.n_i, p.n_h, p.n_o))
        fh.write(np.ascontiguousarray(p.w_ih.view(), dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(p.w_ho.view(), dtype="<f4").tobytes())
    return len(CHECKPOINT_MAGIC) + 24 + 4 * p.param_count


def load_params(path) -> MlpParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        header = fh.read(24)
        if len(header) != 24:
            raise FormatError("truncated header")
        n_i, n_h, n_o = struct.unpack("<QQQ", header)
        n_ih = n_h * n_i
        n_ho = n_o * n_h
        body = fh.read(4 * (n_ih + n_ho) + 1)
        if len(body) != 4 * (n_ih + n_ho):
            raise FormatError("truncated or oversized weight payload")
    flat = np.frombuffer(body, dtype="<f4")
    w_ih = Mat32(n_h, n_i, n_i, flat[:n_ih].astype(np.float32))
    w_ho = Mat32(n_o, n_h, n_h, flat[n_ih:].astype(np.float32))
    return MlpParams(n_i, n_h, n_o, w_ih, w_ho)

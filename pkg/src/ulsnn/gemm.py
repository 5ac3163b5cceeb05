"""Single-precision GEMM: naive 3-loop oracle, cache-blocked kernel, tuner, benchmark.

The blocked kernel follows the classic register/cache decomposition:

* the innermost loop accumulates ``n_panel`` dot products in register-resident
  accumulators, ``lane_width`` multiply-accumulates per accumulator per step;
* the B panel for those dot products is re-buffered ("packed") into a
  contiguous lane-interleaved buffer so the inner loop reads it with unit
  stride;
* A values are streamed straight out of the source matrix (no packing) on the
  plain-A path; transposed-A calls gather each row strip into a small buffer;
* an L2-level loop nest (``m2 x n2 x k2``) wraps the L1 kernel.

The default 5x4 microkernel is hand-unrolled into scalar accumulators so the
compiler can keep them in registers; any other (n_panel, lane_width) choice
runs a generic array-accumulator path that computes the same thing. With
numba disabled (ULSNN_NO_JIT=1) the identical Python code runs uncompiled.

``gemm_naive`` is the strict oracle: three nested loops, sequential float32
accumulation, no reassociation of any kind.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from ._jit import njit, select
from .matcore import Mat32, ShapeError

DEFAULT_L1_BYTES = 32 * 1024
DEFAULT_L2_BYTES = 8 * 1024 * 1024
BENCH_STRIDE = 700

_F0 = np.float32(0.0)


class ConfigError(ValueError):
    """Block configuration violates its invariants."""


@dataclass(frozen=True)
class BlockConfig:
    """Blocking parameters for the cache-blocked kernel.

    ``k_block`` is the L1 K-extent of a packed B panel, ``n_panel`` the number
    of dot products carried in the inner loop, ``lane_width`` the number of
    multiply-accumulates per accumulator per inner step. ``m2/n2/k2`` bound
    the L2-level loop nest. The L1 working set, one packed panel plus one A
    strip, is k_block*(n_panel+1) floats and must fit the L1 budget.
    """

    k_block: int = 336
    n_panel: int = 5
    lane_width: int = 4
    m2: int = 128
    n2: int = 120
    k2: int = 336

    def validate(self, l1_bytes: int = DEFAULT_L1_BYTES) -> None:
        if min(self.k_block, self.n_panel, self.lane_width, self.m2, self.n2, self.k2) < 1:
            raise ConfigError(f"all block extents must be >= 1: {self}")
        if self.k_block < self.lane_width:
            raise ConfigError(f"k_block {self.k_block} < lane_width {self.lane_width}")
        footprint = self.k_block * (self.n_panel + 1) * 4
        if footprint > l1_bytes:
            raise ConfigError(
                f"L1 working set {footprint} B exceeds budget {l1_bytes} B "
                f"(k_block={self.k_block}, n_panel={self.n_panel})"
            )


DEFAULT_CONFIG = BlockConfig()


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def _naive_core(adata, astride, bdata, bstride, cdata, cstride,
                m, n, k, alpha, beta, a_trans, b_trans):
    for i in range(m):
        for j in range(n):
            s = np.float32(0.0)
            if a_trans:
                if b_trans:
                    for p in range(k):
                        s += adata[p * astride + i] * bdata[j * bstride + p]
                else:
                    for p in range(k):
                        s += adata[p * astride + i] * bdata[p * bstride + j]
            else:
                if b_trans:
                    for p in range(k):
                        s += adata[i * astride + p] * bdata[j * bstride + p]
                else:
                    for p in range(k):
                        s += adata[i * astride + p] * bdata[p * bstride + j]
            if beta == np.float32(0.0):
                cdata[i * cstride + j] = alpha * s
            else:
                cdata[i * cstride + j] = alpha * s + beta * cdata[i * cstride + j]


@njit(cache=True, nogil=True)
def _pack_block(bdata, bstride, b_trans, k0, kb, j0, jcols, width, lane_w, out, obase):
    """Pack a (kb x jcols) panel of B, lane-interleaved, zero padded to
    ``width`` columns and a whole number of lane groups.

    Layout: out[obase + (s*width + p)*lane_w + l] = B[k0 + s*lane_w + l, j0 + p].
    """
    groups = (kb + lane_w - 1) // lane_w
    for s in range(groups):
        for p in range(width):
            for l in range(lane_w):
                kk = s * lane_w + l
                idx = obase + (s * width + p) * lane_w + l
                if p < jcols and kk < kb:
                    if b_trans:
                        out[idx] = bdata[(j0 + p) * bstride + k0 + kk]
                    else:
                        out[idx] = bdata[(k0 + kk) * bstride + j0 + p]
                else:
                    out[idx] = np.float32(0.0)


@njit(cache=True, nogil=True, fastmath=True)
def _blocked_core(adata, astride, bdata, bstride, cdata, cstride,
                  m, n, k, alpha, a_trans, b_trans,
                  k_block, n_panel, lane_w, m2, n2, k2):
    lanes_cap = (k_block + lane_w - 1) // lane_w
    panel_cap = lanes_cap * lane_w * n_panel
    panels_cap = (n2 + n_panel - 1) // n_panel
    bbuf = np.zeros(panel_cap * panels_cap, dtype=np.float32)
    abuf = np.zeros(lanes_cap * lane_w, dtype=np.float32)
    acc = np.zeros(n_panel * lane_w, dtype=np.float32)
    fast = n_panel == 5 and lane_w == 4

    for k2_0 in range(0, k, k2):
        k2_end = min(k2_0 + k2, k)
        for k1 in range(k2_0, k2_end, k_block):
            kb = min(k_block, k2_end - k1)
            klanes = kb // lane_w
            ktail = kb - klanes * lane_w
            kpad_lanes = klanes + (1 if ktail > 0 else 0)
            panel_stride = kpad_lanes * lane_w * n_panel
            for n0 in range(0, n, n2):
                nb = min(n2, n - n0)
                npanels = (nb + n_panel - 1) // n_panel
                for pi in range(npanels):
                    j0 = n0 + pi * n_panel
                    jb = min(n_panel, n0 + nb - j0)
                    _pack_block(bdata, bstride, b_trans, k1, kb, j0, jb,
                                n_panel, lane_w, bbuf, pi * panel_stride)
                has_short_panel = nb % n_panel != 0
                for m0 in range(0, m, m2):
                    mb = min(m2, m - m0)
                    for i in range(m0, m0 + mb):
                        gather = a_trans or not fast or has_short_panel
                        if gather:
                            if a_trans:
                                for kk in range(kb):
                                    abuf[kk] = adata[(k1 + kk) * astride + i]
                            else:
                                for kk in range(kb):
                                    abuf[kk] = adata[i * astride + k1 + kk]
                            for kk in range(kb, kpad_lanes * lane_w):
                                abuf[kk] = np.float32(0.0)
                        a_base = i * astride + k1
                        for pi in range(npanels):
                            j0 = n0 + pi * n_panel
                            jb = min(n_panel, n0 + nb - j0)
                            pbase = pi * panel_stride
                            c_base = i * cstride + j0
                            if fast and jb == 5:
                                a00 = _F0; a01 = _F0; a02 = _F0; a03 = _F0
                                a10 = _F0; a11 = _F0; a12 = _F0; a13 = _F0
                                a20 = _F0; a21 = _F0; a22 = _F0; a23 = _F0
                                a30 = _F0; a31 = _F0; a32 = _F0; a33 = _F0
                                a40 = _F0; a41 = _F0; a42 = _F0; a43 = _F0
                                if gather:
                                    for s in range(kpad_lanes):
                                        ab = s * 4
                                        v0 = abuf[ab]; v1 = abuf[ab + 1]
                                        v2 = abuf[ab + 2]; v3 = abuf[ab + 3]
                                        o = pbase + s * 20
                                        a00 += v0 * bbuf[o]; a01 += v1 * bbuf[o + 1]; a02 += v2 * bbuf[o + 2]; a03 += v3 * bbuf[o + 3]
                                        a10 += v0 * bbuf[o + 4]; a11 += v1 * bbuf[o + 5]; a12 += v2 * bbuf[o + 6]; a13 += v3 * bbuf[o + 7]
                                        a20 += v0 * bbuf[o + 8]; a21 += v1 * bbuf[o + 9]; a22 += v2 * bbuf[o + 10]; a23 += v3 * bbuf[o + 11]
                                        a30 += v0 * bbuf[o + 12]; a31 += v1 * bbuf[o + 13]; a32 += v2 * bbuf[o + 14]; a33 += v3 * bbuf[o + 15]
                                        a40 += v0 * bbuf[o + 16]; a41 += v1 * bbuf[o + 17]; a42 += v2 * bbuf[o + 18]; a43 += v3 * bbuf[o + 19]
                                else:
                                    for s in range(klanes):
                                        ab = a_base + s * 4
                                        v0 = adata[ab]; v1 = adata[ab + 1]
                                        v2 = adata[ab + 2]; v3 = adata[ab + 3]
                                        o = pbase + s * 20
                                        a00 += v0 * bbuf[o]; a01 += v1 * bbuf[o + 1]; a02 += v2 * bbuf[o + 2]; a03 += v3 * bbuf[o + 3]
                                        a10 += v0 * bbuf[o + 4]; a11 += v1 * bbuf[o + 5]; a12 += v2 * bbuf[o + 6]; a13 += v3 * bbuf[o + 7]
                                        a20 += v0 * bbuf[o + 8]; a21 += v1 * bbuf[o + 9]; a22 += v2 * bbuf[o + 10]; a23 += v3 * bbuf[o + 11]
                                        a30 += v0 * bbuf[o + 12]; a31 += v1 * bbuf[o + 13]; a32 += v2 * bbuf[o + 14]; a33 += v3 * bbuf[o + 15]
                                        a40 += v0 * bbuf[o + 16]; a41 += v1 * bbuf[o + 17]; a42 += v2 * bbuf[o + 18]; a43 += v3 * bbuf[o + 19]
                                    if ktail > 0:
                                        # B pads are zero, so lanes >= ktail add 0;
                                        # loads stay inside the row to respect stride == cols.
                                        ab = a_base + klanes * 4
                                        v0 = adata[ab]
                                        v1 = adata[ab + 1] if ktail > 1 else _F0
                                        v2 = adata[ab + 2] if ktail > 2 else _F0
                                        v3 = _F0
                                        o = pbase + klanes * 20
                                        a00 += v0 * bbuf[o]; a01 += v1 * bbuf[o + 1]; a02 += v2 * bbuf[o + 2]; a03 += v3 * bbuf[o + 3]
                                        a10 += v0 * bbuf[o + 4]; a11 += v1 * bbuf[o + 5]; a12 += v2 * bbuf[o + 6]; a13 += v3 * bbuf[o + 7]
                                        a20 += v0 * bbuf[o + 8]; a21 += v1 * bbuf[o + 9]; a22 += v2 * bbuf[o + 10]; a23 += v3 * bbuf[o + 11]
                                        a30 += v0 * bbuf[o + 12]; a31 += v1 * bbuf[o + 13]; a32 += v2 * bbuf[o + 14]; a33 += v3 * bbuf[o + 15]
                                        a40 += v0 * bbuf[o + 16]; a41 += v1 * bbuf[o + 17]; a42 += v2 * bbuf[o + 18]; a43 += v3 * bbuf[o + 19]
                                cdata[c_base] += alpha * (((a00 + a01) + a02) + a03)
                                cdata[c_base + 1] += alpha * (((a10 + a11) + a12) + a13)
                                cdata[c_base + 2] += alpha * (((a20 + a21) + a22) + a23)
                                cdata[c_base + 3] += alpha * (((a30 + a31) + a32) + a33)
                                cdata[c_base + 4] += alpha * (((a40 + a41) + a42) + a43)
                            else:
                                for x in range(n_panel * lane_w):
                                    acc[x] = np.float32(0.0)
                                for s in range(kpad_lanes):
                                    ab = s * lane_w
                                    ob = pbase + s * n_panel * lane_w
                                    for p in range(jb):
                                        o = ob + p * lane_w
                                        for l in range(lane_w):
                                            acc[p * lane_w + l] += abuf[ab + l] * bbuf[o + l]
                                for p in range(jb):
                                    dot = np.float32(0.0)
                                    for l in range(lane_w):
                                        dot += acc[p * lane_w + l]
                                    cdata[c_base + p] += alpha * dot


# ---------------------------------------------------------------------------
# public entry points


def _resolve_dims(a: Mat32, b: Mat32, c: Mat32, trans_a: bool, trans_b: bool):
    if trans_a and trans_b:
        raise NotImplementedError("simultaneous A^T and B^T is not supported")
    m, ka = (a.cols, a.rows) if trans_a else (a.rows, a.cols)
    n, kb = (b.rows, b.cols) if trans_b else (b.cols, b.rows)
    if ka != kb:
        raise ShapeError(f"inner dimensions disagree: {ka} vs {kb}")
    if c.shape != (m, n):
        raise ShapeError(f"c has shape {c.shape}, expected {(m, n)}")
    return m, n, ka


def _apply_beta(c: Mat32, beta: float) -> None:
    if beta == 0.0:
        c.view()[:] = np.float32(0.0)
    elif beta != 1.0:
        cv = c.view()
        cv *= np.float32(beta)


def gemm_naive(a: Mat32, b: Mat32, c: Mat32, alpha: float = 1.0, beta: float = 0.0,
               trans_a: bool = False, trans_b: bool = False) -> Mat32:
    """c := alpha*op(a)*op(b) + beta*c by three nested loops in pure float32.

    Sequential accumulation order and no wide accumulator make this the
    reference single-precision result the blocked kernel is checked against.
    beta == 0 overwrites c without reading it (NaN-safe).
    """
    m, n, k = _resolve_dims(a, b, c, trans_a, trans_b)
    if alpha == 0.0 and beta == 1.0:
        return c
    core = select(_naive_core)
    core(a.data, a.stride, b.data, b.stride, c.data, c.stride,
         m, n, k, np.float32(alpha), np.float32(beta), trans_a, trans_b)
    return c


def gemm_blocked(a: Mat32, b: Mat32, c: Mat32, alpha: float = 1.0, beta: float = 0.0,
                 cfg: BlockConfig | None = None,
                 trans_a: bool = False, trans_b: bool = False) -> Mat32:
    """c := alpha*op(a)*op(b) + beta*c with the packed, register-blocked kernel.

    Arbitrary m/n/k are handled by remainder paths; results match gemm_naive
    up to float32 reassociation. Raises ConfigError if cfg breaks the L1
    budget invariant.
    """
    cfg = DEFAULT_CONFIG if cfg is None else cfg
    cfg.validate()
    m, n, k = _resolve_dims(a, b, c, trans_a, trans_b)
    if alpha == 0.0 and beta == 1.0:
        return c
    _apply_beta(c, beta)
    if alpha == 0.0:
        return c
    core = select(_blocked_core)
    core(a.data, a.stride, b.data, b.stride, c.data, c.stride,
         m, n, k, np.float32(alpha), trans_a, trans_b,
         cfg.k_block, cfg.n_panel, cfg.lane_width, cfg.m2, cfg.n2, cfg.k2)
    return c


def matmul(a: Mat32, b: Mat32, trans_a: bool = False, trans_b: bool = False,
           cfg: BlockConfig | None = None, blocked: bool = True) -> Mat32:
    """Allocate and return op(a)*op(b)."""
    if trans_a and trans_b:
        raise NotImplementedError("simultaneous A^T and B^T is not supported")
    m = a.cols if trans_a else a.rows
    n = b.rows if trans_b else b.cols
    c = Mat32.zeros(m, n)
    if blocked:
        return gemm_blocked(a, b, c, 1.0, 0.0, cfg, trans_a, trans_b)
    return gemm_naive(a, b, c, 1.0, 0.0, trans_a, trans_b)


def pack_b_panel(b: Mat32, col0: int, cfg: BlockConfig | None = None,
                 k0: int = 0, k_len: int | None = None,
                 n_cols: int | None = None) -> np.ndarray:
    """Pack an (k_len x n_cols) panel of b starting at (k0, col0).

    Returns a float32 buffer laid out as documented in ``_pack_block``: the
    panel columns interleaved in lane_width runs, zero padded to a whole
    number of lane groups. n_cols defaults to cfg.n_panel; passing a smaller
    value is the remainder path for the right edge of the matrix.
    """
    cfg = DEFAULT_CONFIG if cfg is None else cfg
    n_cols = cfg.n_panel if n_cols is None else n_cols
    k_len = b.rows - k0 if k_len is None else k_len
    if col0 < 0 or n_cols < 1 or col0 + n_cols > b.cols:
        raise IndexError(f"panel columns [{col0}, {col0 + n_cols}) outside 0..{b.cols}")
    if k0 < 0 or k_len < 1 or k0 + k_len > b.rows:
        raise IndexError(f"panel rows [{k0}, {k0 + k_len}) outside 0..{b.rows}")
    lw = cfg.lane_width
    groups = (k_len + lw - 1) // lw
    out = np.zeros(groups * n_cols * lw, dtype=np.float32)
    pack = select(_pack_block)
    pack(b.data, b.stride, False, k0, k_len, col0, n_cols, n_cols, lw, out, 0)
    return out


def unpack_b_panel(buf: np.ndarray, k_len: int, n_cols: int,
                   lane_width: int = 4) -> np.ndarray:
    """Inverse of pack_b_panel: recover the (k_len, n_cols) panel."""
    out = np.zeros((k_len, n_cols), dtype=np.float32)
    for s in range((k_len + lane_width - 1) // lane_width):
        for p in range(n_cols):
            for l in range(lane_width):
                kk = s * lane_width + l
                if kk < k_len:
                    out[kk, p] = buf[(s * n_cols + p) * lane_width + l]
    return out


# ---------------------------------------------------------------------------
# benchmark harness


@dataclass
class BenchRecord:
    kernel: str
    m: int
    n: int
    k: int
    stride: int
    wall_seconds: float
    mflops: float
    stride_overridden: bool = False


_flush_buf: dict[int, np.ndarray] = {}


def flush_caches(l2_bytes: int = DEFAULT_L2_BYTES) -> float:
    """Write then read a buffer of 4x the configured L2 size."""
    n = 4 * l2_bytes // 4
    buf = _flush_buf.get(n)
    if buf is None:
        buf = np.zeros(n, dtype=np.float32)
        _flush_buf[n] = buf
    buf += np.float32(1.0)
    return float(buf[:: 4096].sum())


def bench_gemm(sizes, kernel: str, cfg: BlockConfig | None = None,
               stride: int = BENCH_STRIDE, reps: int = 3,
               l2_bytes: int = DEFAULT_L2_BYTES, seed: int = 20) -> list[BenchRecord]:
    """Time square multiplies under the conservative protocol.

    Wall-clock time, matrices laid out with the fixed benchmark stride (using
    stride = size, flagged, when the size exceeds it), data caches flushed
    between calls, median of ``reps`` repetitions.
    """
    if kernel not in ("naive", "blocked"):
        raise ValueError(f"unknown kernel {kernel!r}")
    cfg = DEFAULT_CONFIG if cfg is None else cfg
    records = []
    for size in sizes:
        s = int(size)
        row_stride = stride if s <= stride else s
        rng = np.random.default_rng((seed, s))
        a = Mat32(s, s, row_stride,
                  rng.uniform(-1, 1, s * row_stride).astype(np.float32))
        b = Mat32(s, s, row_stride,
                  rng.uniform(-1, 1, s * row_stride).astype(np.float32))
        c = Mat32.zeros(s, s, row_stride)
        times = []
        for _ in range(max(3, reps)):
            flush_caches(l2_bytes)
            t0 = time.perf_counter()
            if kernel == "naive":
                gemm_naive(a, b, c, 1.0, 0.0)
            else:
                gemm_blocked(a, b, c, 1.0, 0.0, cfg)
            times.append(time.perf_counter() - t0)
        wall = sorted(times)[len(times) // 2]
        records.append(BenchRecord(
            kernel=kernel, m=s, n=s, k=s, stride=row_stride,
            wall_seconds=wall, mflops=2.0 * s * s * s / wall / 1e6,
            stride_overridden=row_stride != stride,
        ))
    return records


def write_bench_csv(records, path) -> None:
    with open(path, "w") as fh:
        fh.write("kernel,m,n,k,stride,seconds,mflops\n")
        for r in records:
            fh.write(f"{r.kernel},{r.m},{r.n},{r.k},{r.stride},"
                     f"{r.wall_seconds:.9f},{r.mflops:.3f}\n")


def derive_l2_blocks(k_block: int, n_panel: int,
                     l2_bytes: int = DEFAULT_L2_BYTES) -> tuple[int, int, int]:
    """Pick (m2, n2, k2) so the packed panel block stays L2-resident."""
    n2 = (l2_bytes // 4) // (4 * k_block)
    n2 = max(n_panel, min(240, n2 // n_panel * n_panel))
    return 128, n2, k_block


def tune_blocks(l1_bytes: int = DEFAULT_L1_BYTES, l2_bytes: int = DEFAULT_L2_BYTES,
                size: int = 512, reps: int = 1, seed: int = 20) -> BlockConfig:
    """Grid-search k_block and n_panel under the L1 budget, best measured rate wins.

    The candidate grid is k_block in {64, 128, ..., 512} x n_panel in {1..8},
    filtered by the L1 working-set invariant; each survivor is timed on a
    square multiply of the given size.
    """
    if l1_bytes <= 0 or l2_bytes <= 0:
        raise ConfigError("cache budgets must be positive")
    best_cfg = None
    best_rate = -1.0
    for k_block in range(64, 513, 64):
        for n_panel in range(1, 9):
            if k_block * (n_panel + 1) * 4 > l1_bytes:
                continue
            m2, n2, k2 = derive_l2_blocks(k_block, n_panel, l2_bytes)
            cand = BlockConfig(k_block=k_block, n_panel=n_panel, lane_width=4,
                               m2=m2, n2=n2, k2=k2)
            rec = bench_gemm([size], "blocked", cand, stride=size,
                             reps=reps, l2_bytes=l2_bytes, seed=seed)[0]
            if rec.mflops > best_rate:
                best_rate = rec.mflops
                best_cfg = cand
    if best_cfg is None:
        raise ConfigError(f"no feasible block configuration for L1 budget {l1_bytes}")
    return best_cfg

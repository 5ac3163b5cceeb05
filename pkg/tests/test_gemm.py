import os
import subprocess
import sys

import numpy as np
import pytest

from ulsnn.matcore import Mat32, ShapeError
from ulsnn.gemm import (
    BlockConfig, ConfigError, bench_gemm, gemm_blocked, gemm_naive, matmul,
    pack_b_panel, tune_blocks, unpack_b_panel,
)

from helpers import max_scaled_rel_err

TOL = 1e-5


def rand_mat(rng, rows, cols, stride_pad=0):
    return Mat32.from_array(
        rng.uniform(-1, 1, (rows, cols)).astype(np.float32),
        stride=cols + stride_pad)


def check_blocked(rng, m, n, k, trans_a=False, trans_b=False,
                  alpha=1.0, beta=0.0, cfg=None, pad=0):
    ash = (k, m) if trans_a else (m, k)
    bsh = (n, k) if trans_b else (k, n)
    a = rand_mat(rng, *ash, stride_pad=pad)
    b = rand_mat(rng, *bsh, stride_pad=pad)
    c0 = rng.uniform(-1, 1, (m, n)).astype(np.float32)
    c_ref = Mat32.from_array(c0)
    c_got = Mat32.from_array(c0, stride=n + pad)
    gemm_naive(a, b, c_ref, alpha, beta, trans_a, trans_b)
    gemm_blocked(a, b, c_got, alpha, beta, cfg, trans_a, trans_b)
    err = max_scaled_rel_err(c_ref.view(), c_got.view())
    assert err <= TOL, (m, n, k, trans_a, trans_b, alpha, beta, err)


def test_naive_identity():
    a = Mat32.from_array(np.eye(2, dtype=np.float32))
    b = Mat32.from_array([[1, 2], [3, 4]])
    c = Mat32.zeros(2, 2)
    gemm_naive(a, b, c, 1.0, 0.0)
    assert np.array_equal(c.view(), [[1, 2], [3, 4]])


def test_naive_scalar_alpha_beta():
    # 1x1: alpha*a*b + beta*c = 2*12 + 10*5 = 74
    a = Mat32.from_array([[3.0]])
    b = Mat32.from_array([[4.0]])
    c = Mat32.from_array([[5.0]])
    gemm_naive(a, b, c, 2.0, 10.0)
    assert c.view()[0, 0] == 74.0


@pytest.mark.parametrize("fn", [gemm_naive, gemm_blocked])
def test_alpha0_beta1_leaves_c_bit_identical(fn):
    rng = np.random.default_rng(2)
    a = rand_mat(rng, 6, 5)
    b = rand_mat(rng, 5, 4)
    c = rand_mat(rng, 6, 4)
    before = c.data.copy()
    fn(a, b, c, 0.0, 1.0)
    assert np.array_equal(c.data.view(np.uint32), before.view(np.uint32))


@pytest.mark.parametrize("fn", [gemm_naive, gemm_blocked])
def test_beta0_ignores_nan_in_c(fn):
    rng = np.random.default_rng(3)
    a = rand_mat(rng, 4, 3)
    b = rand_mat(rng, 3, 5)
    c = Mat32.from_array(np.full((4, 5), np.nan, dtype=np.float32))
    fn(a, b, c, 1.0, 0.0)
    assert np.all(np.isfinite(c.view()))


def test_shape_errors():
    a = Mat32.zeros(2, 3)
    b = Mat32.zeros(4, 2)
    c = Mat32.zeros(2, 2)
    with pytest.raises(ShapeError):
        gemm_naive(a, b, c)
    with pytest.raises(ShapeError):
        gemm_blocked(a, Mat32.zeros(3, 2), Mat32.zeros(3, 2))
    with pytest.raises(NotImplementedError):
        gemm_blocked(a, b, c, trans_a=True, trans_b=True)


def test_config_validation():
    with pytest.raises(ConfigError):
        BlockConfig(k_block=0).validate()
    with pytest.raises(ConfigError):
        BlockConfig(k_block=2, lane_width=4).validate()
    with pytest.raises(ConfigError):
        # 512 * 9 * 4 B = 18 KiB > 16 KiB budget
        BlockConfig(k_block=512, n_panel=8).validate(l1_bytes=16 * 1024)
    with pytest.raises(ConfigError):
        rng = np.random.default_rng(0)
        a = rand_mat(rng, 2, 2)
        gemm_blocked(a, a, Mat32.zeros(2, 2), cfg=BlockConfig(n_panel=0))


def test_blocked_scalar_case():
    check_blocked(np.random.default_rng(4), 1, 1, 1)


def test_blocked_all_remainders():
    # spec's remainder-heavy shape: nothing divides the default blocking
    check_blocked(np.random.default_rng(5), 17, 13, 339)


def test_blocked_square_sweep_matches_naive():
    rng = np.random.default_rng(6)
    for size in range(16, 701, 16):
        check_blocked(rng, size, size, size)


def test_blocked_shape_fuzz():
    rng = np.random.default_rng(7)
    for m, n, k in [(1, 1, 3), (2, 3, 1), (3, 1, 2), (1, 6, 1)]:
        check_blocked(rng, m, n, k)
    for _ in range(40):
        m, n, k = (int(x) for x in rng.integers(1, 90, 3))
        trans_a, trans_b = [(False, False), (True, False), (False, True)][int(rng.integers(0, 3))]
        alpha = float(rng.choice([1.0, 2.0, -0.5]))
        beta = float(rng.choice([0.0, 1.0, 0.5]))
        pad = int(rng.integers(0, 7))
        check_blocked(rng, m, n, k, trans_a, trans_b, alpha, beta, pad=pad)


def test_blocked_nondefault_configs():
    rng = np.random.default_rng(8)
    for cfg in (BlockConfig(k_block=64, n_panel=3, lane_width=4, m2=16, n2=21, k2=64),
                BlockConfig(k_block=32, n_panel=2, lane_width=2, m2=8, n2=10, k2=96),
                BlockConfig(k_block=16, n_panel=1, lane_width=4, m2=4, n2=5, k2=16)):
        check_blocked(rng, 37, 29, 83, cfg=cfg)
        check_blocked(rng, 37, 29, 83, trans_a=True, cfg=cfg)
        check_blocked(rng, 37, 29, 83, trans_b=True, cfg=cfg)


def test_matmul_transposed_path_matches_explicit_transpose():
    rng = np.random.default_rng(9)
    at = rand_mat(rng, 50, 7)   # computing at^T @ x
    x = rand_mat(rng, 50, 11)
    got = matmul(at, x, trans_a=True)
    a_explicit = Mat32.from_array(at.view().T)
    ref = Mat32.zeros(7, 11)
    gemm_naive(a_explicit, x, ref)
    assert max_scaled_rel_err(ref.view(), got.view()) <= TOL


def test_pack_single_column_verbatim():
    rng = np.random.default_rng(10)
    b = rand_mat(rng, 8, 3)
    cfg = BlockConfig(k_block=8, n_panel=1, lane_width=4, m2=1, n2=1, k2=8)
    buf = pack_b_panel(b, 1, cfg)
    assert np.array_equal(buf, b.view()[:, 1])


def test_pack_lane_interleave_layout():
    # 4x2 panel, lane_width=2: [b00,b10, b01,b11, b20,b30, b21,b31]
    b = Mat32.from_array([[1, 2], [3, 4], [5, 6], [7, 8]])
    cfg = BlockConfig(k_block=4, n_panel=2, lane_width=2, m2=1, n2=2, k2=4)
    buf = pack_b_panel(b, 0, cfg)
    assert np.array_equal(buf, [1, 3, 2, 4, 5, 7, 6, 8])


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(11)
    b = rand_mat(rng, 23, 9, stride_pad=4)
    cfg = BlockConfig(k_block=23, n_panel=4, lane_width=4, m2=1, n2=8, k2=23)
    for col0, ncols in ((0, 4), (4, 4), (5, 4), (7, 2)):
        buf = pack_b_panel(b, col0, cfg, n_cols=ncols)
        back = unpack_b_panel(buf, 23, ncols, cfg.lane_width)
        assert np.array_equal(back, b.view()[:, col0:col0 + ncols])


def test_pack_bounds_error():
    b = Mat32.zeros(4, 4)
    with pytest.raises(IndexError):
        pack_b_panel(b, 3, BlockConfig(n_panel=5, k_block=8))


def test_bench_records():
    recs = bench_gemm([16, 33], "blocked", reps=3, l2_bytes=1 << 18)
    assert len(recs) == 2
    for r in recs:
        assert r.stride == 700 and not r.stride_overridden
        assert r.mflops > 0 and r.wall_seconds > 0
        assert r.mflops == 2.0 * r.m * r.n * r.k / r.wall_seconds / 1e6
    big = bench_gemm([701], "blocked", reps=3, l2_bytes=1 << 18)[0]
    assert big.stride == 701 and big.stride_overridden


def test_tune_blocks_respects_paper_era_l1():
    cfg = tune_blocks(l1_bytes=16 * 1024, l2_bytes=1 << 20, size=64, reps=1)
    cfg.validate(l1_bytes=16 * 1024)
    assert cfg.k_block * (cfg.n_panel + 1) <= 4096  # floats in 16 KiB


def test_tune_blocks_beats_degenerate_config():
    cfg = tune_blocks(size=160, reps=1)
    best = bench_gemm([160], "blocked", cfg, stride=160, reps=3, l2_bytes=1 << 18)[0]
    worst_cfg = BlockConfig(k_block=16, n_panel=1, lane_width=4, m2=16, n2=16, k2=16)
    worst = bench_gemm([160], "blocked", worst_cfg, stride=160, reps=3, l2_bytes=1 << 18)[0]
    assert best.mflops >= worst.mflops


def test_fallback_path_matches_jit():
    code = """
import numpy as np
from ulsnn.matcore import Mat32
from ulsnn.gemm import gemm_blocked
import ulsnn._jit as jit
assert not jit.jit_enabled()
rng = np.random.default_rng(12)
a = Mat32.from_array(rng.uniform(-1, 1, (7, 9)).astype(np.float32))
b = Mat32.from_array(rng.uniform(-1, 1, (9, 6)).astype(np.float32))
c = Mat32.zeros(7, 6)
gemm_blocked(a, b, c)
np.save('fallback_c.npy', c.view())
"""
    env = dict(os.environ, ULSNN_NO_JIT="1")
    subprocess.run([sys.executable, "-c", code], check=True, env=env, cwd="/tmp")
    fallback = np.load("/tmp/fallback_c.npy")
    rng = np.random.default_rng(12)
    a = Mat32.from_array(rng.uniform(-1, 1, (7, 9)).astype(np.float32))
    b = Mat32.from_array(rng.uniform(-1, 1, (9, 6)).astype(np.float32))
    c = Mat32.zeros(7, 6)
    gemm_blocked(a, b, c)
    assert max_scaled_rel_err(fallback, c.view()) <= TOL

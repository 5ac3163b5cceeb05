"""Conjugate-gradient training loop with a sign-bracketed line search.

Directions follow the Polak-Ribiere rule with the usual non-negativity clip
(beta = max(0, g_new.(g_new - g_old) / g_old.g_old)); a non-ascent direction
resets to the raw gradient. Because the gradient engine returns an ascent
direction for -E (see nn), parameters move as W := W + step * d.

The 1-D search locates the maximum of -E along d in three phases:

1. exponential expansion: probe steps initial_step * growth^n and keep only
   the SIGN of the directional slope, estimated from a small fraction of the
   training patterns, until the sign flips from + to -;
2. quadratic interpolation through the bracket's endpoints and midpoint
   (full-precision objective values, three evaluations);
3. acceptance: if the subsampled slope magnitude at the interpolated point is
   not yet small relative to the slope at 0, bisect the surviving half once.

All expensive evaluations go through a provider object, so the same loop
drives an in-memory batch or the data-parallel trainer:

    provider.start(params)            install the starting weights everywhere
    provider.gradient()               -> GradResult at the current weights
    provider.set_direction(d_vec)     flat float32 search direction
    provider.slope_at(step)           subsampled slope of -E at W + step*d
    provider.error_at(step)           full E at W + step*d
    provider.commit(step)             W += step*d on every holder
    provider.drain_flops()            contributing flops since the last call
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .matcore import Mat32
from .nn import GradResult

log = logging.getLogger(__name__)


class DirectionError(RuntimeError):
    """Search direction is not an ascent direction at step 0."""


@dataclass
class LineSearchCfg:
    initial_step: float = 1e-3
    growth: float = 2.0
    max_expansions: int = 40
    sign_sample_fraction: float = 0.1
    accept_slope_frac: float = 0.05
    refine_max: int = 16

    def validate(self) -> None:
        if self.growth <= 1.0:
            raise ValueError(f"growth must exceed 1, got {self.growth}")
        if not 0.0 < self.sign_sample_fraction <= 1.0:
            raise ValueError(f"sign_sample_fraction must be in (0, 1], got "
                             f"{self.sign_sample_fraction}")
        if self.initial_step <= 0 or self.max_expansions < 1:
            raise ValueError("initial_step must be > 0 and max_expansions >= 1")
        if self.refine_max < 1:
            raise ValueError("refine_max must be >= 1")


@dataclass
class CgState:
    prev_grad: np.ndarray | None = None
    direction: np.ndarray | None = None
    iteration: int = 0
    last_step: float = 0.0


@dataclass
class BracketResult:
    lo: float
    hi: float
    bracketed: bool
    probes: int


@dataclass
class EpochRecord:
    epoch: int
    error: float
    step: float
    seconds: float
    gflops: float
    beta: float
    bracketed: bool
    n_patterns: int


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    sign_probes: int = 0
    sign_agreement: int = 0

    @property
    def errors(self) -> list[float]:
        return [r.error for r in self.records]

    def decrease_count(self) -> int:
        e = self.errors
        return sum(1 for a, b in zip(e, e[1:]) if b < a)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,error,step,seconds,gflops\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.error:.9e},{r.step:.9e},"
                         f"{r.seconds:.6f},{r.gflops:.6f}\n")


def flatten_pair(a: Mat32, b: Mat32) -> np.ndarray:
    return np.concatenate([a.view().ravel(), b.view().ravel()])


def grad_vec(res: GradResult) -> np.ndarray:
    return flatten_pair(res.g_ih, res.g_ho)


def _dot64(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a.astype(np.float64), b.astype(np.float64)))


def pr_beta(g_new: np.ndarray, g_old: np.ndarray) -> float:
    """Polak-Ribiere coefficient, clipped at zero (clip acts as a restart)."""
    if g_new.shape != g_old.shape:
        raise ValueError(f"length mismatch {g_new.shape} vs {g_old.shape}")
    denom = _dot64(g_old, g_old)
    if denom == 0.0:
        return 0.0
    num = _dot64(g_new, g_new) - _dot64(g_new, g_old)
    return max(0.0, num / denom)


def next_direction(g: np.ndarray, state: CgState, beta: float | None = None) -> np.ndarray:
    """d = g + beta * d_prev, or plain g on the first iteration / restart."""
    if state.iteration == 0 or state.direction is None or not beta:
        return g.astype(np.float32).copy()
    if state.direction.shape != g.shape:
        raise ValueError("direction shape changed between iterations")
    return (g + np.float32(beta) * state.direction).astype(np.float32)


def bracket_by_sign(slope_sign, cfg: LineSearchCfg,
                    start_step: float | None = None) -> BracketResult:
    """Expand steps geometrically until the slope sign flips.

    ``slope_sign(step)`` only has its sign inspected. Requires a positive
    slope at step 0; returns (lo, hi) with sign(lo) >= 0 > sign(hi), or the
    last two probed steps with bracketed=False when no flip shows up within
    max_expansions probes. ``start_step`` overrides the first probe, which
    lets the trainer seed each search near the previous accepted step.
    """
    cfg.validate()
    if slope_sign(0.0) <= 0.0:
        raise DirectionError("slope at step 0 is not positive")
    probes = 1
    lo = 0.0
    step = cfg.initial_step if start_step is None or start_step <= 0 else start_step
    prev = 0.0
    for _ in range(cfg.max_expansions):
        s = slope_sign(step)
        probes += 1
        if s <= 0.0:
            return BracketResult(lo, step, True, probes)
        prev = lo
        lo = step
        step *= cfg.growth
    return BracketResult(prev, lo, False, probes)


def quad_interpolate(s0: float, f0: float, s1: float, f1: float,
                     s2: float, f2: float) -> float:
    """Vertex abscissa of the parabola through three points, clamped to [s0, s2].

    Intended for bracket-shaped samples (s0 < s1 < s2, f1 >= max(f0, f2));
    collinear points degrade to s1.
    """
    d01 = s1 - s0
    d21 = s1 - s2
    num = d01 * d01 * (f1 - f2) - d21 * d21 * (f1 - f0)
    den = d01 * (f1 - f2) - d21 * (f1 - f0)
    if den == 0.0 or not np.isfinite(den):
        return s1
    vertex = s1 - 0.5 * num / den
    return float(min(max(vertex, s0), s2))


@dataclass
class LineSearchInfo:
    step: float
    bracketed: bool
    slope_probes: int
    value_evals: int
    next_start: float


def line_search(slope_at, error_at, e0: float, slope0: float,
                cfg: LineSearchCfg, start_step: float | None = None) -> LineSearchInfo:
    """Locate a step maximizing -E along the current direction.

    Sign-only bracketing (subsampled slopes), then quadratic interpolation on
    full objective values. When the subsample misjudges the bracket interior
    (the midpoint is worse than an endpoint), the bracket is bisected toward
    the better endpoint before interpolating, so a peak far below the first
    probe is still found. An unbracketed search or an exhausted refinement
    falls back to the best evaluated point, never an unevaluated blind step.
    """
    cfg.validate()
    probes = 0

    def oracle(s):
        nonlocal probes
        if s == 0.0:
            return slope0
        probes += 1
        return slope_at(s)

    values = {0.0: -e0}

    def f(s):
        if s not in values:
            values[s] = -error_at(s)
        return values[s]

    def best_step():
        top = max(values.items(), key=lambda kv: (kv[1], -kv[0]))
        return top[0]

    br = bracket_by_sign(oracle, cfg, start_step)
    if not br.bracketed:
        step = br.lo if br.lo > 0.0 and f(br.lo) > f(0.0) else 0.0
        nxt = step if step > 0.0 else cfg.initial_step
        return LineSearchInfo(step, False, probes, len(values) - 1, nxt)

    lo, hi = br.lo, br.hi
    step = None
    for _ in range(cfg.refine_max):
        mid = 0.5 * (lo + hi)
        f_lo, f_mid, f_hi = f(lo), f(mid), f(hi)
        if f_mid >= f_lo and f_mid >= f_hi:
            s_star = quad_interpolate(lo, f_lo, mid, f_mid, hi, f_hi)
            if not lo < s_star < hi:
                s_star = mid
            m_star = oracle(s_star)
            if abs(m_star) > cfg.accept_slope_frac * abs(slope0):
                step = 0.5 * (s_star + hi) if m_star > 0.0 else 0.5 * (lo + s_star)
            else:
                step = s_star
            break
        # subsampled bracket disagrees with the objective: shrink toward the
        # better endpoint and retry
        if f_lo >= f_hi:
            hi = mid
        else:
            lo = mid
    if step is None or f(step) < f(best_step()):
        step = best_step()
    nxt = step if step > 0.0 else max(hi, cfg.initial_step * 2.0**-20)
    return LineSearchInfo(step, True, probes, len(values) - 1, nxt)


def cg_train(p, provider, epochs: int, cfg: LineSearchCfg | None = None,
             force_steepest: bool = False) -> TrainHistory:
    """Drive the conjugate-gradient loop for a number of epochs.

    Each epoch runs one full gradient, a direction update, the sign-bracketed
    line search, and a parameter commit. With force_steepest the direction is
    always the raw gradient (beta pinned to 0), which is the steepest-ascent
    special case used by the regression tests.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    cfg = LineSearchCfg() if cfg is None else cfg
    cfg.validate()
    provider.start(p)
    state = CgState()
    history = TrainHistory()

    for epoch in range(epochs):
        t0 = time.perf_counter()
        res = provider.gradient()
        g = grad_vec(res)
        energy = res.error

        beta = 0.0
        if not force_steepest and state.iteration > 0 and state.prev_grad is not None:
            beta = pr_beta(g, state.prev_grad)
        d = next_direction(g, state, beta)
        slope0 = _dot64(g, d)
        if slope0 <= 0.0:
            # conjugate direction turned non-ascent: restart on the gradient
            beta = 0.0
            d = g.astype(np.float32).copy()
            slope0 = _dot64(g, g)
            if slope0 <= 0.0:
                log.info("epoch %d: zero gradient, stopping", epoch)
                history.records.append(EpochRecord(
                    epoch, energy, 0.0, time.perf_counter() - t0, 0.0,
                    beta, False, res.n_patterns))
                break
        provider.set_direction(d)

        ls = line_search(provider.slope_at, provider.error_at, energy, slope0,
                         cfg, start_step=state.last_step or None)
        step = ls.step
        if not ls.bracketed:
            log.warning("epoch %d: no sign flip within %d expansions, taking %g",
                        epoch, cfg.max_expansions, step)
        if step > 0.0:
            provider.commit(step)

        state.prev_grad = g
        state.direction = d
        state.iteration += 1
        state.last_step = ls.next_start

        seconds = time.perf_counter() - t0
        flops = provider.drain_flops()
        gflops = flops / seconds / 1e9 if seconds > 0 else 0.0
        history.records.append(EpochRecord(
            epoch, energy, step, seconds, gflops, beta, ls.bracketed,
            res.n_patterns))
        log.info("epoch %d: E=%.6g step=%.4g beta=%.3g %.3fs %.2f GF/s",
                 epoch, energy, step, beta, seconds, gflops)

    agree = getattr(provider, "sign_agreement_stats", None)
    if agree is not None:
        history.sign_agreement, history.sign_probes = agree()
        if history.sign_probes:
            log.info("subsampled slope sign agreed with full data in %d/%d probes",
                     history.sign_agreement, history.sign_probes)
    return history


class InMemoryProvider:
    """Single-process provider evaluating everything on one resident batch."""

    def __init__(self, batch, seed: int = 0, gemm_cfg=None,
                 sign_sample_fraction: float = 0.1,
                 track_sign_agreement: bool = False):
        from . import nn
        self._nn = nn
        self.batch = batch
        self.gemm_cfg = gemm_cfg
        self.fraction = sign_sample_fraction
        self.track = track_sign_agreement
        self._rng = np.random.default_rng(seed)
        self._params = None
        self._d_ih = None
        self._d_ho = None
        self._flops = 0
        self._agree = 0
        self._probes = 0

    def start(self, p) -> None:
        self._params = p.copy()

    def params(self):
        return self._params

    def gradient(self) -> GradResult:
        res = self._nn.gradient(self._params, self.batch, cfg=self.gemm_cfg)
        self._flops += res.flops
        return res

    def set_direction(self, d: np.ndarray) -> None:
        p = self._params
        n_ih = p.n_h * p.n_i
        self._d_ih = d[:n_ih].reshape(p.n_h, p.n_i)
        self._d_ho = d[n_ih:].reshape(p.n_o, p.n_h)

    def _stepped(self, step: float):
        p = self._params.copy()
        p.w_ih.view()[:] += np.float32(step) * self._d_ih
        p.w_ho.view()[:] += np.float32(step) * self._d_ho
        return p

    def _subsample(self):
        n_p = self.batch.n_patterns
        count = max(1, int(round(self.fraction * n_p)))
        idx = np.sort(self._rng.choice(n_p, size=count, replace=False))
        x = Mat32.from_array(self.batch.x.view()[idx])
        t = Mat32.from_array(self.batch.t.view()[idx])
        return self._nn.Batch(x, t)

    def slope_at(self, step: float) -> float:
        p = self._stepped(step)
        sub = self._subsample()
        res = self._nn.gradient(p, sub, cfg=self.gemm_cfg)
        self._flops += res.flops
        slope = _dot64(grad_vec(res), np.concatenate([self._d_ih.ravel(),
                                                      self._d_ho.ravel()]))
        if self.track:
            full = self._nn.gradient(p, self.batch, cfg=self.gemm_cfg)
            full_slope = _dot64(grad_vec(full),
                                np.concatenate([self._d_ih.ravel(),
                                                self._d_ho.ravel()]))
            self._probes += 1
            if np.sign(full_slope) == np.sign(slope):
                self._agree += 1
        return slope

    def error_at(self, step: float) -> float:
        p = self._stepped(step)
        _, y = self._nn.forward(p, self.batch.x, cfg=self.gemm_cfg)
        self._flops += self._nn.error_flops(self.batch.n_patterns,
                                            p.n_i, p.n_h, p.n_o)
        return self._nn.mse_error(y, self.batch.t)

    def commit(self, step: float) -> None:
        p = self._params
        p.w_ih.view()[:] += np.float32(step) * self._d_ih
        p.w_ho.view()[:] += np.float32(step) * self._d_ho

    def drain_flops(self) -> int:
        f = self._flops
        self._flops = 0
        return f

    def sign_agreement_stats(self):
        return self._agree, self._probes

"""Shared test utilities."""

import numpy as np


def max_scaled_rel_err(ref: np.ndarray, got: np.ndarray) -> float:
    """Worst elementwise error relative to max(|ref element|, matrix scale).

    Pure elementwise-relative error is unbounded wherever a dot product
    cancels to ~0, so tiny entries are judged against the overall magnitude
    of the reference matrix instead, the standard GEMM accuracy measure.
    """
    ref = np.asarray(ref, dtype=np.float64)
    got = np.asarray(got, dtype=np.float64)
    scale = np.max(np.abs(ref))
    if scale == 0.0:
        scale = 1.0
    return float(np.max(np.abs(ref - got) / np.maximum(np.abs(ref), scale)))

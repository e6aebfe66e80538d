from __future__ import annotations

from typing import Sequence

import numpy as np

# Relative slack when comparing a resampled statistic with the observed one,
# so that sign patterns giving the same mean up to rounding count as ties.
_TIE_RTOL = 1e-12


def _sign_matrix(n: int) -> np.ndarray:
    codes = np.arange(2 ** n, dtype=np.int64)[:, None]
    bits = (codes >> np.arange(n, dtype=np.int64)) & 1
    return 1.0 - 2.0 * bits


def permutation_test(scores_a: Sequence[float], scores_b: Sequence[float],
                     n_resamples: int = 10_000, seed: int = 0, method: str = "auto") -> float:
    """Two-sided paired sign-flip test on the mean difference.

    ``method="auto"`` enumerates all 2^n sign patterns when that is at most
    ``n_resamples`` and otherwise draws ``n_resamples`` random patterns, with
    p = (hits + 1) / (n_resamples + 1).
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired scores must have equal length, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValueError("need at least one pair")
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    if method not in ("auto", "exact", "monte_carlo"):
        raise ValueError(f"unknown method {method!r}")
    d = a - b
    n = d.size
    observed = abs(d.mean())
    cut = observed - _TIE_RTOL * max(observed, np.abs(d).max())
    exact = method == "exact" or (method == "auto" and 2 ** n <= n_resamples)
    if exact:
        if n > 24:
            raise ValueError(f"exact enumeration of 2^{n} patterns is too large")
        stats = np.abs(_sign_matrix(n) @ d) / n
        return float(np.count_nonzero(stats >= cut) / stats.size)
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, n_resamples, 8192):
        m = min(8192, n_resamples - start)
        signs = rng.choice((-1.0, 1.0), size=(m, n))
        hits += int(np.count_nonzero(np.abs(signs @ d) / n >= cut))
    return (hits + 1) / (n_resamples + 1)

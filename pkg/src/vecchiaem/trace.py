"""Rademacher probe ensembles and Hutchinson-type trace estimation.

Probes are drawn from a counter-based generator keyed per column, so an
ensemble of S probes is a prefix of any larger ensemble with the same seed:
augmenting the probe count never redraws existing columns. Probes are drawn
once per fit and reused across EM iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class SAAEnsemble:
    """Sign-probe matrix V (n x count) with optional presolved columns.

    ``presolved`` holds W(theta0)^{-T} V in symmetrized mode or
    A(theta0)^{-1} V in unsymmetrized mode; ``mode`` records which.
    """

    probes: np.ndarray
    seed: int
    mode: str = "raw"
    presolved: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.probes.shape[0]

    @property
    def count(self):
        return self.probes.shape[1]

    def subset(self, count):
        """The leading columns, as an independent raw ensemble."""
        if count > self.count:
            raise ValueError("subset larger than the ensemble")
        return SAAEnsemble(probes=self.probes[:, :count], seed=self.seed)


def _column(n, seed, j):
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, j], dtype=np.uint64)))
    return rng.integers(0, 2, size=n).astype(float) * 2.0 - 1.0


def draw_saa(n, count, seed=0) -> SAAEnsemble:
    """Draw an n x count matrix of independent +-1 probes.

    Column j depends only on (seed, j), so fixing the seed makes ensembles
    bit-identical across runs and nested across counts.
    """
    if n < 1 or count < 1:
        raise ValueError("n and count must be >= 1")
    v = np.empty((n, count))
    for j in range(count):
        v[:, j] = _column(n, int(seed), j)
    return SAAEnsemble(probes=v, seed=int(seed))


def hutchinson_trace(a_apply, ensemble: SAAEnsemble) -> float:
    """Probe-averaged trace estimate: mean of v^T A v over the ensemble."""
    v = ensemble.probes
    try:
        av = a_apply(v)
        if np.shape(av) != v.shape:
            raise ValueError("operator returned a wrong shape for matrix input")
    except (ValueError, TypeError):
        av = np.column_stack([a_apply(v[:, j]) for j in range(v.shape[1])])
    return float((v * av).sum() / v.shape[1])


def estimate_variance(a_dense) -> float:
    """Exact variance of v^T A v under sign probes: 2(||A||_F^2 - sum_j A_jj^2)."""
    a = np.asarray(a_dense, dtype=float)
    return 2.0 * float((a * a).sum() - (np.diag(a) ** 2).sum())

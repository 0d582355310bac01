"""Exact GP simulation, kriging prediction, and dataset files.

Simulation is dense-Cholesky only (guarded), which is plenty at desk
scale. Datasets round-trip through a plain CSV with header
``x1,...,xd,y[,z]``; the latent column is optional and lets studies score
predictions against the exact conditional mean under the true parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .kernels import cov_matrix, noise_matrix
from .solver import DENSE_GUARD, factor_dense


@dataclass
class SpatialDataset:
    """Observation locations, values, and (optionally) the latent field."""

    locs: np.ndarray
    y: np.ndarray
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        self.locs = np.atleast_2d(np.asarray(self.locs, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        if self.locs.shape[0] != self.y.size:
            raise ValueError("locations and observations disagree in length")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float)

    @property
    def n(self):
        return self.y.size

    @property
    def dim(self):
        return self.locs.shape[1]


@dataclass
class SimSpec:
    n: int
    dim: int = 2
    bounds: tuple = ((0.0, 1.0), (0.0, 1.0))
    seed: int = 0
    replicates: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        bounds = tuple(tuple(map(float, b)) for b in self.bounds)
        if len(bounds) != self.dim or any(hi <= lo for lo, hi in bounds):
            raise ValueError("bounds must give a positive-volume box per dimension")
        self.bounds = bounds


def _rng_for(seed, replicate=0):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                        spawn_key=(int(replicate),)))


def sample_locations(spec: SimSpec, replicate=0):
    """Uniform locations over the spec's box, deterministic in (seed, replicate)."""
    rng = _rng_for(spec.seed, replicate)
    lo = np.array([b[0] for b in spec.bounds])
    hi = np.array([b[1] for b in spec.bounds])
    return lo + (hi - lo) * rng.uniform(size=(spec.n, spec.dim))


def sample_gp(model, noise, locs, seed=0, return_latent=False,
              dense_guard=DENSE_GUARD):
    """Draw y = z + e with z ~ N(0, S) exactly via dense Cholesky."""
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    n = locs.shape[0]
    if n > dense_guard:
        raise ValueError(f"n={n} exceeds the dense simulation guard ({dense_guard})")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                       spawn_key=(7,)))
    s = cov_matrix(model, locs)
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        chol = np.linalg.cholesky(s + 1e-10 * float(np.trace(s)) / n * np.eye(n))
    z = chol @ rng.standard_normal(n)
    if noise is not None:
        e = np.sqrt(noise_matrix(noise, locs).diag) * rng.standard_normal(n)
    else:
        e = 0.0
    y = z + e
    return (y, z) if return_latent else y


def predict_nn(model, noise, dataset: SpatialDataset, x_star, k):
    """Kriging at x_star from its k nearest observations.

    Latent-process prediction: the nugget enters the data covariance but
    not the predictand variance. Returns (mean, variance).
    """
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    if x_star.ndim != 1 or x_star.size != dataset.dim:
        raise ValueError("x_star must be a single location of matching dimension")
    if not 1 <= k <= dataset.n:
        raise ValueError("k must be between 1 and n")
    if k == dataset.n:
        idx = np.arange(dataset.n)
    else:
        _, idx = cKDTree(dataset.locs).query(x_star, k=k)
        idx = np.sort(np.atleast_1d(idx))
    sub = dataset.locs[idx]
    k_nn = cov_matrix(model, sub)
    if noise is not None:
        k_nn = k_nn + np.diag(noise_matrix(noise, sub).diag)
    k_star = cov_matrix(model, x_star[None, :], sub)[0]
    fac = factor_dense(k_nn)
    alpha = fac.solve(dataset.y[idx])
    w = fac.solve(k_star)
    prior_var = float(cov_matrix(model, x_star[None, :])[0, 0])
    mean = float(k_star @ alpha)
    var = prior_var - float(k_star @ w)
    return mean, max(var, 0.0)


# -- dataset files --------------------------------------------------------------------


def save_dataset(path, dataset: SpatialDataset):
    d = dataset.dim
    cols = [f"x{i+1}" for i in range(d)] + ["y"] + (["z"] if dataset.z is not None else [])
    body = [dataset.locs, dataset.y[:, None]]
    if dataset.z is not None:
        body.append(dataset.z[:, None])
    arr = np.hstack(body)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path) -> SpatialDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    arr = np.array(rows, dtype=float)
    names = [h.strip() for h in header]
    d = sum(1 for h in names if h.startswith("x"))
    if "y" not in names:
        raise ValueError("dataset file has no y column")
    y_col = names.index("y")
    z = arr[:, names.index("z")] if "z" in names else None
    return SpatialDataset(locs=arr[:, :d], y=arr[:, y_col], z=z)

"""Covariance models: isotropic and knot-weighted anisotropic Matern.

Parameter containers double as the "model" objects the rest of the library
consumes. Fields may hold plain floats or scalar :class:`~vecchiaem.dual.Dual`
values, so the same covariance code produces forward-mode derivatives when a
fit seeds the parameter vector.

All models implement a small protocol used by the blockwise likelihood
engine: ``pair_cache(pa, pb)`` precomputes parameter-independent geometry
for a flat list of point pairs, and ``pair_cov_cached(cache)`` evaluates
covariances for the current parameters against that cache.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import dual
from .bessel import bessel_k
from .dual import Dual

_LANCZOS_G = 7.0
_LANCZOS = np.array([
    0.99999999999980993, 676.5203681218851, -1259.1392167224028,
    771.32342877765313, -176.61502916214059, 12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7,
])


def gamma_fn(z):
    """Gamma function for z > 0, Lanczos approximation, dual-capable."""
    zval = float(dual.value(z))
    if zval <= 0.0:
        raise ValueError("gamma_fn requires z > 0")
    if zval < 0.5:
        # reflection keeps the Lanczos argument >= 0.5
        return np.pi / (_sin_pi(z) * gamma_fn(1.0 - z))
    zm1 = z - 1.0
    acc = _LANCZOS[0]
    for i in range(1, len(_LANCZOS)):
        acc = acc + _LANCZOS[i] / (zm1 + i)
    t = zm1 + _LANCZOS_G + 0.5
    log_g = 0.5 * np.log(2 * np.pi) + (zm1 + 0.5) * dual.log(t) - t + dual.log(acc)
    return dual.exp(log_g)


def _sin_pi(z):
    if isinstance(z, Dual):
        return Dual(np.sin(np.pi * z.val), z.eps * (np.pi * np.cos(np.pi * z.val)))
    return np.sin(np.pi * z)


def matern_correlation(nu, t):
    """Matern correlation M_nu(t); M_nu(0) = 1 by continuity.

    M_nu(t) = 2^(1-nu)/Gamma(nu) * (sqrt(2 nu) t)^nu * K_nu(sqrt(2 nu) t).
    """
    if float(dual.value(nu)) <= 0:
        raise ValueError("matern smoothness must be positive")
    tval = np.asarray(dual.value(t), dtype=float)
    scalar_in = tval.ndim == 0 and not isinstance(t, Dual)
    tv = np.atleast_1d(tval)
    if np.any(tv < 0):
        raise ValueError("matern_correlation requires t >= 0")
    t_arr = t if isinstance(t, Dual) else np.atleast_1d(np.asarray(t, dtype=float))

    pos = tv > 0
    out = _ones_lanes(tv.shape, nu, t)
    if pos.any():
        arg = dual.sqrt(2.0 * nu) * _take(t_arr, pos)
        k = bessel_k(nu, arg)
        kval = np.asarray(dual.value(k))
        live = kval > 0.0
        arg_safe = dual.where(live, arg, np.ones_like(kval))
        c = dual.exp((1.0 - nu) * np.log(2.0) - dual.log(gamma_fn(nu))
                     + nu * dual.log(arg_safe))
        vals = dual.where(live, c * k, np.zeros_like(kval))
        out = _assign_lanes(out, pos, vals)
    if scalar_in:
        return float(dual.value(out)[0]) if not isinstance(out, Dual) else out
    return out


def _ones_lanes(shape, *tagged):
    for v in tagged:
        if isinstance(v, Dual):
            return dual.constant(np.ones(shape), v.nparams)
    return np.ones(shape)


def _take(v, idx):
    return v[idx] if isinstance(v, (Dual, np.ndarray)) else v


def _assign_lanes(target, mask, values):
    if isinstance(values, Dual) and not isinstance(target, Dual):
        target = dual.constant(target, values.nparams)
    if isinstance(target, Dual):
        if not isinstance(values, Dual):
            values = dual.constant(values, target.nparams)
        target.val[mask] = values.val
        target.eps[:, mask] = values.eps
    else:
        target[mask] = values
    return target


def _check_positive(name, v):
    if float(dual.value(v)) <= 0.0:
        raise ValueError(f"{name} must be strictly positive")


# -- isotropic Matern ---------------------------------------------------------


@dataclass
class MaternIsoParams:
    """Isotropic Matern kernel: sigma2 * M_nu(||x - x'|| / rho)."""

    sigma2: float
    rho: float
    nu: float

    def __post_init__(self):
        _check_positive("sigma2", self.sigma2)
        _check_positive("rho", self.rho)
        _check_positive("nu", self.nu)

    kind = "matern_iso"
    names = ("sigma2", "rho", "nu")
    positive = (True, True, True)

    def to_vector(self):
        return np.array([float(dual.value(v)) for v in (self.sigma2, self.rho, self.nu)])

    def replace_vector(self, vec):
        return replace(self, sigma2=vec[0], rho=vec[1], nu=vec[2])

    def dim_ok(self, d):
        return True

    def pair_cache(self, pa, pb):
        pa = np.atleast_2d(pa)
        pb = np.atleast_2d(pb)
        return {"dist": np.sqrt(((pa - pb) ** 2).sum(axis=-1))}

    def pair_cov_cached(self, cache):
        t = cache["dist"] / self.rho
        return self.sigma2 * matern_correlation(self.nu, t)

    def pair_cov(self, pa, pb):
        return self.pair_cov_cached(self.pair_cache(pa, pb))


# -- anisotropic knot-weighted Matern ------------------------------------------


def knot_weights(coord, knots):
    """Inverse-distance weights over knots, normalized to sum to one.

    A coordinate exactly on a knot takes weight one there (nearest knot
    wins; ties go to the lowest knot index via argmin).
    """
    coord = np.atleast_1d(np.asarray(coord, dtype=float))
    knots = np.asarray(knots, dtype=float)
    d = np.abs(coord[:, None] - knots[None, :])
    w = np.empty_like(d)
    hit = d.min(axis=1) == 0.0
    if hit.any():
        w[hit] = 0.0
        w[hit, d[hit].argmin(axis=1)] = 1.0
    ok = ~hit
    if ok.any():
        inv = 1.0 / d[ok]
        w[ok] = inv / inv.sum(axis=1, keepdims=True)
    return w


@dataclass
class AnisoKnotParams:
    """Geometric-anisotropy Matern with knot-interpolated scale.

    Covariance sigma(x) sigma(x') M_nu(||W^T (x - x')||) in two dimensions,
    where Gamma^{-1} = W W^T is parameterized by the upper-triangular
    inverse Cholesky factor entries (w11 > 0, w12, w22 > 0) and
    sigma(x) = sum_j weights_j(x) sigmas_j with inverse-distance weights to
    fixed knots in the last coordinate.
    """

    sigmas: np.ndarray
    w11: float
    w12: float
    w22: float
    nu: float
    knots: np.ndarray

    def __post_init__(self):
        if not isinstance(self.sigmas, (Dual,)):
            self.sigmas = np.asarray(self.sigmas, dtype=float)
        self.knots = np.asarray(self.knots, dtype=float)
        if len(self.knots) != len(dual.value(self.sigmas)):
            raise ValueError("sigmas and knots must have matching length")
        for i, s in enumerate(dual.value(self.sigmas)):
            if s <= 0:
                raise ValueError("per-knot scales must be strictly positive")
        _check_positive("w11", self.w11)
        _check_positive("w22", self.w22)
        _check_positive("nu", self.nu)

    kind = "matern_aniso"

    @property
    def names(self):
        k = len(self.knots)
        return tuple(f"sigma{j+1}" for j in range(k)) + ("W11", "W12", "W22", "nu")

    @property
    def positive(self):
        k = len(self.knots)
        return (True,) * k + (True, False, True, True)

    def to_vector(self):
        s = [float(v) for v in dual.value(self.sigmas)]
        rest = [float(dual.value(v)) for v in (self.w11, self.w12, self.w22, self.nu)]
        return np.array(s + rest)

    def replace_vector(self, vec):
        k = len(self.knots)
        if isinstance(vec, Dual):
            sig = vec[:k]
        else:
            sig = np.asarray(vec[:k], dtype=float)
        return replace(self, sigmas=sig, w11=vec[k], w12=vec[k + 1],
                       w22=vec[k + 2], nu=vec[k + 3])

    def dim_ok(self, d):
        return d == 2

    def pair_cache(self, pa, pb):
        pa = np.atleast_2d(pa)
        pb = np.atleast_2d(pb)
        if pa.shape[-1] != 2:
            raise ValueError("anisotropic model is two-dimensional")
        return {
            "diff": pa - pb,
            "wa": knot_weights(pa[:, -1], self.knots),
            "wb": knot_weights(pb[:, -1], self.knots),
        }

    def pair_cov_cached(self, cache):
        diff = cache["diff"]
        z1 = self.w11 * diff[:, 0]
        z2 = self.w12 * diff[:, 0] + self.w22 * diff[:, 1]
        rsq = z1 * z1 + z2 * z2
        rv = np.asarray(dual.value(rsq))
        r = dual.sqrt(dual.where(rv > 0, rsq, np.ones_like(rv)))
        r = dual.where(rv > 0, r, np.zeros_like(rv))
        corr = matern_correlation(self.nu, r)
        sa = _weighted_scale(cache["wa"], self.sigmas)
        sb = _weighted_scale(cache["wb"], self.sigmas)
        return sa * sb * corr

    def pair_cov(self, pa, pb):
        return self.pair_cov_cached(self.pair_cache(pa, pb))


def _weighted_scale(w, scales):
    if isinstance(scales, Dual):
        return dual.matmul(w, scales)
    return w @ np.asarray(scales, dtype=float)


# -- observation noise ---------------------------------------------------------


@dataclass
class NoiseDiagParams:
    """Diagonal observation-noise model.

    Either a constant nugget variance ``eta2`` or per-knot noise scales
    ``etas`` interpolated with the same inverse-distance weights as the
    anisotropic kernel (noise sd eta(x) = sum_j w_j(x) etas_j, variance
    eta(x)^2). Exactly one of the two must be given.
    """

    eta2: Optional[float] = None
    etas: Optional[np.ndarray] = None
    knots: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.eta2 is None) == (self.etas is None):
            raise ValueError("give exactly one of eta2 or etas")
        if self.eta2 is not None:
            _check_positive("eta2", self.eta2)
        else:
            if self.knots is None:
                raise ValueError("knot-weighted noise needs knots")
            self.knots = np.asarray(self.knots, dtype=float)
            if not isinstance(self.etas, Dual):
                self.etas = np.asarray(self.etas, dtype=float)
            for e in np.atleast_1d(dual.value(self.etas)):
                if e <= 0:
                    raise ValueError("per-knot noise scales must be positive")

    @property
    def kind(self):
        return "const" if self.eta2 is not None else "knots"

    @property
    def names(self):
        if self.eta2 is not None:
            return ("eta2",)
        return tuple(f"eta{j+1}" for j in range(len(self.knots)))

    @property
    def positive(self):
        return (True,) * len(self.names)

    def to_vector(self):
        if self.eta2 is not None:
            return np.array([float(dual.value(self.eta2))])
        return np.array([float(v) for v in dual.value(self.etas)])

    def replace_vector(self, vec):
        if self.eta2 is not None:
            return replace(self, eta2=vec[0])
        sig = vec if isinstance(vec, Dual) else np.asarray(vec, dtype=float)
        return replace(self, etas=sig)

    def diag(self, locs):
        """Noise variances at the given locations (dual-capable)."""
        locs = np.atleast_2d(locs)
        n = locs.shape[0]
        if self.eta2 is not None:
            return self.eta2 * np.ones(n)
        w = knot_weights(locs[:, -1], self.knots)
        sd = _weighted_scale(w, self.etas)
        return sd * sd


class NoiseDiag:
    """Realized diagonal noise matrix with inverse and half-inverse."""

    def __init__(self, diag):
        diag = np.asarray(diag, dtype=float)
        if np.any(diag <= 0):
            raise ValueError("noise variances must be strictly positive")
        self.diag = diag
        self.inv_diag = 1.0 / diag
        self.half_inv_diag = 1.0 / np.sqrt(diag)

    def dense(self):
        return np.diag(self.diag)


def noise_matrix(noise: NoiseDiagParams, locs) -> NoiseDiag:
    """Diagonal R(theta) at the locations, with R^{-1} and R^{-1/2}."""
    return NoiseDiag(np.asarray(dual.value(noise.diag(locs)), dtype=float))


# -- spec-level convenience ops -------------------------------------------------


def kernel_eval(model, x, x2):
    """Covariance between two single locations."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ValueError("location dimension mismatch")
    if not model.dim_ok(x.size):
        raise ValueError("location dimension does not match the model")
    out = model.pair_cov(x[None, :], x2[None, :])
    return float(dual.value(out)[0]) if not isinstance(out, Dual) else out


def cov_matrix(model, locs, locs2=None):
    """Dense covariance matrix; the square case is exactly symmetric."""
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    if not model.dim_ok(locs.shape[1]):
        raise ValueError("location dimension does not match the model")
    if locs2 is None:
        n = locs.shape[0]
        iu = np.triu_indices(n)
        vals = model.pair_cov(locs[iu[0]], locs[iu[1]])
        if isinstance(vals, Dual):
            out = dual.constant(np.zeros((n, n)), vals.nparams)
            out.val[iu] = vals.val
            out.val.T[iu] = vals.val
            for k in range(vals.nparams):
                out.eps[k][iu] = vals.eps[k]
                out.eps[k].T[iu] = vals.eps[k]
            return out
        out = np.zeros((n, n))
        out[iu] = vals
        out.T[iu] = vals
        return out
    locs2 = np.atleast_2d(np.asarray(locs2, dtype=float))
    if locs2.shape[1] != locs.shape[1]:
        raise ValueError("location dimension mismatch")
    n, m = locs.shape[0], locs2.shape[0]
    ia, ib = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    vals = model.pair_cov(locs[ia.ravel()], locs2[ib.ravel()])
    if isinstance(vals, Dual):
        return vals.reshape((n, m))
    return vals.reshape(n, m)


# -- config file round-trip -----------------------------------------------------


def save_config(path, model, noise=None):
    """Write kernel and noise parameters as plain `key = value` text."""
    lines = [f"kind = {model.kind}"]
    if isinstance(model, MaternIsoParams):
        lines += [
            f"sigma2 = {_fmt(model.sigma2)}",
            f"rho = {_fmt(model.rho)}",
            f"nu = {_fmt(model.nu)}",
        ]
    elif isinstance(model, AnisoKnotParams):
        lines += [
            "sigmas = " + ", ".join(_fmt(v) for v in dual.value(model.sigmas)),
            f"W11 = {_fmt(model.w11)}",
            f"W12 = {_fmt(model.w12)}",
            f"W22 = {_fmt(model.w22)}",
            f"nu = {_fmt(model.nu)}",
            "knots = " + ", ".join(_fmt(v) for v in model.knots),
        ]
    else:
        raise TypeError(f"unknown kernel model {type(model)!r}")
    if noise is not None:
        if noise.eta2 is not None:
            lines.append(f"eta2 = {_fmt(noise.eta2)}")
        else:
            lines.append("etas = " + ", ".join(_fmt(v) for v in dual.value(noise.etas)))
            if "knots" not in "".join(lines):
                lines.append("knots = " + ", ".join(_fmt(v) for v in noise.knots))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(v):
    return repr(float(dual.value(v)))


def load_config(path):
    """Read a `key = value` parameter file; returns (model, noise_or_None)."""
    kv = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, val = line.split("=", 1)
            kv[key.strip()] = val.strip()

    kind = kv.get("kind", "matern_iso")
    if kind == "matern_iso":
        model = MaternIsoParams(
            sigma2=float(kv["sigma2"]), rho=float(kv["rho"]), nu=float(kv["nu"]))
    elif kind == "matern_aniso":
        model = AnisoKnotParams(
            sigmas=_floats(kv["sigmas"]),
            w11=float(kv["W11"]), w12=float(kv["W12"]), w22=float(kv["W22"]),
            nu=float(kv["nu"]), knots=_floats(kv["knots"]))
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")

    noise = None
    if "eta2" in kv:
        noise = NoiseDiagParams(eta2=float(kv["eta2"]))
    elif "etas" in kv:
        noise = NoiseDiagParams(etas=_floats(kv["etas"]), knots=_floats(kv["knots"]))
    return model, noise


def _floats(s):
    return np.array([float(tok) for tok in s.replace(",", " ").split()])

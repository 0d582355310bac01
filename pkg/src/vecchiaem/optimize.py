"""Derivative-based local minimization for M steps and the initial fit.

Two methods: a trust-region Newton iteration whose model Hessian gets a
ridge added until it factorizes (so indefinite curvature cannot produce an
ascent step), and BFGS with backtracking when Hessians are too expensive.
Callers supply gradients (typically exact forward-mode values); central
finite differences are both the fallback and the validation mode.

Everything works in whatever coordinates the caller supplies; parameter
positivity is handled upstream by log-reparameterization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


@dataclass
class OptimizerConfig:
    method: str = "bfgs"              # "newton_trust_region" | "bfgs"
    grad_mode: str = "supplied"       # "supplied" (dual-backed) | "finite_diff"
    max_evals: int = 200
    grad_tol: float = 1e-6
    step_tol: float = 1e-10
    trust_init: float = 1.0
    trust_max: float = 100.0
    armijo: float = 1e-4
    max_step: float = 5.0             # line-search trial step length cap

    def __post_init__(self):
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")
        if self.grad_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class OptResult:
    x: np.ndarray
    f: float
    grad_norm: float
    n_evals: int
    status: str
    trace: list = field(default_factory=list)  # (eval_count, f, |grad|, step_norm)


def fd_gradient(fun, x, h_floor=1e-6):
    """Central differences with per-coordinate step max(1e-6, 1e-6 |x_i|)."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = max(h_floor, h_floor * abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        fp, fm = fun(x + e), fun(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("objective not finite at a finite-difference stencil point")
        g[i] = (fp - fm) / (2 * h)
    return g


def fd_hessian(fun, x, h_floor=1e-4):
    """Symmetric central-difference Hessian (validation/second-order fallback)."""
    x = np.asarray(x, dtype=float)
    p = x.size
    hess = np.empty((p, p))
    h = np.maximum(h_floor, h_floor * np.abs(x))
    f0 = fun(x)
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        hess[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(p)
            ej[j] = h[j]
            fij = fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)
            hess[i, j] = hess[j, i] = fij / (4 * h[i] * h[j])
    return hess


def _grad_of(fun, grad, config):
    if config.grad_mode == "finite_diff" or grad is None:
        return lambda x: fd_gradient(fun, x)
    return grad


def minimize(fun, x0, config: OptimizerConfig = None, grad=None, hess=None):
    """Minimize fun from x0; returns an OptResult with a per-step trace.

    Parameters
    ----------
    fun : callable x -> float (may return +inf for invalid points)
    x0 : starting point; fun(x0) must be finite
    config : OptimizerConfig
    grad : callable x -> gradient, optional (finite differences otherwise)
    hess : callable x -> Hessian, optional; Newton builds one from gradient
        differences when missing.
    """
    config = config or OptimizerConfig()
    x0 = np.asarray(x0, dtype=float)
    if not np.isfinite(fun(x0)):
        raise ValueError("objective is not finite at the starting point")
    if config.method == "newton_trust_region":
        return _newton_tr(fun, x0, config, _grad_of(fun, grad, config), hess)
    if config.method == "bfgs":
        return _bfgs(fun, x0, config, _grad_of(fun, grad, config))
    raise ValueError(f"unknown method {config.method!r}")


def _ridge_solve(h, g):
    """Newton direction with a ridge added until the Hessian factorizes."""
    p = h.shape[0]
    scale = np.abs(np.diag(h)).max() or 1.0
    ridge = 0.0
    for _ in range(60):
        try:
            c = np.linalg.cholesky(h + ridge * np.eye(p))
            step = -np.linalg.solve(c.T, np.linalg.solve(c, g))
            return step
        except np.linalg.LinAlgError:
            ridge = max(1e-10 * scale, 4.0 * ridge) if ridge else 1e-10 * scale
    return -g  # pathological; fall back to steepest descent


def _newton_tr(fun, x0, config, grad, hess):
    x = x0.copy()
    f = fun(x)
    evals = 1
    radius = config.trust_init
    trace = []
    status = "max_evals"
    hess_fn = hess if hess is not None else (lambda z: _fd_hess_from_grad(grad, z))
    while evals < config.max_evals:
        g = grad(x)
        gnorm = float(np.linalg.norm(g))
        trace.append((evals, f, gnorm, 0.0))
        if gnorm <= config.grad_tol:
            status = "grad_tol"
            break
        h = hess_fn(x)
        step = _ridge_solve(h, g)
        snorm = float(np.linalg.norm(step))
        if snorm > radius:
            # shrink onto the trust region by inflating the ridge
            lam = 1e-8 * (np.abs(np.diag(h)).max() or 1.0)
            while snorm > radius and lam < 1e12:
                step = _ridge_solve(h + lam * np.eye(x.size), g)
                snorm = float(np.linalg.norm(step))
                lam *= 10.0
        accepted = False
        while snorm >= config.step_tol:
            f_new = fun(x + step)
            evals += 1
            pred = -(g @ step + 0.5 * step @ (h @ step))
            if np.isfinite(f_new) and f_new < f:
                rho = (f - f_new) / pred if pred > 0 else 1.0
                x = x + step
                f = f_new
                radius = min(config.trust_max, 2.0 * radius) if rho > 0.75 else radius
                if rho < 0.25:
                    radius = max(snorm / 4.0, config.step_tol)
                accepted = True
                trace[-1] = (evals, f, gnorm, snorm)
                break
            step = 0.25 * step
            snorm *= 0.25
            radius = max(snorm, config.step_tol)
            if evals >= config.max_evals:
                break
        if not accepted:
            status = "step_tol" if snorm < config.step_tol else "max_evals"
            break
    else:
        status = "max_evals"
    g = grad(x)
    return OptResult(x=x, f=f, grad_norm=float(np.linalg.norm(g)),
                     n_evals=evals, status=status, trace=trace)


def _fd_hess_from_grad(grad, x, h_floor=1e-5):
    x = np.asarray(x, dtype=float)
    p = x.size
    cols = np.empty((p, p))
    for i in range(p):
        h = max(h_floor, h_floor * abs(x[i]))
        e = np.zeros(p)
        e[i] = h
        cols[:, i] = (grad(x + e) - grad(x - e)) / (2 * h)
    return 0.5 * (cols + cols.T)


def _bfgs(fun, x0, config, grad):
    x = x0.copy()
    f = fun(x)
    g = grad(x)
    evals = 1
    p = x.size
    hinv = np.eye(p)
    trace = [(evals, f, float(np.linalg.norm(g)), 0.0)]
    status = "max_evals"
    while evals < config.max_evals:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= config.grad_tol:
            status = "grad_tol"
            break
        d = -hinv @ g
        if g @ d >= 0:
            hinv = np.eye(p)
            d = -g
        # backtracking Armijo line search, trial steps capped in length
        dnorm = float(np.linalg.norm(d))
        t = min(1.0, config.max_step / dnorm) if dnorm > 0 else 1.0
        f_new = None
        gd = float(g @ d)
        while t > 1e-14:
            cand = x + t * d
            f_try = fun(cand)
            evals += 1
            if np.isfinite(f_try) and f_try <= f + config.armijo * t * gd:
                f_new = f_try
                break
            t *= 0.5
            if evals >= config.max_evals:
                break
        if f_new is None:
            status = "step_tol"
            break
        x_new = x + t * d
        g_new = grad(x_new)
        s = x_new - x
        yk = g_new - g
        sy = float(s @ yk)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(yk)):
            rho = 1.0 / sy
            v = np.eye(p) - rho * np.outer(s, yk)
            hinv = v @ hinv @ v.T + rho * np.outer(s, s)
        step_norm = float(np.linalg.norm(s))
        x, f, g = x_new, f_new, g_new
        trace.append((evals, f, float(np.linalg.norm(g)), step_norm))
        if step_norm < config.step_tol:
            status = "step_tol"
            break
    return OptResult(x=x, f=f, grad_norm=float(np.linalg.norm(g)),
                     n_evals=evals, status=status, trace=trace)

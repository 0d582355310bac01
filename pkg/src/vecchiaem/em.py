"""Stochastic E functions and the EM driver.

One EM iteration freezes everything that depends on the current parameters
theta0 (the conditional mean of the latent field and the presolved probe
columns), then improves a stochastic estimate of the expected joint
negative log-likelihood over theta. Three interchangeable estimates of the
objective are provided:

* ``estep_objective_vecchia``: the blockwise symmetrized form, evaluated in
  a single pass over conditioning sets together with the data column; this
  is the form M steps differentiate (forward-mode duals end to end).
* ``estep_objective_sym``: the generic symmetrized form through an
  assembled precision factor and matvecs; algebraically the same quantity.
* ``estep_objective_asym``: the unsymmetrized form using fully presolved
  probes, for backends that never build an explicit symmetric factor.

Optimization runs in transformed coordinates: log for positive parameters,
identity otherwise. Invalid parameter points (failed block factorizations)
evaluate to +inf and the optimizer backtracks.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dual
from .dual import Dual
from .kernels import noise_matrix
from .optimize import OptimizerConfig, minimize
from .solver import (
    LOG_2PI,
    factor_dense,
    cg_solve,
    SolverError,
    noisy_precision_factor,
)
from .trace import SAAEnsemble, draw_saa
from .vecchia import (
    BlockWorkspace,
    PositiveDefiniteError,
    assemble_precision_factor,
    conditional_pass,
)


# -- parameter space -------------------------------------------------------------


class ParamSpace:
    """Couples a kernel template and optional noise template to one vector.

    The transformed coordinates are log(parameter) wherever the parameter
    is constrained positive and the raw value otherwise; all optimization
    and convergence measurement happens in these coordinates.
    """

    def __init__(self, model_template, noise_template=None):
        self.model = model_template
        self.noise = noise_template
        self.k_dim = len(model_template.names)
        self.n_dim = len(noise_template.names) if noise_template is not None else 0
        self.names = tuple(model_template.names) + (
            tuple(noise_template.names) if noise_template is not None else ())
        self.positive = np.array(
            tuple(model_template.positive)
            + (tuple(noise_template.positive) if noise_template is not None else ()),
            dtype=bool)

    @property
    def dim(self):
        return self.k_dim + self.n_dim

    def pack(self, model=None, noise=None):
        model = model if model is not None else self.model
        raw = [model.to_vector()]
        if self.noise is not None:
            raw.append((noise if noise is not None else self.noise).to_vector())
        return np.concatenate(raw)

    def transform(self, raw):
        raw = np.asarray(raw, dtype=float)
        x = raw.copy()
        x[self.positive] = np.log(raw[self.positive])
        return x

    def untransform(self, x):
        x = np.asarray(x, dtype=float)
        raw = x.copy()
        raw[self.positive] = np.exp(x[self.positive])
        return raw

    def models_at(self, x):
        """(model, noise) at a transformed coordinate vector (float or Dual)."""
        if isinstance(x, Dual):
            comps = [dual.exp(x[i]) if self.positive[i] else x[i]
                     for i in range(self.dim)]
            kvec = _DualVec(comps[: self.k_dim])
            nvec = _DualVec(comps[self.k_dim:]) if self.noise is not None else None
        else:
            raw = self.untransform(x)
            kvec = raw[: self.k_dim]
            nvec = raw[self.k_dim:] if self.noise is not None else None
        model = self.model.replace_vector(kvec)
        noise = self.noise.replace_vector(nvec) if self.noise is not None else None
        return model, noise


class _DualVec:
    """Indexable view over a list of dual scalars (for replace_vector)."""

    def __init__(self, comps):
        self.comps = list(comps)

    def __getitem__(self, i):
        if isinstance(i, slice):
            items = self.comps[i]
            return _stack_scalars(items)
        return self.comps[i]

    def __len__(self):
        return len(self.comps)


def _stack_scalars(items):
    if not items:
        return np.array([])
    if any(isinstance(v, Dual) for v in items):
        p = next(v.nparams for v in items if isinstance(v, Dual))
        vals = np.array([float(dual.value(v)) for v in items])
        eps = np.stack([
            v.eps if isinstance(v, Dual) else np.zeros(p) for v in items], axis=1)
        return Dual(vals, eps)
    return np.array([float(v) for v in items])


# -- configuration and state ------------------------------------------------------


@dataclass
class EMConfig:
    saa_count: int = 72
    saa_seed: int = 0
    max_iter: int = 30
    tol: float = 1e-4
    symmetrize: bool = True
    backend: str = "sparse_chol"      # dense_chol | sparse_chol | cg
    exact_trace: bool = False         # dense-guard oracle mode
    cg_tol: float = 1e-10
    cg_maxit: int = 2000
    mstep: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        method="bfgs", grad_tol=1e-5, max_evals=60))

    def __post_init__(self):
        if self.saa_count < 1 or self.max_iter < 1:
            raise ValueError("counts must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.exact_trace and self.backend == "cg":
            raise ValueError("exact-trace mode needs a factorizing backend")
        if self.symmetrize and self.backend == "cg":
            raise ValueError(
                "symmetrized presolves need an explicit factor; use a cholesky "
                "backend or disable symmetrization")


@dataclass
class EMState:
    space: ParamSpace
    ws: BlockWorkspace
    y: np.ndarray
    config: EMConfig
    x0: np.ndarray
    model0: object
    noise0: object
    zhat: np.ndarray
    ensemble: SAAEnsemble
    resid: np.ndarray
    probe_sq_rows: Optional[np.ndarray]     # rows of sum_j vtil_ij^2
    trace_blocks: Optional[list] = None     # per-group (G,k,k) chol of C0 pieces
    trace_diag: Optional[np.ndarray] = None  # diag of C0 for the R^{-1} part
    cross_cols: Optional[np.ndarray] = None  # [zhat | V | Vbar] for the asym form
    cross_rows: Optional[np.ndarray] = None  # rows of sum_j v_ij vbar_ij
    omega0: object = None
    noisy_factor0: object = None
    iteration: int = 0
    history: list = field(default_factory=list)
    converged: bool = False

    @property
    def locs(self):
        return self.ws.locs


# -- E step -----------------------------------------------------------------------


def estep_prepare(x0, y, ws, ensemble, space, config: EMConfig) -> EMState:
    """Freeze all theta0-dependent quantities for one M step.

    Solves the conditional mean, presolves the probe columns per mode, and
    (in exact-trace mode) factors the per-block pieces of the posterior
    covariance so the trace term can be evaluated blockwise.
    """
    x0 = np.asarray(x0, dtype=float)
    model0, noise0 = space.models_at(x0)
    locs = ws.locs
    nd0 = noise_matrix(noise0, locs)
    omega0 = assemble_precision_factor(model0, locs, ws.plan, workspace=ws)
    rhs = nd0.inv_diag * np.asarray(y, dtype=float)

    trace_blocks = trace_diag = None
    probe_sq = None
    cross_cols = None
    fh = None
    if config.backend == "cg":
        diag_omega = np.asarray((omega0.half.multiply(omega0.half)).sum(axis=0)).ravel()
        jacobi = np.empty_like(diag_omega)
        jacobi[omega0.perm] = diag_omega
        jacobi += nd0.inv_diag

        def apply_a(v):
            return omega0.matvec(v) + nd0.inv_diag * v

        zhat, info = cg_solve(apply_a, rhs, m_inv=lambda v: v / jacobi,
                              tol=config.cg_tol, maxit=config.cg_maxit)
        if not info.converged:
            raise SolverError("conditional-mean CG stalled",
                              iterations=info.iterations, residual=info.residual)
        pres = np.empty_like(ensemble.probes)
        for j in range(ensemble.count):
            pres[:, j], info = cg_solve(apply_a, ensemble.probes[:, j],
                                        m_inv=lambda v: v / jacobi,
                                        tol=config.cg_tol, maxit=config.cg_maxit)
            if not info.converged:
                raise SolverError(f"probe presolve CG stalled on column {j}",
                                  iterations=info.iterations, residual=info.residual)
        mode = "unsym"
    else:
        fh = noisy_precision_factor(omega0, nd0, backend=config.backend)
        zhat = fh.solve(rhs)
        if config.symmetrize:
            pres = fh.half_solve_t(ensemble.probes)
            mode = "sym"
        else:
            pres = fh.solve(ensemble.probes)
            mode = "unsym"
        if config.exact_trace:
            n = ws.n
            a_dense = omega0.dense_omega() + np.diag(nd0.inv_diag)
            c0 = factor_dense(a_dense).solve(np.eye(n))
            c0 = 0.5 * (c0 + c0.T)
            trace_blocks = []
            for g in ws.groups:
                sub = c0[g.orig[:, :, None], g.orig[:, None, :]]
                trace_blocks.append(np.linalg.cholesky(
                    sub + 1e-13 * np.trace(c0) / n * np.eye(g.k)))
            trace_diag = np.diag(c0).copy()

    ens = SAAEnsemble(probes=ensemble.probes, seed=ensemble.seed,
                      mode=mode, presolved=pres)
    cross_rows = None
    if mode == "sym":
        probe_sq = (pres ** 2).sum(axis=1)
    else:
        cross_cols = np.hstack([zhat[:, None], ensemble.probes, pres])
        cross_rows = (ensemble.probes * pres).sum(axis=1)

    return EMState(space=space, ws=ws, y=np.asarray(y, dtype=float), config=config,
                   x0=x0, model0=model0, noise0=noise0, zhat=zhat, ensemble=ens,
                   resid=np.asarray(y, dtype=float) - zhat,
                   probe_sq_rows=probe_sq, trace_blocks=trace_blocks,
                   trace_diag=trace_diag, cross_cols=cross_cols,
                   cross_rows=cross_rows, omega0=omega0, noisy_factor0=fh)


# -- objectives ---------------------------------------------------------------------


def _noise_quad_terms(noise, locs, state):
    """0.5(log|R| + resid^T R^{-1} resid + n log 2pi), plus R^{-1} as diag."""
    inv = None
    nd = noise.diag(locs)
    inv = 1.0 / nd
    logdet = dual.log(nd).sum()
    quad = (inv * (state.resid ** 2)).sum()
    n = state.ws.n
    return inv, 0.5 * (logdet + quad + n * LOG_2PI)


def estep_objective_vecchia(x, state: EMState):
    """Blockwise symmetrized stochastic E function (dual-capable).

    One pass per conditioning set evaluates the log-determinant sum and the
    quadratic forms for the conditional mean and every scaled probe column
    together; no n-sized matrix is assembled or factorized at theta.
    """
    if state.ensemble.mode != "sym" and state.trace_blocks is None:
        raise ValueError("state was not prepared in symmetrized mode")
    model, noise = state.space.models_at(x)
    cfg = state.config
    n = state.ws.n
    s_count = state.ensemble.count

    if state.trace_blocks is not None:
        rhs = state.zhat[:, None]
        res = conditional_pass(model, None, state.ws, rhs=rhs,
                               rhs_blocks=state.trace_blocks)
        inv, noise_term = _noise_quad_terms(noise, state.ws.locs, state)
        trace_term = 0.5 * (res.qf_block_total + (inv * state.trace_diag).sum())
        marg = 0.5 * (res.det_part + res.qf[0] + n * LOG_2PI)
        return marg + trace_term + noise_term

    rhs = np.hstack([state.zhat[:, None], state.ensemble.presolved])
    res = conditional_pass(model, None, state.ws, rhs=rhs)
    inv, noise_term = _noise_quad_terms(noise, state.ws.locs, state)
    probe_qf = res.qf[1:].sum()
    r_probe = (inv * state.probe_sq_rows).sum()
    marg = 0.5 * (res.det_part + res.qf[0] + n * LOG_2PI)
    return marg + (probe_qf + r_probe) / (2.0 * s_count) + noise_term


def estep_objective_sym(x, state: EMState):
    """Generic symmetrized form via the assembled factor and matvecs."""
    if state.ensemble.mode != "sym":
        raise ValueError("state was not prepared in symmetrized mode")
    model, noise = state.space.models_at(np.asarray(dual.value(x), dtype=float))
    locs = state.ws.locs
    fac = assemble_precision_factor(model, locs, state.ws.plan, workspace=state.ws)
    tilde = state.ensemble.presolved
    s_count = state.ensemble.count
    n = state.ws.n
    quad_omega = float((tilde * fac.matvec(tilde)).sum())
    nd = noise_matrix(noise, locs)
    quad_noise = float((nd.inv_diag * (tilde ** 2).sum(axis=1)).sum())
    nll_s = 0.5 * (fac.det_part + float(state.zhat @ fac.matvec(state.zhat))
                   + n * LOG_2PI)
    nll_r = 0.5 * (float(np.log(nd.diag).sum())
                   + float(nd.inv_diag @ state.resid ** 2) + n * LOG_2PI)
    return (quad_omega + quad_noise) / (2.0 * s_count) + nll_s + nll_r


def estep_objective_asym(x, state: EMState):
    """Unsymmetrized stochastic E function with presolved probes (dual-capable)."""
    if state.ensemble.mode != "unsym":
        raise ValueError("state was not prepared in unsymmetrized mode")
    model, noise = state.space.models_at(x)
    s_count = state.ensemble.count
    n = state.ws.n
    ia = np.arange(1, 1 + s_count)
    ib = np.arange(1 + s_count, 1 + 2 * s_count)
    res = conditional_pass(model, None, state.ws, rhs=state.cross_cols,
                           cross_pairs=(ia, ib))
    inv, noise_term = _noise_quad_terms(noise, state.ws.locs, state)
    cross_noise = (inv * state.cross_rows).sum()
    marg = 0.5 * (res.det_part + res.qf[0] + n * LOG_2PI)
    return marg + (res.cross.sum() + cross_noise) / (2.0 * s_count) + noise_term


def _objective_for(state: EMState):
    if state.trace_blocks is not None or state.config.symmetrize:
        return estep_objective_vecchia
    return estep_objective_asym


# -- M step -----------------------------------------------------------------------


_COORD_BOUND = 30.0  # |log-parameter| beyond this is numerically meaningless


def _value_fn(objective, state):
    def fun(x):
        if np.any(np.abs(x) > _COORD_BOUND):
            return np.inf
        try:
            v = float(dual.value(objective(x, state)))
        except (PositiveDefiniteError, OverflowError, FloatingPointError):
            return np.inf
        return v if np.isfinite(v) else np.inf
    return fun


def _grad_fn(objective, state):
    def grad(x):
        out = objective(dual.seed(np.asarray(x, dtype=float)), state)
        return np.asarray(out.eps, dtype=float)
    return grad


def mstep(state: EMState, config: EMConfig = None):
    """Improve the E objective from theta0; never returns a worse point."""
    config = config or state.config
    objective = _objective_for(state)
    fun = _value_fn(objective, state)
    grad = _grad_fn(objective, state)
    use_grad = None if config.mstep.grad_mode == "finite_diff" else grad
    try:
        result = minimize(fun, state.x0, config.mstep, grad=use_grad)
    except ValueError:
        warnings.warn("M step failed at the incumbent; keeping theta0")
        return state.x0, None
    if not np.isfinite(result.f) or result.f > fun(state.x0):
        warnings.warn("M step made no progress; keeping theta0")
        return state.x0, None
    return result.x, result


# -- marginal scoring ---------------------------------------------------------------


def marginal_noisy_nll(model, noise, locs, plan, y, workspace=None,
                       backend="sparse_chol"):
    """Marginal NLL of y under the approximated noisy model.

    0.5 [ log|Omega~^{-1} + R| + y^T (Omega~^{-1} + R)^{-1} y + n log 2pi ],
    computed through the factorization of Omega~ + R^{-1} via
    log|Omega~^{-1}+R| = log|Omega~+R^{-1}| - log|Omega~| + log|R| and the
    matching Woodbury split of the quadratic form.
    """
    ws = workspace if workspace is not None else BlockWorkspace(locs, plan)
    y = np.asarray(y, dtype=float)
    omega = assemble_precision_factor(model, ws.locs, ws.plan, workspace=ws)
    nd = noise_matrix(noise, ws.locs)
    fh = noisy_precision_factor(omega, nd, backend=backend)
    logdet = fh.logdet - omega.logdet_omega + float(np.log(nd.diag).sum())
    ry = nd.inv_diag * y
    quad = float(y @ ry) - float(ry @ fh.solve(ry))
    return 0.5 * (logdet + quad + y.size * LOG_2PI)


# -- EM driver ----------------------------------------------------------------------


def _marginal_from_state(state: EMState):
    """Marginal NLL of the approximated noisy model at theta0, reusing factors."""
    nd = noise_matrix(state.noise0, state.ws.locs)
    y = state.y
    if state.noisy_factor0 is not None:
        logdet = (state.noisy_factor0.logdet - state.omega0.logdet_omega
                  + float(np.log(nd.diag).sum()))
        ry = nd.inv_diag * y
        quad = float(y @ ry) - float(ry @ state.noisy_factor0.solve(ry))
        return 0.5 * (logdet + quad + y.size * LOG_2PI)
    return marginal_noisy_nll(state.model0, state.noise0, state.ws.locs,
                              state.ws.plan, y, workspace=state.ws)


def em_fit(locs, y, plan, init_x, space: ParamSpace, config: EMConfig = None,
           workspace=None, ensemble=None) -> EMState:
    """Run the EM iteration from a transformed starting vector.

    Probes are drawn once up front and reused by every iteration. History
    records, per iteration, the raw parameters, the E objective at the
    incumbent, the marginal NLL of the approximated noisy model, and wall
    time. Terminates when the transformed-coordinate step drops below
    config.tol or after max_iter iterations.
    """
    config = config or EMConfig()
    ws = workspace if workspace is not None else BlockWorkspace(locs, plan)
    if ensemble is None:
        ensemble = draw_saa(ws.n, config.saa_count, config.saa_seed)
    x0 = np.asarray(init_x, dtype=float)
    history = []
    converged = False
    iterations = 0
    t_start = time.perf_counter()
    for it in range(config.max_iter):
        state = estep_prepare(x0, y, ws, ensemble, space, config)
        state.iteration = it
        objective = _objective_for(state)
        history.append({
            "iteration": it, "params": space.untransform(x0),
            "e_value": float(dual.value(objective(x0, state))),
            "marginal_nll": _marginal_from_state(state),
            "wall": time.perf_counter() - t_start})
        x1, _ = mstep(state, config)
        step = float(np.linalg.norm(x1 - x0))
        x0 = x1
        iterations = it + 1
        if step <= config.tol:
            converged = True
            break
    # refresh state at the final parameters and close the history
    final = estep_prepare(x0, y, ws, ensemble, space, config)
    final.iteration = iterations
    final.history = history
    final.converged = converged
    objective = _objective_for(final)
    final.history.append({
        "iteration": iterations, "params": space.untransform(x0),
        "e_value": float(dual.value(objective(x0, final))),
        "marginal_nll": _marginal_from_state(final),
        "wall": time.perf_counter() - t_start})
    return final


# -- naive-Vecchia initial fit ---------------------------------------------------------


def naive_vecchia_objective(x, space: ParamSpace, ws: BlockWorkspace, y):
    """Marginal Vecchia NLL with the nugget folded into block covariances."""
    model, noise = space.models_at(x)
    res = conditional_pass(model, noise, ws, rhs=np.asarray(y, float)[:, None])
    return 0.5 * (res.det_part + res.qf[0] + ws.n * LOG_2PI)


def fit_naive_vecchia(locs, y, plan, space: ParamSpace, x0=None,
                      opt_config: OptimizerConfig = None, workspace=None):
    """Minimize the nugget-folded Vecchia NLL (the standard EM initializer)."""
    ws = workspace if workspace is not None else BlockWorkspace(locs, plan)
    y = np.asarray(y, dtype=float)
    if x0 is None:
        x0 = default_init(ws.locs, y, space)
    opt_config = opt_config or OptimizerConfig(method="bfgs", grad_tol=1e-5,
                                               max_evals=200)

    def fun(x):
        if np.any(np.abs(x) > _COORD_BOUND):
            return np.inf
        try:
            v = float(dual.value(naive_vecchia_objective(x, space, ws, y)))
        except (PositiveDefiniteError, OverflowError, FloatingPointError):
            return np.inf
        return v if np.isfinite(v) else np.inf

    def grad(x):
        return np.asarray(
            naive_vecchia_objective(dual.seed(np.asarray(x, float)), space, ws, y).eps,
            dtype=float)

    use_grad = None if opt_config.grad_mode == "finite_diff" else grad
    result = minimize(fun, np.asarray(x0, dtype=float), opt_config, grad=use_grad)
    return result.x, result


def default_init(locs, y, space: ParamSpace):
    """Moment-flavored starting point in transformed coordinates."""
    v = float(np.var(y)) or 1.0
    n = locs.shape[0]
    sub = locs[np.random.default_rng(0).permutation(n)[: min(n, 500)]]
    d = np.sqrt(((sub[:, None, :] - sub[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    nn_med = float(np.median(d.min(axis=1)))
    raw = []
    for name in space.names:
        if name == "sigma2":
            raw.append(0.8 * v)
        elif name == "rho":
            raw.append(5.0 * nn_med)
        elif name == "nu":
            raw.append(1.0)
        elif name == "eta2":
            raw.append(0.2 * v)
        elif name.startswith("sigma"):
            raw.append(np.sqrt(0.8 * v))
        elif name.startswith("eta"):
            raw.append(np.sqrt(0.2 * v))
        elif name in ("W11", "W22"):
            raw.append(1.0 / max(nn_med, 1e-6))
        elif name == "W12":
            raw.append(0.0)
        else:
            raw.append(1.0)
    return space.transform(np.array(raw))


# -- probe-count diagnostic --------------------------------------------------------------


def saa_diagnostic(state: EMState, extra_counts):
    """Rerun one M step from the same theta0 at several probe counts.

    Counts reuse one master ensemble (same seed), so each larger set adds
    columns to the previous one rather than redrawing. Returns a list of
    rows: (count, raw parameter vector after the M step).
    """
    counts = sorted(int(c) for c in extra_counts)
    master = draw_saa(state.ws.n, counts[-1], state.ensemble.seed)
    rows = []
    for c in counts:
        sub = master.subset(c)
        st = estep_prepare(state.x0, state.y, state.ws, sub, state.space,
                           state.config)
        x1, _ = mstep(st, state.config)
        rows.append((c, state.space.untransform(x1)))
    return rows

"""Dense oracles and scalable solves with the noisy-precision matrix.

The matrix of interest is A(theta) = Omega~(theta) + R(theta)^{-1}. Three
interchangeable backends: dense Cholesky (the oracle at desk scale), sparse
symmetric factorization with a fill-reducing permutation (SuperLU in
symmetric mode, giving an explicit W with A = W W^T for the symmetrized
probe presolves), and matrix-free preconditioned conjugate gradients for
the inversion-free path.

Every negative log-likelihood here carries the 1/2 factor and the
n log(2 pi) constant, so objective values are comparable across modules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .kernels import cov_matrix, noise_matrix
from .vecchia import (
    BlockWorkspace,
    PositiveDefiniteError,
    assemble_precision_factor,
)

LOG_2PI = float(np.log(2.0 * np.pi))
DENSE_GUARD = 20000


class SolverError(RuntimeError):
    """Iterative solve failed; carries iteration count and residual."""

    def __init__(self, msg, iterations=None, residual=None):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


# -- symmetric factorizations ---------------------------------------------------


class FactorHandle:
    """Symmetric factorization A = W W^T with log|A|.

    Dense handles wrap a Cholesky factor; sparse handles wrap a SuperLU
    LDL^T factorization (symmetric mode, minimum-degree permutation) with
    W = P^T L sqrt(D).
    """

    def __init__(self, kind, n, logdet, **impl):
        self.kind = kind
        self.n = n
        self.logdet = logdet
        self._impl = impl

    def solve(self, b):
        """A^{-1} b."""
        b = np.asarray(b, dtype=float)
        if self.kind == "dense":
            return sla.cho_solve((self._impl["chol"], True), b)
        return self._impl["lu"].solve(b)

    def half_solve(self, v):
        """W^{-1} v."""
        v = np.asarray(v, dtype=float)
        if self.kind == "dense":
            return sla.solve_triangular(self._impl["chol"], v, lower=True)
        perm = self._impl["perm"]
        s = np.empty_like(v)
        s[perm] = v
        return spla.spsolve_triangular(self._impl["w_csr"], s, lower=True)

    def half_solve_t(self, v):
        """W^{-T} v (the symmetrized probe presolve)."""
        v = np.asarray(v, dtype=float)
        if self.kind == "dense":
            return sla.solve_triangular(self._impl["chol"], v, lower=True, trans="T")
        x = spla.spsolve_triangular(self._impl["wt_csr"], v, lower=False)
        return x[self._impl["perm"]]

    def w_matvec(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "dense":
            return self._impl["chol"] @ u
        return (self._impl["w_csr"] @ u)[self._impl["perm"]]

    def wt_matvec(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "dense":
            return self._impl["chol"].T @ u
        perm = self._impl["perm"]
        s = np.empty_like(u)
        s[perm] = u
        return self._impl["wt_csr"] @ s

    def matvec(self, u):
        """A u through the factor (W then W^T)."""
        return self.w_matvec(self.wt_matvec(u))


def factor_dense(a) -> FactorHandle:
    a = np.asarray(a, dtype=float)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise PositiveDefiniteError("dense factorization failed: not SPD") from exc
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return FactorHandle("dense", a.shape[0], logdet, chol=chol)


def factor_sparse(a) -> FactorHandle:
    """Sparse W W^T via SuperLU in symmetric mode (AMD-style ordering)."""
    a = sp.csc_matrix(a)
    n = a.shape[0]
    lu = spla.splu(a, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options=dict(SymmetricMode=True))
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise PositiveDefiniteError("symmetric sparse factorization pivoted; matrix not SPD?")
    d = lu.U.diagonal()
    if np.any(d <= 0):
        raise PositiveDefiniteError("sparse factorization found a nonpositive pivot")
    w = (lu.L @ sp.diags(np.sqrt(d))).tocsr()
    return FactorHandle(
        "sparse", n, float(np.log(d).sum()),
        lu=lu, w_csr=w, wt_csr=w.T.tocsr(), perm=np.asarray(lu.perm_r))


def noisy_precision_factor(omega_factor, noise_diag, backend="sparse_chol"):
    """Factor A = Omega~ + R^{-1} from a SparsePrecisionFactor and R's diagonal."""
    inv_diag = np.asarray(noise_diag.inv_diag)
    if backend == "dense_chol":
        a = omega_factor.dense_omega()
        a[np.diag_indices_from(a)] += inv_diag
        return factor_dense(a)
    if backend == "sparse_chol":
        half = omega_factor.half
        perm = omega_factor.perm
        a_ord = (half.T @ half) + sp.diags(inv_diag[perm])
        handle = factor_sparse(a_ord.tocsc())
        return _ReorderedFactor(handle, perm)
    raise ValueError(f"backend {backend!r} does not produce an explicit factor")


class _ReorderedFactor:
    """Present a factor built in plan ordering in original index order."""

    def __init__(self, inner: FactorHandle, perm):
        self.inner = inner
        self.perm = np.asarray(perm, dtype=np.int64)
        self.kind = inner.kind
        self.n = inner.n
        self.logdet = inner.logdet

    def _to_ord(self, v):
        v = np.asarray(v, dtype=float)
        return v[self.perm] if v.ndim == 1 else v[self.perm, :]

    def _from_ord(self, v):
        out = np.empty_like(v)
        if v.ndim == 1:
            out[self.perm] = v
        else:
            out[self.perm, :] = v
        return out

    def solve(self, b):
        return self._from_ord(self.inner.solve(self._to_ord(b)))

    def half_solve_t(self, v):
        # W_full = P^T W_ord, so W_full^{-T} v = P^T W_ord^{-T} P ... both
        # permutations fold into the reorder wrappers.
        return self._from_ord(self.inner.half_solve_t(self._to_ord(v)))

    def half_solve(self, v):
        return self._from_ord(self.inner.half_solve(self._to_ord(v)))

    def w_matvec(self, u):
        return self._from_ord(self.inner.w_matvec(self._to_ord(u)))

    def wt_matvec(self, u):
        return self._from_ord(self.inner.wt_matvec(self._to_ord(u)))

    def matvec(self, u):
        return self._from_ord(self.inner.matvec(self._to_ord(u)))


# -- Gaussian negative log-likelihoods --------------------------------------------


def gaussian_nll(cov_factor, u):
    """0.5 (log|A| + u^T A^{-1} u + n log 2pi) for a factored covariance A."""
    u = np.asarray(u, dtype=float)
    w = cov_factor.half_solve(u)
    return 0.5 * (cov_factor.logdet + float(w @ w) + u.size * LOG_2PI)


def exact_nll(model, noise, locs, y, dense_guard=DENSE_GUARD, force=False):
    """Exact marginal NLL of y under S(theta) + R(theta), dense linear algebra."""
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    y = np.asarray(y, dtype=float)
    n = locs.shape[0]
    if n > dense_guard and not force:
        raise ValueError(
            f"n={n} exceeds the dense guard ({dense_guard}); pass force=True to override")
    s = cov_matrix(model, locs)
    if noise is not None:
        s = s + np.diag(noise_matrix(noise, locs).diag)
    return gaussian_nll(factor_dense(s), y)


# -- conditional mean ---------------------------------------------------------------


def conditional_mean(model, noise, locs, y, plan=None, backend="dense",
                     cg_tol=1e-10, cg_maxit=2000):
    """Posterior mean of the latent field given noisy observations.

    backend "dense" solves with the true covariance: z = S (S+R)^{-1} y.
    The scalable backends solve (Omega~ + R^{-1}) z = R^{-1} y with the
    plan's precision approximation, either via the sparse symmetric
    factorization or matrix-free Jacobi-preconditioned CG.
    """
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    y = np.asarray(y, dtype=float)
    nd = noise_matrix(noise, locs)
    if backend == "dense":
        s = cov_matrix(model, locs)
        spr = s + np.diag(nd.diag)
        return s @ factor_dense(spr).solve(y)
    if plan is None:
        raise ValueError("scalable backends need a VecchiaPlan")
    omega = assemble_precision_factor(model, locs, plan)
    rhs = nd.inv_diag * y
    if backend == "sparse_chol":
        return noisy_precision_factor(omega, nd, backend="sparse_chol").solve(rhs)
    if backend == "cg":
        def apply_a(v):
            return omega.matvec(v) + nd.inv_diag * v
        diag_omega = np.asarray((omega.half.multiply(omega.half)).sum(axis=0)).ravel()
        jacobi = np.empty_like(diag_omega)
        jacobi[omega.perm] = diag_omega
        jacobi += nd.inv_diag
        x, info = cg_solve(apply_a, rhs, m_inv=lambda v: v / jacobi,
                           tol=cg_tol, maxit=cg_maxit)
        if not info.converged:
            raise SolverError(
                f"CG did not converge in {info.iterations} iterations "
                f"(relative residual {info.residual:.3e})",
                iterations=info.iterations, residual=info.residual)
        return x
    raise ValueError(f"unknown backend {backend!r}")


# -- conjugate gradients --------------------------------------------------------------


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool
    resid_history: np.ndarray


def cg_solve(apply_a, b, m_inv=None, tol=1e-10, maxit=2000, x0=None):
    """Preconditioned conjugate gradients on an SPD operator.

    Stops when ||A x - b|| <= tol ||b||. Returns (x, CGInfo); breakdown
    (nonpositive curvature, signalling a non-SPD operator) raises.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = b - apply_a(x) if x0 is not None else b.copy()
    z = m_inv(r) if m_inv is not None else r
    p = z.copy()
    rz = float(r @ z)
    bnorm = float(np.linalg.norm(b)) or 1.0
    hist = [float(np.linalg.norm(r)) / bnorm]
    it = 0
    while hist[-1] > tol and it < maxit:
        ap = apply_a(p)
        pap = float(p @ ap)
        if pap <= 0:
            raise SolverError(
                f"CG breakdown at iteration {it}: nonpositive curvature {pap:.3e}",
                iterations=it, residual=hist[-1])
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        z = m_inv(r) if m_inv is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
        hist.append(float(np.linalg.norm(r)) / bnorm)
    return x, CGInfo(iterations=it, residual=hist[-1],
                     converged=hist[-1] <= tol, resid_history=np.array(hist))


def solve_spd(a, b, backend="dense_chol", tol=1e-10, maxit=2000, m_inv=None):
    """Solve A x = b for SPD A with the chosen backend.

    ``a`` is a dense array (dense_chol), sparse matrix (sparse_chol), or a
    callable matvec (cg; dense/sparse inputs are wrapped automatically).
    """
    if backend == "dense_chol":
        return factor_dense(np.asarray(a)).solve(b)
    if backend == "sparse_chol":
        return factor_sparse(a).solve(b)
    if backend == "cg":
        if callable(a):
            apply_a = a
        else:
            a_arr = a
            apply_a = (lambda v: a_arr @ v)
        x, info = cg_solve(apply_a, b, m_inv=m_inv, tol=tol, maxit=maxit)
        if not info.converged:
            raise SolverError(
                f"CG did not converge in {info.iterations} iterations "
                f"(relative residual {info.residual:.3e})",
                iterations=info.iterations, residual=info.residual)
        return x
    raise ValueError(f"unknown backend {backend!r}")


# -- the exact E function ----------------------------------------------------------


def dense_conditional_pieces(model0, noise0, locs, y):
    """(zhat, C0) under theta0: posterior mean and covariance of the latent field.

    C0 = (S0^{-1} + R0^{-1})^{-1}, computed stably as S0 - S0 (S0+R0)^{-1} S0.
    """
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    s0 = cov_matrix(model0, locs)
    r0 = noise_matrix(noise0, locs).diag
    f = factor_dense(s0 + np.diag(r0))
    zhat = s0 @ f.solve(np.asarray(y, dtype=float))
    c0 = s0 - s0 @ f.solve(s0)
    c0 = 0.5 * (c0 + c0.T)
    return zhat, c0


def exact_e_function(model, noise, model0, noise0, locs, y):
    """Expected joint NLL of (y, z) at theta under the theta0 conditional law.

    0.5 tr[(S^{-1} + R^{-1}) C0] + nll_S(zhat0) + nll_R(y - zhat0), all
    dense; the oracle for every stochastic estimate in the EM machinery.
    """
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    y = np.asarray(y, dtype=float)
    zhat, c0 = dense_conditional_pieces(model0, noise0, locs, y)
    s = cov_matrix(model, locs)
    fs = factor_dense(s)
    r = noise_matrix(noise, locs)
    trace = 0.5 * (float(np.trace(fs.solve(c0))) + float(c0.diagonal() @ r.inv_diag))
    nll_s = gaussian_nll(fs, zhat)
    resid = y - zhat
    nll_r = 0.5 * (float(np.log(r.diag).sum()) + float(resid ** 2 @ r.inv_diag)
                   + y.size * LOG_2PI)
    return trace + nll_s + nll_r

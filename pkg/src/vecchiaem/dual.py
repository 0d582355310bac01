"""Vectorized forward-mode dual numbers.

A :class:`Dual` bundles a numpy value array with a stack of partial
derivatives: ``eps`` has shape ``(p,) + val.shape``, one leading slot per
independent parameter. All arithmetic broadcasts the value part with numpy
rules and keeps the ``p`` axis leading, so an entire gradient is carried in
a single forward pass.

Only the primitives the library actually differentiates through are
implemented: scalar arithmetic, elementwise transcendentals, batched
matmul, and a fused Cholesky-with-triangular-inverse used by the blockwise
likelihood engine.
"""

from __future__ import annotations

import numpy as np


class Dual:
    """Value plus forward-mode partials with respect to p parameters."""

    __slots__ = ("val", "eps")

    # defer mixed ndarray (op) Dual expressions to the reflected operators
    __array_ufunc__ = None

    def __init__(self, val, eps):
        self.val = np.asarray(val, dtype=float)
        self.eps = np.asarray(eps, dtype=float)
        if self.eps.shape[1:] != self.val.shape:
            raise ValueError(
                f"eps shape {self.eps.shape} incompatible with val shape {self.val.shape}"
            )

    @property
    def nparams(self):
        return self.eps.shape[0]

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    def __repr__(self):
        return f"Dual(val={self.val!r}, p={self.eps.shape[0]})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            v = self.val + other.val
            return Dual(v, _pad(self.eps, self.ndim, v.ndim) + _pad(other.eps, other.ndim, v.ndim))
        v = self.val + other
        return Dual(v, np.broadcast_to(_pad(self.eps, self.ndim, v.ndim), (self.nparams,) + v.shape))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.eps)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Dual) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            v = self.val * other.val
            e = (_pad(self.eps, self.ndim, v.ndim) * other.val
                 + _pad(other.eps, other.ndim, v.ndim) * self.val)
            return Dual(v, e)
        other = np.asarray(other)
        v = self.val * other
        return Dual(v, _pad(self.eps, self.ndim, v.ndim) * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            v = self.val * inv
            e = (_pad(self.eps, self.ndim, v.ndim)
                 - _pad(other.eps, other.ndim, v.ndim) * v) * inv
            return Dual(v, e)
        inv = 1.0 / np.asarray(other)
        v = self.val * inv
        return Dual(v, _pad(self.eps, self.ndim, v.ndim) * inv)

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        v = np.asarray(other) * inv
        return Dual(v, -_pad(self.eps, self.ndim, v.ndim) * (v * inv))

    def __pow__(self, k):
        # float exponent only; derivative k x^(k-1)
        v = self.val ** k
        return Dual(v, _pad(self.eps, self.ndim, v.ndim) * (k * self.val ** (k - 1.0)))

    # -- structure ----------------------------------------------------------

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.val[idx], self.eps[(slice(None),) + idx])

    def copy(self):
        return Dual(self.val.copy(), self.eps.copy())

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Dual(self.val.reshape(shape), self.eps.reshape((self.nparams,) + tuple(shape)))

    def sum(self, axis=None):
        if axis is None:
            return Dual(self.val.sum(), self.eps.reshape(self.nparams, -1).sum(axis=1))
        axis = axis % self.ndim
        return Dual(self.val.sum(axis=axis), self.eps.sum(axis=axis + 1))


def _pad(eps, val_ndim, out_ndim):
    """Insert singleton axes after the p axis so eps broadcasts like val."""
    if out_ndim == val_ndim:
        return eps
    p = eps.shape[0]
    return eps.reshape((p,) + (1,) * (out_ndim - val_ndim) + eps.shape[1:])


def _expand_rows(eps_compressed, live, p):
    out = np.zeros((p,) + eps_compressed.shape[1:])
    out[live] = eps_compressed
    return out


# -- constructors and accessors ----------------------------------------------


def seed(x):
    """Seed a parameter vector: component i carries partial e_i."""
    x = np.asarray(x, dtype=float)
    return Dual(x, np.eye(x.size))


def constant(x, nparams):
    x = np.asarray(x, dtype=float)
    return Dual(x, np.zeros((nparams,) + x.shape))


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def partials(x):
    if not isinstance(x, Dual):
        raise TypeError("partials() needs a Dual")
    return x.eps


def is_dual(x):
    return isinstance(x, Dual)


# -- elementwise functions ----------------------------------------------------


def _unary(x, f, df):
    if isinstance(x, Dual):
        v = f(x.val)
        return Dual(v, x.eps * df(x.val, v))
    return f(x)


def sqrt(x):
    return _unary(x, np.sqrt, lambda t, v: 0.5 / v)


def exp(x):
    return _unary(x, np.exp, lambda t, v: v)


def log(x):
    return _unary(x, np.log, lambda t, v: 1.0 / t)


def sinh(x):
    return _unary(x, np.sinh, lambda t, v: np.cosh(t))


def cosh(x):
    return _unary(x, np.cosh, lambda t, v: np.sinh(t))


def where(cond, a, b):
    cond = np.asarray(cond)
    if not (isinstance(a, Dual) or isinstance(b, Dual)):
        return np.where(cond, a, b)
    p = a.nparams if isinstance(a, Dual) else b.nparams
    av, ae = (a.val, a.eps) if isinstance(a, Dual) else (np.asarray(a, float), None)
    bv, be = (b.val, b.eps) if isinstance(b, Dual) else (np.asarray(b, float), None)
    v = np.where(cond, av, bv)
    if ae is None:
        ae = np.zeros((p,) + av.shape)
    if be is None:
        be = np.zeros((p,) + bv.shape)
    ae = _pad(ae, ae.ndim - 1, v.ndim)
    be = _pad(be, be.ndim - 1, v.ndim)
    e = np.where(cond[None], np.broadcast_to(ae, (p,) + v.shape), np.broadcast_to(be, (p,) + v.shape))
    return Dual(v, e)


# -- batched linear algebra ---------------------------------------------------


def matmul(a, b):
    """Batched a @ b, either operand may be a Dual."""
    if isinstance(a, Dual) and isinstance(b, Dual):
        v = a.val @ b.val
        return Dual(v, a.eps @ b.val[None] + a.val[None] @ b.eps)
    if isinstance(a, Dual):
        b = np.asarray(b)
        return Dual(a.val @ b, a.eps @ b[None])
    if isinstance(b, Dual):
        a = np.asarray(a)
        return Dual(a @ b.val, a[None] @ b.eps)
    return a @ b


def transpose_last2(a):
    if isinstance(a, Dual):
        return Dual(np.swapaxes(a.val, -1, -2), np.swapaxes(a.eps, -1, -2))
    return np.swapaxes(a, -1, -2)


def chol_lower_inv(a):
    """Fused Cholesky factor inverse for a stack of SPD matrices.

    Returns ``(linv, log_diag)`` with ``linv`` the explicit inverse of the
    lower Cholesky factor of each matrix in the stack and ``log_diag`` the
    logs of the factor diagonal. Raises ``np.linalg.LinAlgError`` if any
    matrix in the stack is not positive definite.

    Forward-mode: with A = L L^T and M = L^{-1} dA L^{-T},
    d(L^{-1}) = -Phi(M) L^{-1} and d log L_ii = Phi(M)_ii, where Phi takes
    the lower triangle with half weight on the diagonal.
    """
    if not isinstance(a, Dual):
        lower = np.linalg.cholesky(a)
        linv = np.linalg.inv(np.tril(lower))
        return linv, np.log(np.diagonal(lower, axis1=-2, axis2=-1))

    p = a.nparams
    live = a.eps.reshape(p, -1).any(axis=1)
    if not live.all():
        linv_c, logd_c = chol_lower_inv(Dual(a.val, a.eps[live]))
        li = Dual(linv_c.val, _expand_rows(linv_c.eps, live, p))
        ld = Dual(logd_c.val, _expand_rows(logd_c.eps, live, p))
        return li, ld

    lower = np.linalg.cholesky(a.val)
    linv = np.linalg.inv(np.tril(lower))
    # M = L^{-1} dA L^{-T}, batched over the p axis
    m = linv[None] @ a.eps @ np.swapaxes(linv, -1, -2)[None]
    phi = np.tril(m)
    idx = np.arange(a.val.shape[-1])
    phi[..., idx, idx] *= 0.5
    dlinv = -(phi @ linv[None])
    log_diag = np.log(np.diagonal(lower, axis1=-2, axis2=-1))
    dlog_diag = np.diagonal(phi, axis1=-2, axis2=-1)
    return Dual(linv, dlinv), Dual(log_diag, dlog_diag)

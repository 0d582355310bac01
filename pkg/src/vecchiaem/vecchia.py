"""Orderings, conditioning sets, and blockwise Vecchia likelihood pieces.

The central object is :class:`BlockWorkspace`, which freezes all
parameter-independent geometry of a (locations, plan) pair: per-block joint
index sets grouped by shape, deduplicated point pairs for kernel
evaluation, and gather maps. One :func:`conditional_pass` over the
workspace then produces any combination of

* the log-determinant sum over per-block conditional covariances,
* quadratic forms of the implied precision against many right-hand sides,
* bilinear forms between paired right-hand sides, and
* rows of the sparse triangular factor of the precision approximation,

in a single sweep of batched Cholesky factorizations. Parameters may carry
forward-mode duals, in which case every returned quantity does too.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import dual
from .dual import Dual


class PositiveDefiniteError(ArithmeticError):
    """A conditional covariance block failed its Cholesky factorization."""


# -- orderings -----------------------------------------------------------------


def maximin_order(locs):
    """Greedy maximin permutation.

    Seeds at the point closest to the centroid, then repeatedly picks the
    point whose minimum distance to everything already selected is largest.
    Ties break to the lowest original index. O(n^2), fine at desk scale.
    """
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    n = locs.shape[0]
    if n == 0:
        raise ValueError("need at least one location")
    centroid = locs.mean(axis=0)
    start = int(np.argmin(((locs - centroid) ** 2).sum(axis=1)))
    perm = np.empty(n, dtype=np.int64)
    perm[0] = start
    mind = ((locs - locs[start]) ** 2).sum(axis=1)
    mind[start] = -np.inf
    for t in range(1, n):
        nxt = int(np.argmax(mind))
        perm[t] = nxt
        mind = np.minimum(mind, ((locs - locs[nxt]) ** 2).sum(axis=1))
        mind[nxt] = -np.inf
    return perm


def coordinate_order(locs):
    """Lexicographic ordering, first coordinate most significant."""
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    return np.lexsort(locs.T[::-1]).astype(np.int64)


# -- conditioning plans ----------------------------------------------------------


@dataclass
class VecchiaPlan:
    """Ordering, block partition, and per-block conditioning sets.

    ``perm[t]`` is the original index of the t-th ordered point. Blocks and
    conditioning sets are stored as ordered positions; every conditioning
    set draws strictly from earlier positions.
    """

    perm: np.ndarray
    blocks: list
    cond_sets: list
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.perm.size

    def validate(self):
        n = self.n
        if sorted(self.perm.tolist()) != list(range(n)):
            raise ValueError("perm is not a permutation")
        covered = np.concatenate(self.blocks) if self.blocks else np.array([], int)
        if not np.array_equal(covered, np.arange(n)):
            raise ValueError("blocks must partition ordered positions contiguously")
        for j, (blk, cs) in enumerate(zip(self.blocks, self.cond_sets)):
            first = blk[0]
            cs = np.asarray(cs)
            if j == 0 and cs.size:
                raise ValueError("the first conditioning set must be empty")
            if cs.size and cs.max() >= first:
                raise ValueError(f"conditioning set of block {j} reaches into the present")
        return self

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("vecchia-plan v1\n")
            meta = " ".join(f"{k}={v}" for k, v in sorted(self.meta.items()))
            fh.write(meta + "\n")
            fh.write(" ".join(map(str, self.perm.tolist())) + "\n")
            fh.write(" ".join(str(b[0]) for b in self.blocks) + f" {self.n}\n")
            for cs in self.cond_sets:
                fh.write(" ".join(map(str, np.asarray(cs).tolist())) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "vecchia-plan v1":
                raise ValueError(f"not a plan file: {header!r}")
            meta_line = fh.readline().strip()
            meta = {}
            for tok in meta_line.split():
                k, v = tok.split("=", 1)
                try:
                    meta[k] = int(v)
                except ValueError:
                    meta[k] = v
            perm = np.array(fh.readline().split(), dtype=np.int64)
            bounds = np.array(fh.readline().split(), dtype=np.int64)
            blocks = [np.arange(bounds[i], bounds[i + 1]) for i in range(bounds.size - 1)]
            cond_sets = []
            for _ in blocks:
                line = fh.readline().strip()
                cond_sets.append(np.array(line.split(), dtype=np.int64) if line else
                                 np.array([], dtype=np.int64))
        return cls(perm=perm, blocks=blocks, cond_sets=cond_sets, meta=meta).validate()


def build_conditioning(locs, perm, mode="nn", m=10, block_size=None, past_chunks=None):
    """Construct a VecchiaPlan over an existing ordering.

    mode="nn": singleton blocks, each conditioning on its min(m, t) nearest
    earlier-ordered points. mode="chunked": contiguous blocks of
    ``block_size``, conditioning on the previous ``past_chunks`` blocks.
    """
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    perm = np.asarray(perm, dtype=np.int64)
    n = perm.size
    ordered = locs[perm]

    if mode == "nn":
        if m < 1:
            raise ValueError("m must be >= 1")
        blocks = [np.array([t]) for t in range(n)]
        cond_sets = _nn_cond_sets(ordered, perm, int(m))
        meta = {"mode": "nn", "m": int(m), "n": n}
    elif mode == "chunked":
        b, p = int(block_size), int(past_chunks)
        if b < 1 or p < 1:
            raise ValueError("block_size and past_chunks must be >= 1")
        bounds = list(range(0, n, b)) + [n]
        blocks = [np.arange(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
        cond_sets = []
        for j in range(len(blocks)):
            lo = blocks[max(0, j - p)][0]
            cond_sets.append(np.arange(lo, blocks[j][0]))
        meta = {"mode": "chunked", "b": b, "p": p, "n": n}
    else:
        raise ValueError(f"unknown conditioning mode {mode!r}")

    return VecchiaPlan(perm=perm, blocks=blocks, cond_sets=cond_sets, meta=meta).validate()


def _nn_cond_sets(ordered, perm, m, brute_limit=5000, rebuild=512):
    """Nearest earlier-ordered neighbors; ties break on (distance, original index)."""
    n = ordered.shape[0]
    out = [np.array([], dtype=np.int64)]
    if n == 1:
        return out
    if n <= brute_limit:
        for t in range(1, n):
            d = ((ordered[:t] - ordered[t]) ** 2).sum(axis=1)
            if t <= m:
                sel = np.arange(t)
            else:
                part = np.argpartition(d, m - 1)
                cutoff = d[part[:m]].max()
                cand = np.nonzero(d <= cutoff)[0]  # include all ties at the cutoff
                sel = cand[np.lexsort((perm[cand], d[cand]))][:m]
            out.append(np.sort(sel).astype(np.int64))
        return out
    # k-d tree over the settled prefix, rebuilt in batches; the tail since
    # the last rebuild is scanned directly.
    tree = None
    tree_size = 0
    for t in range(1, n):
        if t - tree_size >= rebuild or (tree is None and t >= rebuild):
            tree = cKDTree(ordered[:t])
            tree_size = t
        cand = []
        if tree is not None:
            k = min(m, tree_size)
            dd, ii = tree.query(ordered[t], k=k)
            cand.append((np.atleast_1d(dd) ** 2, np.atleast_1d(ii)))
        if t > tree_size:
            tail = np.arange(tree_size, t)
            d = ((ordered[tail] - ordered[t]) ** 2).sum(axis=1)
            cand.append((d, tail))
        d_all = np.concatenate([c[0] for c in cand])
        i_all = np.concatenate([c[1] for c in cand]).astype(np.int64)
        sel = np.lexsort((perm[i_all], d_all))[: min(m, t)]
        out.append(np.sort(i_all[sel]))
    return out


# -- workspace -------------------------------------------------------------------


class _ShapeGroup:
    __slots__ = ("m", "b", "k", "jpos", "orig", "row_pos", "iu", "pair_inv")

    def __init__(self, m, b, jpos, perm):
        self.m = m
        self.b = b
        self.k = m + b
        self.jpos = jpos                      # (G, k) ordered positions
        self.orig = perm[jpos]                # (G, k) original indices
        self.row_pos = jpos[:, m:]            # (G, b) ordered positions of block rows
        self.iu = np.triu_indices(self.k)
        self.pair_inv = None                  # filled by the workspace


class BlockWorkspace:
    """Frozen geometry for repeated blockwise likelihood evaluations.

    Point pairs are deduplicated globally across all blocks, so one kernel
    sweep per parameter value covers every conditional covariance entry.
    """

    def __init__(self, locs, plan: VecchiaPlan):
        locs = np.atleast_2d(np.asarray(locs, dtype=float))
        if locs.shape[0] != plan.n:
            raise ValueError("plan size does not match the number of locations")
        self.locs = locs
        self.plan = plan
        self.n = plan.n
        bucket = {}
        for blk, cs in zip(plan.blocks, plan.cond_sets):
            key = (len(cs), len(blk))
            bucket.setdefault(key, []).append(np.concatenate([cs, blk]))
        self.groups = []
        all_keys = []
        for (m, b), rows in sorted(bucket.items()):
            jpos = np.stack(rows).astype(np.int64)
            g = _ShapeGroup(m, b, jpos, plan.perm)
            a = g.orig[:, g.iu[0]].ravel()
            bb = g.orig[:, g.iu[1]].ravel()
            lo = np.minimum(a, bb)
            hi = np.maximum(a, bb)
            all_keys.append(lo.astype(np.int64) * self.n + hi)
            self.groups.append(g)
        uniq, inv = np.unique(np.concatenate(all_keys), return_inverse=True)
        ofs = 0
        for g, keys in zip(self.groups, all_keys):
            g.pair_inv = inv[ofs: ofs + keys.size]
            ofs += keys.size
        self.uniq_a = (uniq // self.n).astype(np.int64)
        self.uniq_b = (uniq % self.n).astype(np.int64)
        self.uniq_diag_mask = self.uniq_a == self.uniq_b
        self.uniq_diag_idx = self.uniq_diag_mask.nonzero()[0]
        self._kernel_caches = {}
        self._check_distinct()

    def _check_distinct(self):
        off = ~self.uniq_diag_mask
        if not off.any():
            return
        d = ((self.locs[self.uniq_a[off]] - self.locs[self.uniq_b[off]]) ** 2).sum(axis=1)
        if np.any(d == 0.0):
            raise ValueError(
                "coincident locations fall inside one conditioning set; "
                "deduplicate or jitter the points")

    def kernel_cache(self, model):
        key = model.kind
        if key not in self._kernel_caches:
            self._kernel_caches[key] = model.pair_cache(
                self.locs[self.uniq_a], self.locs[self.uniq_b])
        return self._kernel_caches[key]


# -- the single-sweep evaluation ---------------------------------------------------


@dataclass
class PassResult:
    det_part: object                 # scalar, float or Dual
    qf: object = None                # (r,) for global right-hand sides
    qf_block_total: object = None    # scalar: total over per-block columns
    cross: object = None             # (npairs,) bilinear forms
    factor_rows: list = None         # [(row_pos, jpos, values(G,b,k))] per group


def conditional_pass(model, noise_fold, ws: BlockWorkspace, rhs=None,
                     rhs_blocks=None, cross_pairs=None, want_factor=False):
    """One sweep over all blocks.

    Parameters
    ----------
    model : kernel parameter object (fields may be Dual)
    noise_fold : NoiseDiagParams or None
        When given, its variances are added to the block covariance
        diagonals (the nugget-folded "naive" mode).
    rhs : (n, r) ndarray or None
        Right-hand sides in original index order; quadratic forms of the
        implied precision are accumulated per column.
    rhs_blocks : list of (G, k, c) ndarrays aligned with ws.groups, or None
        Per-block columns; the total sum of squares of their whitened
        residuals is accumulated (used by the dense-trace path).
    cross_pairs : (idx_a, idx_b) or None
        Column index pairs into rhs; accumulates bilinear forms.
    want_factor : bool
        Also return triangular factor rows (parameter values only).
    """
    nparams = _model_nparams(model, noise_fold)
    det = 0.0
    qf = None
    if rhs is not None:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            rhs = rhs[:, None]
        qf = dual.constant(np.zeros(rhs.shape[1]), nparams) if nparams else np.zeros(rhs.shape[1])
    qf_blocks = 0.0 if rhs_blocks is not None else None
    cross = None
    if cross_pairs is not None:
        ia, ib = cross_pairs
        cross = dual.constant(np.zeros(len(ia)), nparams) if nparams else np.zeros(len(ia))
    rows_out = [] if want_factor else None

    uv = model.pair_cov_cached(ws.kernel_cache(model))
    if noise_fold is not None:
        add = _zeros_like_vec(uv, ws.uniq_a.size)
        nd = noise_fold.diag(ws.locs[ws.uniq_a[ws.uniq_diag_idx]])
        add = _lane_assign(add, ws.uniq_diag_idx, nd)
        uv = uv + add

    for gi, g in enumerate(ws.groups):
        kmat = _scatter_sym(uv, g)
        try:
            linv, logdiag = dual.chol_lower_inv(kmat)
        except np.linalg.LinAlgError as exc:
            raise PositiveDefiniteError(
                f"conditional covariance not positive definite in group {gi} "
                f"(m={g.m}, b={g.b})") from exc
        det = det + 2.0 * logdiag[:, g.m:].sum()
        wr = linv[:, g.m:, :]
        if rhs is not None:
            u = rhs[g.orig]                        # (G, k, r)
            t = dual.matmul(wr, u)
            sq = (t * t).sum(axis=0).sum(axis=0)
            qf = qf + sq
            if cross is not None:
                tc = (t[:, :, ia] * t[:, :, ib]).sum(axis=0).sum(axis=0)
                cross = cross + tc
        if rhs_blocks is not None:
            t2 = dual.matmul(wr, rhs_blocks[gi])
            qf_blocks = qf_blocks + (t2 * t2).sum()
        if want_factor:
            rows_out.append((g.row_pos, g.jpos, np.ascontiguousarray(dual.value(wr))))

    return PassResult(det_part=det, qf=qf, qf_block_total=qf_blocks,
                      cross=cross, factor_rows=rows_out)


def _model_nparams(model, noise):
    for obj in (model, noise):
        if obj is None:
            continue
        for name in ("sigma2", "rho", "nu", "sigmas", "w11", "eta2", "etas"):
            v = getattr(obj, name, None)
            if isinstance(v, Dual):
                return v.nparams
    return 0


def _zeros_like_vec(template, n):
    if isinstance(template, Dual):
        return dual.constant(np.zeros(n), template.nparams)
    return np.zeros(n)


def _lane_assign(target, mask, values):
    if isinstance(values, Dual) and not isinstance(target, Dual):
        target = dual.constant(target, values.nparams)
    if isinstance(target, Dual):
        if not isinstance(values, Dual):
            values = dual.constant(np.asarray(values, float), target.nparams)
        target.val[mask] = values.val
        target.eps[:, mask] = values.eps
    else:
        target[mask] = values
    return target


def _scatter_sym(uniq_vals, g: _ShapeGroup):
    """Unique pair covariances -> symmetric (G, k, k) stack."""
    G = g.jpos.shape[0]
    tri = uniq_vals[g.pair_inv].reshape((G, len(g.iu[0])))
    if isinstance(tri, Dual):
        out = dual.constant(np.zeros((G, g.k, g.k)), tri.nparams)
        out.val[:, g.iu[0], g.iu[1]] = tri.val
        out.val[:, g.iu[1], g.iu[0]] = tri.val
        out.eps[:, :, g.iu[0], g.iu[1]] = tri.eps
        out.eps[:, :, g.iu[1], g.iu[0]] = tri.eps
        return out
    out = np.zeros((G, g.k, g.k))
    out[:, g.iu[0], g.iu[1]] = tri
    out[:, g.iu[1], g.iu[0]] = tri
    return out


# -- public likelihood pieces -------------------------------------------------------


def vecchia_nll_parts(model, noise, locs, plan, u, workspace=None):
    """(det_part, qf_part): sum of block log-dets and whitened residual norms.

    The full negative log-likelihood is (det + qf + n log 2pi) / 2. With
    ``noise`` given, nugget variances are folded into the block covariances
    (the naive-Vecchia mode); pass None for the latent-kernel-only pieces.
    """
    ws = workspace if workspace is not None else BlockWorkspace(locs, plan)
    res = conditional_pass(model, noise, ws, rhs=np.asarray(u, dtype=float))
    return res.det_part, res.qf[0]


def vecchia_nll(model, noise, locs, plan, u, workspace=None):
    det, qf = vecchia_nll_parts(model, noise, locs, plan, u, workspace=workspace)
    n = plan.n if workspace is None else workspace.n
    return 0.5 * (det + qf + n * np.log(2.0 * np.pi))


# -- sparse precision factor ---------------------------------------------------------


class SparsePrecisionFactor:
    """Triangular factor of the Vecchia precision approximation.

    ``half`` is lower triangular in the plan's ordering with
    Omega_ordered = half^T half; equivalently L = half^T satisfies
    Omega = L L^T. Matvecs are exposed in original index order.
    """

    def __init__(self, half: sp.csr_matrix, perm, det_part):
        self.half = half
        self.perm = np.asarray(perm, dtype=np.int64)
        self.det_part = float(det_part)

    @property
    def L(self):
        return self.half.T.tocsr()

    @property
    def logdet_omega(self):
        return -self.det_part

    @property
    def nnz(self):
        return self.half.nnz

    def matvec(self, u):
        u = np.asarray(u, dtype=float)
        squeeze = u.ndim == 1
        if squeeze:
            u = u[:, None]
        w = self.half @ u[self.perm]
        res_ord = self.half.T @ w
        out = np.empty_like(res_ord)
        out[self.perm] = res_ord
        return out[:, 0] if squeeze else out

    def half_t_apply(self, u):
        """U u in ordered space for u given in original order: whitening map."""
        u = np.asarray(u, dtype=float)
        return self.half @ (u[self.perm] if u.ndim == 1 else u[self.perm, :])

    def dense_omega(self):
        a_ord = (self.half.T @ self.half).toarray()
        n = a_ord.shape[0]
        out = np.empty_like(a_ord)
        ix = np.ix_(self.perm, self.perm)
        out[ix] = a_ord
        return out


def assemble_precision_factor(model, locs, plan, workspace=None):
    """Assemble the sparse triangular precision factor at the parameters.

    Kernel-only covariance (no nugget folded in): the factor represents the
    approximation to the latent field's precision.
    """
    ws = workspace if workspace is not None else BlockWorkspace(locs, plan)
    res = conditional_pass(_plain(model), None, ws, want_factor=True)
    n = ws.n
    rows, cols, vals = [], [], []
    for row_pos, jpos, wr in res.factor_rows:
        G, b, k = wr.shape
        m = k - b
        # keep the lower triangle of the in-block part; drop structural zeros
        rr = np.repeat(row_pos[:, :, None], k, axis=2)       # (G, b, k)
        cc = np.repeat(jpos[:, None, :], b, axis=1)          # (G, b, k)
        keep = np.ones((G, b, k), dtype=bool)
        for i in range(b):
            keep[:, i, m + i + 1:] = False
        rows.append(rr[keep])
        cols.append(cc[keep])
        vals.append(wr[keep])
    half = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    det = float(dual.value(res.det_part))
    return SparsePrecisionFactor(half=half, perm=plan.perm, det_part=det)


def _plain(model):
    """Strip duals off a parameter object (factor assembly is value-only)."""
    vec = model.to_vector()
    return model.replace_vector(vec)


def precision_matvec(factor: SparsePrecisionFactor, u):
    """Omega~ u via the triangular factor (apply half, then its transpose)."""
    return factor.matvec(u)

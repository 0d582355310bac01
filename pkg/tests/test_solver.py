import numpy as np
import pytest

from vecchiaem.kernels import MaternIsoParams, NoiseDiagParams, cov_matrix, noise_matrix
from vecchiaem.solver import (
    LOG_2PI,
    SolverError,
    cg_solve,
    conditional_mean,
    dense_conditional_pieces,
    exact_e_function,
    exact_nll,
    factor_dense,
    factor_sparse,
    gaussian_nll,
    noisy_precision_factor,
    solve_spd,
)
from vecchiaem.vecchia import assemble_precision_factor, build_conditioning, maximin_order

from conftest import make_problem
from oracles import dense_gaussian_nll


def _spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


class TestFactorHandles:
    def test_dense_invariants(self, rng):
        a = _spd(rng, 30)
        f = factor_dense(a)
        u = rng.standard_normal(30)
        norm = np.linalg.norm(a) * np.linalg.norm(u)
        assert np.linalg.norm(a @ u - f.w_matvec(f.wt_matvec(u))) <= 1e-9 * norm
        assert f.logdet == pytest.approx(np.linalg.slogdet(a)[1], rel=1e-10)
        np.testing.assert_allclose(a @ f.solve(u), u, atol=1e-8 * np.abs(u).max())

    def test_sparse_invariants(self, rng):
        prob = make_problem(120, seed=41, m=8)
        omega = assemble_precision_factor(prob["model"], prob["locs"], prob["plan"])
        nd = noise_matrix(prob["noise"], prob["locs"])
        f = noisy_precision_factor(omega, nd, backend="sparse_chol")
        a = omega.dense_omega() + np.diag(nd.inv_diag)
        u = rng.standard_normal(120)
        norm = np.linalg.norm(a) * np.linalg.norm(u)
        assert np.linalg.norm(a @ u - f.matvec(u)) <= 1e-9 * norm
        assert f.logdet == pytest.approx(np.linalg.slogdet(a)[1], rel=1e-10)
        # half solves define the symmetrized presolve: x^T A x == ||v||^2
        v = rng.standard_normal(120)
        x = f.half_solve_t(v)
        assert x @ (a @ x) == pytest.approx(v @ v, rel=1e-10)
        # and W^{-1} then W^{-T} is a full solve
        np.testing.assert_allclose(f.half_solve_t(f.half_solve(v)), f.solve(v),
                                   rtol=1e-9, atol=1e-12)

    def test_not_spd_raises(self, rng):
        with pytest.raises(Exception):
            factor_dense(-np.eye(4))


class TestGaussianNLL:
    def test_identity_zero(self):
        f = factor_dense(np.eye(7))
        assert gaussian_nll(f, np.zeros(7)) == pytest.approx(3.5 * LOG_2PI)

    def test_scalar_case(self):
        f = factor_dense(np.array([[4.0]]))
        want = 0.5 * (np.log(4.0) + 1.0 + LOG_2PI)
        assert gaussian_nll(f, np.array([2.0])) == pytest.approx(want, rel=1e-14)

    def test_matches_dense_inverse_oracle(self, rng):
        a = _spd(rng, 6)
        u = rng.standard_normal(6)
        assert gaussian_nll(factor_dense(a), u) == pytest.approx(
            dense_gaussian_nll(a, u), rel=1e-10)


class TestExactNLL:
    def test_scalar_closed_form(self):
        m = MaternIsoParams(sigma2=3.0, rho=1.0, nu=1.0)
        nz = NoiseDiagParams(eta2=2.0)
        want = 0.5 * (np.log(5.0) + LOG_2PI)
        got = exact_nll(m, nz, np.array([[0.5, 0.5]]), np.array([0.0]))
        assert got == pytest.approx(want, rel=1e-14)

    def test_matches_assembled_factor(self, rng):
        prob = make_problem(40, seed=43)
        s = cov_matrix(prob["model"], prob["locs"]) + 0.25 * np.eye(40)
        want = gaussian_nll(factor_dense(s), prob["y"])
        got = exact_nll(prob["model"], prob["noise"], prob["locs"], prob["y"])
        assert got == want

    def test_dense_guard(self, rng):
        m = MaternIsoParams(sigma2=1.0, rho=0.1, nu=0.5)
        locs = rng.uniform(size=(30, 2))
        with pytest.raises(ValueError, match="dense guard"):
            exact_nll(m, None, locs, np.zeros(30), dense_guard=10)
        exact_nll(m, None, locs, np.zeros(30), dense_guard=10, force=True)


class TestConditionalMean:
    def test_infinite_noise_limit(self):
        prob = make_problem(60, seed=47)
        big = NoiseDiagParams(eta2=1e6 * 4.0)
        z = conditional_mean(prob["model"], big, prob["locs"], prob["y"])
        assert np.linalg.norm(z) <= 1e-2 * np.linalg.norm(prob["y"])

    def test_noiseless_limit(self):
        prob = make_problem(60, seed=53)
        tiny = NoiseDiagParams(eta2=1e-8 * 4.0)
        z = conditional_mean(prob["model"], tiny, prob["locs"], prob["y"])
        assert np.linalg.norm(z - prob["y"]) <= 1e-3 * np.linalg.norm(prob["y"])

    def test_backends_agree_full_conditioning(self):
        prob = make_problem(300, seed=59, full=True)
        args = (prob["model"], prob["noise"], prob["locs"], prob["y"])
        z_dense = conditional_mean(*args, backend="dense")
        z_sparse = conditional_mean(*args, plan=prob["plan"], backend="sparse_chol")
        z_cg = conditional_mean(*args, plan=prob["plan"], backend="cg")
        assert np.linalg.norm(z_sparse - z_dense) <= 1e-6 * np.linalg.norm(z_dense)
        assert np.linalg.norm(z_cg - z_dense) <= 1e-6 * np.linalg.norm(z_dense)

    def test_dense_identity_forms(self):
        # S (S+R)^{-1} y == (S^{-1} + R^{-1})^{-1} R^{-1} y
        prob = make_problem(50, seed=61)
        s = cov_matrix(prob["model"], prob["locs"])
        r_inv = np.eye(50) / 0.25
        lhs = conditional_mean(prob["model"], prob["noise"], prob["locs"], prob["y"])
        rhs = np.linalg.solve(np.linalg.inv(s) + r_inv, r_inv @ prob["y"])
        np.testing.assert_allclose(lhs, rhs, rtol=1e-7, atol=1e-9)


class TestSolveSPD:
    def test_identity(self, rng):
        b = rng.standard_normal(12)
        np.testing.assert_allclose(solve_spd(np.eye(12), b), b)

    def test_cg_matches_dense(self, rng):
        a = _spd(rng, 200)
        b = rng.standard_normal(200)
        x_chol = solve_spd(a, b, backend="dense_chol")
        x_cg = solve_spd(a, b, backend="cg", tol=1e-10)
        assert np.linalg.norm(x_cg - x_chol) <= 1e-8 * np.linalg.norm(x_chol)

    def test_real_plan_backends_agree(self, rng):
        prob = make_problem(150, seed=67, m=10)
        omega = assemble_precision_factor(prob["model"], prob["locs"], prob["plan"])
        nd = noise_matrix(prob["noise"], prob["locs"])
        a = omega.dense_omega() + np.diag(nd.inv_diag)
        b = nd.inv_diag * prob["y"]
        x1 = solve_spd(a, b, backend="dense_chol")
        import scipy.sparse as sp
        x2 = solve_spd(sp.csc_matrix(a), b, backend="sparse_chol")
        x3 = solve_spd(a, b, backend="cg", tol=1e-12)
        assert np.linalg.norm(x2 - x1) <= 1e-6 * np.linalg.norm(x1)
        assert np.linalg.norm(x3 - x1) <= 1e-6 * np.linalg.norm(x1)

    def test_cg_iterations_and_monotone_a_norm(self, rng):
        a = _spd(rng, 60)
        b = rng.standard_normal(60)
        x_star = np.linalg.solve(a, b)
        xs = []

        def apply_a(v):
            return a @ v

        x, info = cg_solve(apply_a, b, tol=1e-12, maxit=200)
        assert info.converged and info.iterations <= 60 + 5
        # track the A-norm error along a rerun with snapshots
        x_run = np.zeros(60)
        r = b.copy()
        p = r.copy()
        rz = float(r @ r)
        errs = [float((x_run - x_star) @ (a @ (x_run - x_star)))]
        for _ in range(60):
            ap = a @ p
            alpha = rz / float(p @ ap)
            x_run = x_run + alpha * p
            r = r - alpha * ap
            rz_new = float(r @ r)
            p = r + (rz_new / rz) * p
            rz = rz_new
            errs.append(float((x_run - x_star) @ (a @ (x_run - x_star))))
        assert all(errs[i + 1] <= errs[i] + 1e-10 for i in range(len(errs) - 1))

    def test_cg_nonconvergence_reported(self, rng):
        a = _spd(rng, 40)
        b = rng.standard_normal(40)
        with pytest.raises(SolverError) as err:
            solve_spd(a, b, backend="cg", tol=1e-15, maxit=2)
        assert err.value.iterations == 2
        assert err.value.residual is not None

    def test_cg_with_vecchia_preconditioner(self, rng):
        # n-step termination is an exact-arithmetic property; checked on a
        # small instance at a tolerance where roundoff does not intrude
        n = 100
        prob = make_problem(n, seed=71, m=10)
        omega = assemble_precision_factor(prob["model"], prob["locs"], prob["plan"])
        nd = noise_matrix(prob["noise"], prob["locs"])
        b = nd.inv_diag * prob["y"]

        def apply_a(v):
            return omega.matvec(v) + nd.inv_diag * v

        # preconditioning with the Vecchia factor itself
        def m_inv(v):
            w = v[omega.perm]
            import scipy.sparse.linalg as spla
            w = spla.spsolve_triangular(omega.half, w, lower=True)
            w = spla.spsolve_triangular(omega.half.T.tocsr(), w, lower=False)
            out = np.empty_like(w)
            out[omega.perm] = w
            return out

        x_pre, info_pre = cg_solve(apply_a, b, m_inv=m_inv, tol=1e-8, maxit=400)
        x_raw, info_raw = cg_solve(apply_a, b, tol=1e-8, maxit=400)
        assert info_pre.converged and info_raw.converged
        assert info_pre.iterations <= n
        assert info_raw.iterations <= n
        x_direct = np.linalg.solve(omega.dense_omega() + np.diag(nd.inv_diag), b)
        scale = np.linalg.norm(x_direct)
        assert np.linalg.norm(x_pre - x_direct) <= 1e-4 * scale
        assert np.linalg.norm(x_raw - x_direct) <= 1e-4 * scale


class TestBlockIdentities:
    def test_logdet_split(self, rng):
        # log|S+R| = log|S| + log|R| + log|S^{-1}+R^{-1}|
        for _ in range(5):
            s = _spd(rng, 6)
            r = np.diag(rng.uniform(0.5, 2.0, 6))
            lhs = np.linalg.slogdet(s + r)[1]
            rhs = (np.linalg.slogdet(s)[1] + np.linalg.slogdet(r)[1]
                   + np.linalg.slogdet(np.linalg.inv(s) + np.linalg.inv(r))[1])
            assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_joint_quadratic_form_split(self, rng):
        # [y z]' J^{-1} [y z] = (y-z)' R^{-1} (y-z) + z' S^{-1} z
        s = _spd(rng, 4)
        r = np.diag(rng.uniform(0.5, 2.0, 4))
        joint = np.block([[s + r, s], [s, s]])
        y = rng.standard_normal(4)
        z = rng.standard_normal(4)
        u = np.concatenate([y, z])
        lhs = u @ np.linalg.solve(joint, u)
        rhs = (y - z) @ np.linalg.solve(r, y - z) + z @ np.linalg.solve(s, z)
        assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_joint_triangular_factorization(self, rng):
        s = _spd(rng, 4)
        r = np.diag(rng.uniform(0.5, 2.0, 4))
        eye = np.eye(4)
        left = np.block([[eye, eye], [np.zeros((4, 4)), eye]])
        mid = np.block([[r, np.zeros((4, 4))], [np.zeros((4, 4)), s]])
        joint = np.block([[s + r, s], [s, s]])
        np.testing.assert_allclose(left @ mid @ left.T, joint, rtol=1e-12)


class TestExactEFunction:
    def test_trace_at_tangency_is_half_n(self, rng):
        prob = make_problem(50, seed=73)
        s = cov_matrix(prob["model"], prob["locs"])
        zhat, c0 = dense_conditional_pieces(prob["model"], prob["noise"],
                                            prob["locs"], prob["y"])
        a = np.linalg.inv(s) + np.eye(50) / 0.25
        assert 0.5 * np.trace(a @ c0) == pytest.approx(25.0, rel=1e-8)

    def test_em_tangency_gradients_agree(self):
        # d/dtheta of E(theta;theta0) at theta0 equals d/dtheta of the
        # marginal NLL (both by central differences on raw parameters)
        prob = make_problem(40, seed=79)
        locs, y = prob["locs"], prob["y"]
        base = np.array([4.0, 0.1, 1.0, 0.25])

        def e_fn(p):
            m = MaternIsoParams(*p[:3])
            nz = NoiseDiagParams(eta2=p[3])
            return exact_e_function(m, nz, prob["model"], prob["noise"], locs, y)

        def marg(p):
            m = MaternIsoParams(*p[:3])
            nz = NoiseDiagParams(eta2=p[3])
            return exact_nll(m, nz, locs, y)

        for i in range(4):
            h = 1e-5 * base[i]
            e = np.zeros(4)
            e[i] = h
            ge = (e_fn(base + e) - e_fn(base - e)) / (2 * h)
            gm = (marg(base + e) - marg(base - e)) / (2 * h)
            assert ge == pytest.approx(gm, rel=2e-4, abs=1e-6)

    def test_matches_monte_carlo_expectation(self, rng):
        prob = make_problem(50, seed=83)
        locs, y = prob["locs"], prob["y"]
        m_t = MaternIsoParams(sigma2=4.5, rho=0.09, nu=1.15)
        n_t = NoiseDiagParams(eta2=0.3)
        want = exact_e_function(m_t, n_t, prob["model"], prob["noise"], locs, y)
        zhat, c0 = dense_conditional_pieces(prob["model"], prob["noise"], locs, y)
        chol = np.linalg.cholesky(c0 + 1e-12 * np.trace(c0) / 50 * np.eye(50))
        s_t = cov_matrix(m_t, locs)
        f_st = factor_dense(s_t)
        draws = 100_000
        g = rng.standard_normal((draws, 50))
        zs = zhat[None, :] + g @ chol.T
        # joint NLL = nll_S(z) + nll_R(y - z), vectorized over draws
        half = np.linalg.solve(np.linalg.cholesky(s_t), zs.T)
        qf_s = (half ** 2).sum(axis=0)
        nll_s = 0.5 * (f_st.logdet + qf_s + 50 * LOG_2PI)
        resid = y[None, :] - zs
        nll_r = 0.5 * (50 * np.log(0.3) + (resid ** 2).sum(axis=1) / 0.3
                       + 50 * LOG_2PI)
        vals = nll_s + nll_r
        se = vals.std(ddof=1) / np.sqrt(draws)
        assert abs(vals.mean() - want) <= 3 * se

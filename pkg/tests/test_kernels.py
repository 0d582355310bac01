import numpy as np
import pytest

from vecchiaem import dual
from vecchiaem.kernels import (
    AnisoKnotParams,
    MaternIsoParams,
    NoiseDiagParams,
    cov_matrix,
    kernel_eval,
    knot_weights,
    load_config,
    matern_correlation,
    noise_matrix,
    save_config,
)

from oracles import matern_halfint


class TestMaternCorrelation:
    def test_zero_lag_is_one(self):
        for nu in [0.5, 1.1, 2.25, 7.0]:
            assert matern_correlation(nu, 0.0) == 1.0

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
    def test_half_integer_closed_forms(self, nu):
        t = np.concatenate([[1e-4, 0.1, 1.0, 3.0], np.linspace(0.01, 20, 50)])
        got = matern_correlation(nu, t)
        np.testing.assert_allclose(got, matern_halfint(nu, t), rtol=1e-10)

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.25])
    def test_monotone_nonincreasing(self, nu):
        t = np.linspace(0.0, 10.0, 400)
        vals = matern_correlation(nu, t)
        assert np.all(np.diff(vals) <= 1e-15)

    def test_range_is_unit_interval(self):
        t = np.linspace(0, 60, 200)
        vals = matern_correlation(2.25, t)
        assert np.all(vals <= 1.0) and np.all(vals >= 0.0)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            matern_correlation(-1.0, 1.0)
        with pytest.raises(ValueError):
            matern_correlation(1.0, -0.5)


class TestIsoKernel:
    def test_diagonal_equals_sigma2(self):
        m = MaternIsoParams(sigma2=10.0, rho=0.025, nu=2.25)
        x = np.array([0.3, 0.4])
        assert kernel_eval(m, x, x) == pytest.approx(10.0, rel=1e-14)

    def test_one_range_unit_exponential(self):
        m = MaternIsoParams(sigma2=10.0, rho=0.025, nu=0.5)
        x, x2 = np.array([0.0, 0.0]), np.array([0.025, 0.0])
        assert kernel_eval(m, x, x2) == pytest.approx(10.0 * np.exp(-1.0), rel=1e-12)

    def test_symmetry(self, rng):
        m = MaternIsoParams(sigma2=3.0, rho=0.2, nu=1.7)
        for _ in range(20):
            a, b = rng.uniform(size=2), rng.uniform(size=2)
            assert abs(kernel_eval(m, a, b) - kernel_eval(m, b, a)) <= 1e-14 * 3.0

    def test_cov_matrix_psd(self, rng):
        m = MaternIsoParams(sigma2=2.0, rho=0.3, nu=1.2)
        locs = rng.uniform(size=(5, 2))
        s = cov_matrix(m, locs)
        np.testing.assert_allclose(s, s.T)
        assert np.linalg.eigvalsh(s).min() >= -1e-10 * 2.0

    def test_single_and_coincident(self):
        m = MaternIsoParams(sigma2=2.5, rho=0.3, nu=1.2)
        one = cov_matrix(m, np.array([[0.1, 0.2]]))
        assert one.shape == (1, 1) and one[0, 0] == pytest.approx(2.5)
        two = cov_matrix(m, np.array([[0.1, 0.2], [0.1, 0.2]]))
        np.testing.assert_allclose(two, 2.5 * np.ones((2, 2)), rtol=1e-14)

    def test_rectangular_matches_eval(self, rng):
        m = MaternIsoParams(sigma2=1.5, rho=0.25, nu=2.25)
        a = rng.uniform(size=(3, 2))
        b = rng.uniform(size=(4, 2))
        s = cov_matrix(m, a, b)
        for i in range(3):
            for j in range(4):
                assert s[i, j] == pytest.approx(kernel_eval(m, a[i], b[j]), rel=1e-14)

    def test_dimension_mismatch(self):
        m = MaternIsoParams(sigma2=1.0, rho=1.0, nu=1.0)
        with pytest.raises(ValueError):
            kernel_eval(m, np.array([0.1, 0.2]), np.array([0.1, 0.2, 0.3]))

    def test_invalid_params(self):
        for bad in [dict(sigma2=-1.0, rho=1.0, nu=1.0),
                    dict(sigma2=1.0, rho=0.0, nu=1.0),
                    dict(sigma2=1.0, rho=1.0, nu=-2.0)]:
            with pytest.raises(ValueError):
                MaternIsoParams(**bad)

    def test_parameter_gradients_match_fd(self, rng):
        locs = rng.uniform(size=(6, 2))
        x0 = np.log([2.0, 0.2, 1.3])

        def k01(x):
            m = MaternIsoParams(*np.exp(x))
            return kernel_eval(m, locs[0], locs[1])

        xd = dual.seed(x0)
        md = MaternIsoParams(dual.exp(xd[0]), dual.exp(xd[1]), dual.exp(xd[2]))
        got = kernel_eval(md, locs[0], locs[1])
        h = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (k01(x0 + e) - k01(x0 - e)) / (2 * h)
            assert got.eps[i] == pytest.approx(fd, rel=1e-5)


class TestKnotWeights:
    def test_normalized_and_nonnegative(self, rng):
        knots = np.array([0.2, 0.8, 1.2])
        w = knot_weights(rng.uniform(0, 1.4, 40), knots)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-12)

    def test_exact_hit(self):
        w = knot_weights(np.array([0.8]), np.array([0.2, 0.8, 1.2]))
        np.testing.assert_allclose(w, [[0.0, 1.0, 0.0]])


class TestAnisoKernel:
    def setup_method(self):
        self.knots = np.array([0.2, 0.8, 1.2])

    def test_reduces_to_iso_with_constant_scale(self, rng):
        c = 1.7
        aniso = AnisoKnotParams(sigmas=np.array([c, c, c]), w11=1.0, w12=0.0,
                                w22=1.0, nu=1.5, knots=self.knots)
        iso = MaternIsoParams(sigma2=c * c, rho=1.0, nu=1.5)
        for _ in range(25):
            a = rng.uniform(0, 1.4, size=2)
            b = rng.uniform(0, 1.4, size=2)
            assert kernel_eval(aniso, a, b) == pytest.approx(
                kernel_eval(iso, a, b), rel=1e-12)

    def test_anisotropy_distance(self):
        # with W fixed, covariance depends on ||W^T d|| only
        p = AnisoKnotParams(sigmas=np.array([1.0, 1.0, 1.0]), w11=2.0, w12=0.5,
                            w22=3.0, nu=1.5, knots=self.knots)
        a = np.array([0.0, 0.5])
        b = np.array([0.1, 0.5])
        d = a - b
        wt_d = np.array([2.0 * d[0], 0.5 * d[0] + 3.0 * d[1]])
        want = matern_correlation(1.5, np.linalg.norm(wt_d))
        assert kernel_eval(p, a, b) == pytest.approx(want, rel=1e-12)

    def test_scale_interpolates_knots(self):
        s = np.array([1.0, 2.0, 3.0])
        p = AnisoKnotParams(sigmas=s, w11=1.0, w12=0.0, w22=1.0, nu=0.5,
                            knots=self.knots)
        x = np.array([0.3, 0.8])  # on the middle knot in the last coordinate
        assert kernel_eval(p, x, x) == pytest.approx(4.0, rel=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            AnisoKnotParams(sigmas=np.array([1.0, -1.0, 1.0]), w11=1.0, w12=0.0,
                            w22=1.0, nu=1.0, knots=self.knots)
        with pytest.raises(ValueError):
            AnisoKnotParams(sigmas=np.array([1.0, 1.0, 1.0]), w11=0.0, w12=0.0,
                            w22=1.0, nu=1.0, knots=self.knots)


class TestNoise:
    def test_constant_diag(self):
        nd = noise_matrix(NoiseDiagParams(eta2=0.25), np.zeros((4, 2)))
        np.testing.assert_allclose(nd.diag, 0.25)
        np.testing.assert_allclose(nd.diag * nd.inv_diag, 1.0, atol=1e-14)
        np.testing.assert_allclose(nd.half_inv_diag ** 2, nd.inv_diag, rtol=1e-14)

    def test_knot_noise_at_knot(self):
        knots = np.array([0.2, 0.8, 1.2])
        nz = NoiseDiagParams(etas=np.array([0.1, 0.5, 0.9]), knots=knots)
        locs = np.array([[0.0, 0.8]])
        nd = noise_matrix(nz, locs)
        assert nd.diag[0] == pytest.approx(0.25, rel=1e-12)  # eta_2^2

    def test_invalid(self):
        with pytest.raises(ValueError):
            NoiseDiagParams(eta2=-0.1)
        with pytest.raises(ValueError):
            NoiseDiagParams()
        with pytest.raises(ValueError):
            NoiseDiagParams(eta2=0.1, etas=np.ones(3), knots=np.ones(3))


class TestConfigRoundTrip:
    def test_iso(self, tmp_path):
        m = MaternIsoParams(sigma2=10.0, rho=0.025, nu=2.25)
        nz = NoiseDiagParams(eta2=0.25)
        path = tmp_path / "params.txt"
        save_config(path, m, nz)
        m2, nz2 = load_config(path)
        assert (m2.sigma2, m2.rho, m2.nu) == (10.0, 0.025, 2.25)
        assert nz2.eta2 == 0.25

    def test_aniso(self, tmp_path):
        m = AnisoKnotParams(sigmas=np.array([1.2, 0.4, 0.5]), w11=8.0, w12=0.2,
                            w22=700.0, nu=0.6, knots=np.array([0.2, 0.8, 1.2]))
        nz = NoiseDiagParams(etas=np.array([0.01, 0.02, 0.1]),
                             knots=np.array([0.2, 0.8, 1.2]))
        path = tmp_path / "params.txt"
        save_config(path, m, nz)
        m2, nz2 = load_config(path)
        np.testing.assert_allclose(m2.sigmas, m.sigmas)
        assert (m2.w11, m2.w12, m2.w22, m2.nu) == (8.0, 0.2, 700.0, 0.6)
        np.testing.assert_allclose(nz2.etas, nz.etas)
        np.testing.assert_allclose(nz2.knots, m.knots)

    def test_kernel_only(self, tmp_path):
        m = MaternIsoParams(sigma2=1.0, rho=0.5, nu=1.0)
        path = tmp_path / "k.txt"
        save_config(path, m, None)
        m2, nz2 = load_config(path)
        assert nz2 is None and m2.rho == 0.5

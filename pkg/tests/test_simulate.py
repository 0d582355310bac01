import numpy as np
import pytest

from vecchiaem.kernels import MaternIsoParams, NoiseDiagParams, cov_matrix, kernel_eval
from vecchiaem.simulate import (
    SimSpec,
    SpatialDataset,
    load_dataset,
    predict_nn,
    sample_gp,
    sample_locations,
    save_dataset,
)

from conftest import make_problem

MODEL = MaternIsoParams(sigma2=2.0, rho=0.2, nu=1.5)
NOISE = NoiseDiagParams(eta2=0.5)


class TestLocations:
    def test_single_point_in_bounds(self):
        locs = sample_locations(SimSpec(n=1, seed=4))
        assert locs.shape == (1, 2)
        assert np.all((locs >= 0) & (locs <= 1))

    def test_deterministic(self):
        a = sample_locations(SimSpec(n=50, seed=9))
        b = sample_locations(SimSpec(n=50, seed=9))
        assert np.array_equal(a, b)
        c = sample_locations(SimSpec(n=50, seed=9), replicate=1)
        assert not np.array_equal(a, c)

    def test_clt_mean(self):
        locs = sample_locations(SimSpec(n=100_000, seed=2))
        # mean of U(0,1) has sd 1/sqrt(12 n)
        band = 4.0 / np.sqrt(12 * 100_000)
        assert np.all(np.abs(locs.mean(axis=0) - 0.5) <= band)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SimSpec(n=0)
        with pytest.raises(ValueError):
            SimSpec(n=5, bounds=((0.0, 0.0), (0.0, 1.0)))


class TestSampleGP:
    def test_scale_linearity_at_fixed_seed(self, rng):
        locs = rng.uniform(size=(40, 2))
        m1 = MaternIsoParams(sigma2=1.0, rho=0.2, nu=1.5)
        m4 = MaternIsoParams(sigma2=4.0, rho=0.2, nu=1.5)
        y1 = sample_gp(m1, None, locs, seed=3)
        y4 = sample_gp(m4, None, locs, seed=3)
        np.testing.assert_allclose(y4, 2.0 * y1, rtol=1e-12)

    def test_marginal_variance(self):
        locs = np.array([[0.5, 0.5]])
        draws = np.array([sample_gp(MODEL, NOISE, locs, seed=s)[0]
                          for s in range(10_000)])
        assert draws.var() == pytest.approx(2.5, rel=0.05)

    def test_pair_covariance(self):
        locs = np.array([[0.3, 0.3], [0.35, 0.3]])
        draws = np.array([sample_gp(MODEL, None, locs, seed=s)
                          for s in range(8_000)])
        want = kernel_eval(MODEL, locs[0], locs[1])
        cov = np.cov(draws.T)[0, 1]
        se = 5 * 2.0 / np.sqrt(8_000)  # crude clt band on a covariance
        assert abs(cov - want) <= se

    def test_latent_returned(self, rng):
        locs = rng.uniform(size=(30, 2))
        y, z = sample_gp(MODEL, NOISE, locs, seed=1, return_latent=True)
        assert y.shape == z.shape == (30,)
        assert not np.array_equal(y, z)

    def test_whiteness_after_exact_whitening(self):
        # chol(S+R)^{-1} y should be white; retried per the flaky-test policy
        n = 2000
        for attempt in range(3):
            locs = sample_locations(SimSpec(n=n, seed=100 + attempt))
            y = sample_gp(MODEL, NOISE, locs, seed=200 + attempt)
            s = cov_matrix(MODEL, locs) + 0.5 * np.eye(n)
            w = np.linalg.solve(np.linalg.cholesky(s), y)
            if 0.9 <= w.var() <= 1.1:
                break
        else:
            pytest.fail(f"whitened variance {w.var()} outside [0.9, 1.1] x3")

    def test_guard(self, rng):
        with pytest.raises(ValueError):
            sample_gp(MODEL, NOISE, rng.uniform(size=(50, 2)), dense_guard=10)


class TestPredictNN:
    def test_interpolation_limit(self):
        prob = make_problem(80, seed=101, eta2=None)
        ds = SpatialDataset(locs=prob["locs"], y=prob["y"])
        tiny = NoiseDiagParams(eta2=1e-10)
        target = prob["locs"][17]
        mean, var = predict_nn(prob["model"], tiny, ds, target, k=40)
        assert mean == pytest.approx(prob["y"][17], rel=1e-4)
        assert var <= 1e-6 * prob["model"].sigma2

    def test_all_neighbors_matches_dense(self):
        prob = make_problem(200, seed=103)
        ds = prob["dataset"]
        x_star = np.array([0.5, 0.5])
        mean, var = predict_nn(prob["model"], prob["noise"], ds, x_star, k=200)
        s = cov_matrix(prob["model"], prob["locs"]) + 0.25 * np.eye(200)
        k_star = cov_matrix(prob["model"], x_star[None], prob["locs"])[0]
        w = np.linalg.solve(s, k_star)
        mean_d = float(k_star @ np.linalg.solve(s, ds.y))
        var_d = prob["model"].sigma2 - float(k_star @ w)
        assert mean == pytest.approx(mean_d, abs=1e-10)
        assert var == pytest.approx(var_d, abs=1e-10)

    def test_variance_nonincreasing_in_k(self):
        prob = make_problem(300, seed=107)
        ds = prob["dataset"]
        x_star = np.array([0.5, 0.5])
        vars_ = [predict_nn(prob["model"], prob["noise"], ds, x_star, k=k)[1]
                 for k in (5, 20, 80, 300)]
        assert all(vars_[i + 1] <= vars_[i] + 1e-12 for i in range(len(vars_) - 1))

    def test_true_params_beat_perturbed(self):
        # averaged over replicates, the truth predicts the latent field better
        model = MaternIsoParams(sigma2=4.0, rho=0.1, nu=1.0)
        noise = NoiseDiagParams(eta2=0.25)
        bad_model = MaternIsoParams(sigma2=4.0, rho=0.025, nu=3.0)
        err_true = err_bad = 0.0
        for rep in range(12):
            locs = sample_locations(SimSpec(n=300, seed=40 + rep))
            y, z = sample_gp(model, noise, locs, seed=500 + rep,
                             return_latent=True)
            ds = SpatialDataset(locs=locs, y=y, z=z)
            tree_target = np.array([0.5, 0.5])
            idx = int(((locs - tree_target) ** 2).sum(1).argmin())
            target = locs[idx]
            mt, _ = predict_nn(model, noise, ds, target, k=100)
            mb, _ = predict_nn(bad_model, noise, ds, target, k=100)
            err_true += (mt - z[idx]) ** 2
            err_bad += (mb - z[idx]) ** 2
        assert err_true < err_bad

    def test_bad_k(self):
        prob = make_problem(20, seed=109)
        with pytest.raises(ValueError):
            predict_nn(prob["model"], prob["noise"], prob["dataset"],
                       np.array([0.5, 0.5]), k=21)


class TestDatasetIO:
    def test_roundtrip_lossless(self, tmp_path, rng):
        ds = SpatialDataset(locs=rng.uniform(size=(25, 2)),
                            y=rng.standard_normal(25),
                            z=rng.standard_normal(25))
        path = tmp_path / "data.csv"
        save_dataset(path, ds)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.locs, ds.locs)
        np.testing.assert_array_equal(back.y, ds.y)
        np.testing.assert_array_equal(back.z, ds.z)

    def test_no_latent_column(self, tmp_path, rng):
        ds = SpatialDataset(locs=rng.uniform(size=(5, 3)),
                            y=rng.standard_normal(5))
        path = tmp_path / "data.csv"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert back.z is None and back.dim == 3

"""Independent oracles used across the test suite.

Everything here is deliberately written against the defining formulas with
generic dense linear algebra or arbitrary-precision arithmetic, never
through the library's own evaluation paths.
"""

import mpmath as mp
import numpy as np


def besselk_series(nu, x, dps=60):
    """K_nu(x) by the power series of I_{+-nu} and the reflection formula.

    Arbitrary-precision; requires nu not an integer (the grid below avoids
    integers). Converges for any x > 0 at sufficient working precision.
    """
    with mp.workdps(dps):
        nu = mp.mpf(nu)
        x = mp.mpf(x)

        def bessel_i(a):
            s = mp.mpf(0)
            k = 0
            while True:
                t = (x / 2) ** (2 * k) / (mp.factorial(k) * mp.gamma(a + k + 1))
                s += t
                if abs(t) < mp.mpf(10) ** (-dps - 10) * max(abs(s), mp.mpf(1)):
                    break
                k += 1
            return (x / 2) ** a * s

        val = mp.pi / 2 * (bessel_i(-nu) - bessel_i(nu)) / mp.sin(nu * mp.pi)
        return float(val)


def besselk_dnu(nu, x, dps=40):
    """dK/dnu by high-precision numerical differentiation of mpmath's K."""
    with mp.workdps(dps):
        return float(mp.diff(lambda t: mp.besselk(t, mp.mpf(x)), mp.mpf(nu)))


def besselk_dx(nu, x, dps=40):
    with mp.workdps(dps):
        return float(mp.diff(lambda t: mp.besselk(mp.mpf(nu), t), mp.mpf(x)))


def dense_gaussian_nll(cov, u):
    """0.5(log|C| + u' C^{-1} u + n log 2pi) via generic dense inversion."""
    cov = np.asarray(cov, dtype=float)
    u = np.asarray(u, dtype=float)
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return 0.5 * (logdet + float(u @ np.linalg.solve(cov, u))
                  + u.size * np.log(2 * np.pi))


def dense_kl_gaussians(cov_p, prec_q):
    """KL(N(0, cov_p) || N(0, prec_q^{-1})) from dense pieces."""
    cov_p = np.asarray(cov_p, dtype=float)
    prec_q = np.asarray(prec_q, dtype=float)
    n = cov_p.shape[0]
    m = prec_q @ cov_p
    sign_p, logdet_p = np.linalg.slogdet(cov_p)
    sign_q, logdet_q = np.linalg.slogdet(prec_q)
    assert sign_p > 0 and sign_q > 0
    return 0.5 * (np.trace(m) - n - logdet_p - logdet_q)


def matern_halfint(nu, t):
    """Closed-form Matern correlations at nu in {1/2, 3/2, 5/2}."""
    t = np.asarray(t, dtype=float)
    if nu == 0.5:
        return np.exp(-t)
    if nu == 1.5:
        a = np.sqrt(3.0) * t
        return (1.0 + a) * np.exp(-a)
    if nu == 2.5:
        a = np.sqrt(5.0) * t
        return (1.0 + a + a * a / 3.0) * np.exp(-a)
    raise ValueError("only half-integer orders 1/2, 3/2, 5/2")

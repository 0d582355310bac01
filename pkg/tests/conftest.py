import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vecchiaem.kernels import MaternIsoParams, NoiseDiagParams, cov_matrix
from vecchiaem.simulate import SpatialDataset
from vecchiaem.vecchia import BlockWorkspace, build_conditioning, maximin_order


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def make_problem(n, seed, sigma2=4.0, rho=0.1, nu=1.0, eta2=0.25, m=10,
                 full=False):
    """Simulated noisy-GP problem with a conditioning plan and workspace."""
    r = np.random.default_rng(seed)
    locs = r.uniform(size=(n, 2))
    model = MaternIsoParams(sigma2=sigma2, rho=rho, nu=nu)
    noise = NoiseDiagParams(eta2=eta2) if eta2 is not None else None
    cov = cov_matrix(model, locs)
    z = np.linalg.cholesky(cov + 1e-12 * sigma2 * np.eye(n)) @ r.standard_normal(n)
    y = z + (np.sqrt(eta2) * r.standard_normal(n) if eta2 is not None else 0.0)
    perm = maximin_order(locs)
    plan = build_conditioning(locs, perm, mode="nn", m=(n if full else m))
    ws = BlockWorkspace(locs, plan)
    return {
        "locs": locs, "y": y, "z": z, "model": model, "noise": noise,
        "plan": plan, "ws": ws, "dataset": SpatialDataset(locs=locs, y=y, z=z),
    }

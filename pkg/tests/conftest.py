import numpy as np
import pytest

from dasp.envs import PointMassEnv, generate_dataset


def fd_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array, in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + h
            fp = f()
            arr[i] = orig - h
            fm = f()
            arr[i] = orig
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    """Norm-wise relative error of two gradient blocks."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


@pytest.fixture(scope="session")
def env():
    return PointMassEnv()


@pytest.fixture(scope="session")
def medium_small(env):
    return generate_dataset(env, "medium", 5000, 3)

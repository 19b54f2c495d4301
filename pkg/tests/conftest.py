import numpy as np
import pytest

from simplexcal.numcore.rng import Rng


@pytest.fixture
def rng():
    return Rng(12345)


def central_difference(f, params, step=1e-6):
    """Central finite-difference gradients of a scalar callable.

    ``f`` takes no arguments and reads ``params`` (a list of arrays) by
    reference; entries are perturbed in place.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = p[ix]
            p[ix] = orig + step
            fp = f()
            p[ix] = orig - step
            fm = f()
            p[ix] = orig
            g[ix] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-5, atol=1e-7):
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def directional_fd(f, params, vs, eps=1e-5):
    """Central difference of f along unit perturbations vs (one per param)."""
    for p, v in zip(params, vs):
        p.value += eps * v
    fp = float(_val(f()))
    for p, v in zip(params, vs):
        p.value -= 2 * eps * v
    fm = float(_val(f()))
    for p, v in zip(params, vs):
        p.value += eps * v
    return (fp - fm) / (2 * eps)


def _val(x):
    from dualpnn.cgraph import value_of
    return value_of(x)

import numpy as np
import pytest

from msmm.data import BasisTerm, Dataset, EffectSpec, WeightTerm
from msmm.simulate import SimScenario, generate


def two_point_dataset():
    """Z=(0,1), Y=(2,4), no mediator or covariates: theta-hat = log 2."""
    return Dataset(
        outcome=[2, 4],
        treatment=[0.0, 1.0],
        mediator=[0.0, 0.0],
        covariates=np.zeros((2, 0)),
    )


def two_point_spec():
    return EffectSpec(basis=(BasisTerm("Z"),), weights=(WeightTerm("Z"),))


@pytest.fixture
def two_point():
    return two_point_spec(), two_point_dataset()


def scenario_draw(rep=0, **kwargs):
    """One simulated dataset from the default study design."""
    scenario = SimScenario(**kwargs)
    data, latents = generate(scenario, rep)
    return scenario, data, latents


def finite_difference_jacobian(fn, theta, out_dim):
    """Central differences with step 1e-6 * (1 + |theta_k|)."""
    theta = np.asarray(theta, dtype=float)
    J = np.zeros((out_dim, theta.size))
    for k in range(theta.size):
        h = 1e-6 * (1.0 + abs(theta[k]))
        up = theta.copy()
        up[k] += h
        down = theta.copy()
        down[k] -= h
        J[:, k] = (fn(up) - fn(down)) / (2.0 * h)
    return J

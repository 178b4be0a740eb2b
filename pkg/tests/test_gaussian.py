import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dtrl.gaussian import (
    GaussianDist,
    gaussian_entropy,
    gaussian_kl,
    gaussian_log_prob,
)
from dtrl.seeding import rng


def t(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_log_prob_standard_normal_at_zero():
    lp = gaussian_log_prob(t([0.0]), t([1.0]), t([0.0]))
    assert lp.item() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_log_prob_factorizes_over_dims():
    mean = t([0.3, -0.2, 1.0])
    var = t([0.5, 2.0, 1.3])
    a = t([0.1, 0.0, 0.9])
    total = gaussian_log_prob(mean, var, a).item()
    parts = sum(
        gaussian_log_prob(mean[i : i + 1], var[i : i + 1], a[i : i + 1]).item()
        for i in range(3)
    )
    assert total == pytest.approx(parts, abs=1e-12)


def test_density_integrates_to_one():
    # Simpson quadrature over [-8 sigma, 8 sigma] around the mean
    mean, var = 0.7, 2.3
    sigma = math.sqrt(var)
    xs = np.linspace(mean - 8 * sigma, mean + 8 * sigma, 4001)
    dens = np.exp(
        gaussian_log_prob(t([mean]), t([var]), t(xs[:, None]).double()).numpy()
    )
    from scipy.integrate import simpson

    assert simpson(dens, x=xs) == pytest.approx(1.0, abs=1e-6)


def test_entropy_closed_form():
    assert gaussian_entropy(t([1.0])).item() == pytest.approx(
        0.5 * (1 + math.log(2 * math.pi)), abs=1e-12
    )
    # d dims with var 1: d times the unit entropy
    assert gaussian_entropy(t([1.0, 1.0, 1.0])).item() == pytest.approx(
        1.5 * (1 + math.log(2 * math.pi)), abs=1e-12
    )


def test_entropy_matches_monte_carlo():
    g = rng(5, "entropy-mc")
    mean = t([0.2, -1.0])
    var = t([0.4, 3.0])
    dist = GaussianDist(mean, var)
    draws = torch.stack([dist.sample(g) for _ in range(20_000)])
    mc = -gaussian_log_prob(mean, var, draws).mean().item()
    assert mc == pytest.approx(gaussian_entropy(var).item(), abs=0.05)


def test_kl_example_and_self():
    # KL(N(0,1) || N(1,1)) = 0.5
    assert gaussian_kl(t([0.0]), t([1.0]), t([1.0]), t([1.0])).item() == pytest.approx(
        0.5, abs=1e-12
    )
    assert gaussian_kl(t([0.3]), t([0.7]), t([0.3]), t([0.7])).item() == 0.0


@given(
    st.floats(-3, 3),
    st.floats(0.05, 5),
    st.floats(-3, 3),
    st.floats(0.05, 5),
)
@settings(max_examples=200, deadline=None)
def test_kl_nonnegative(mp, vp, mq, vq):
    kl = gaussian_kl(t([mp]), t([vp]), t([mq]), t([vq])).item()
    assert kl >= -1e-12


def test_kl_matches_monte_carlo():
    g = rng(11, "kl-mc")
    mp, vp = t([0.5, -0.3]), t([1.2, 0.6])
    mq, vq = t([-0.2, 0.1]), t([0.8, 2.0])
    dist = GaussianDist(mp, vp)
    draws = torch.stack([dist.sample(g) for _ in range(40_000)])
    mc = (
        gaussian_log_prob(mp, vp, draws) - gaussian_log_prob(mq, vq, draws)
    ).mean().item()
    assert mc == pytest.approx(gaussian_kl(mp, vp, mq, vq).item(), abs=0.05)


def test_sample_moments():
    g = rng(3, "moments")
    dist = GaussianDist(t([1.0, -2.0]), t([0.25, 4.0]))
    draws = torch.stack([dist.sample(g) for _ in range(50_000)]).numpy()
    assert np.allclose(draws.mean(axis=0), [1.0, -2.0], atol=0.05)
    assert np.allclose(draws.std(axis=0), [0.5, 2.0], atol=0.05)


def test_sample_deterministic_given_seed():
    dist = GaussianDist(t([0.0]), t([1.0]))
    a = dist.sample(rng(1, "d"))
    b = dist.sample(rng(1, "d"))
    assert torch.equal(a, b)


def test_mode_is_mean():
    dist = GaussianDist(t([0.7, -0.1]), t([2.0, 0.5]))
    assert torch.equal(dist.mode(), dist.mean)

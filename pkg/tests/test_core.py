import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from dynamap.core import (DiagonalGaussian, MotionSequence, MotionSet, Position, Velocity, cart_to_polar,
                          gaussian_kl, gaussian_log_prob, gaussian_sample, polar_to_cart, wrap_angle)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@pytest.mark.parametrize("theta, expected", [
    (0.0, 0.0),
    (math.pi, -math.pi),
    (5 * math.pi / 2, math.pi / 2),
    (-math.pi, -math.pi),
])
def test_wrap_angle_examples(theta, expected):
    assert wrap_angle(theta) == pytest.approx(expected, abs=1e-12)


def test_wrap_angle_rejects_non_finite():
    with pytest.raises(ValueError):
        wrap_angle(float("nan"))
    with pytest.raises(ValueError):
        wrap_angle(np.array([0.0, np.inf]))
    with pytest.raises(ValueError):
        wrap_angle(torch.tensor([float("inf")]))


@given(finite)
def test_wrap_angle_range_and_congruence(theta):
    w = wrap_angle(theta)
    assert -math.pi <= w < math.pi
    k = (theta - w) / (2 * math.pi)
    assert abs(k - round(k)) < 1e-6


@given(finite)
def test_wrap_angle_idempotent(theta):
    w = wrap_angle(theta)
    assert wrap_angle(w) == w


def test_wrap_angle_tensor_matches_numpy():
    x = np.linspace(-20, 20, 1001)
    np.testing.assert_allclose(wrap_angle(torch.tensor(x)).numpy(), wrap_angle(x), atol=1e-12)


def test_velocity_wraps_and_validates():
    assert Velocity(3 * math.pi, 1.0).psi == pytest.approx(-math.pi)
    with pytest.raises(ValueError):
        Velocity(0.0, -0.1)
    with pytest.raises(ValueError):
        Position(float("nan"), 0.0)


@pytest.mark.parametrize("v, expected", [
    (Velocity(0, 1), (1, 0)),
    (Velocity(math.pi / 2, 2), (0, 2)),
    (Velocity(math.pi / 4, math.sqrt(2)), (1, 1)),
])
def test_polar_to_cart(v, expected):
    assert polar_to_cart(v) == pytest.approx(expected, abs=1e-12)


def test_cart_to_polar_examples():
    assert cart_to_polar(1, 0) == Velocity(0, 1)
    assert cart_to_polar(0, 0) == Velocity(0, 0)
    v = cart_to_polar(-1, 0)
    assert v.psi == -math.pi and v.rho == 1


@given(st.floats(-math.pi, math.pi, exclude_max=True), st.floats(1e-9, 1e6))
def test_polar_round_trip(psi, rho):
    back = cart_to_polar(*polar_to_cart(Velocity(psi, rho)))
    assert back.rho == pytest.approx(rho, rel=1e-9)
    assert abs(wrap_angle(back.psi - psi)) < 1e-9 * max(1.0, abs(psi))


def test_motion_set_permutation_and_samples():
    data = np.array([[0, 1, 4.0, 1.0], [2, 3, 0.5, 0.0]])
    s = MotionSet(3, data)
    assert s.data[0, 2] == pytest.approx(4.0 - 2 * math.pi)
    assert len(s.samples) == 2 and s.samples[1].p == Position(2, 3)
    assert MotionSet.from_samples(3, s.samples) == s
    with pytest.raises(ValueError):
        MotionSet(0, [[0, 0, 0, -1]])


def test_motion_sequence_requires_consecutive_steps():
    MotionSequence([MotionSet(0), MotionSet(1)], 0.5)
    with pytest.raises(ValueError):
        MotionSequence([MotionSet(0), MotionSet(2)])


def test_gaussian_requires_positive_variance():
    with pytest.raises(ValueError):
        DiagonalGaussian(torch.zeros(2), torch.tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        DiagonalGaussian(torch.zeros(2), torch.ones(3))


def test_log_prob_examples():
    std1 = DiagonalGaussian(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    assert float(gaussian_log_prob(std1, torch.zeros(1))) == pytest.approx(-0.91894, abs=1e-5)
    assert float(gaussian_log_prob(std1, torch.zeros(1))) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)
    for mu in (-3.0, 0.7, 12.0):
        g = DiagonalGaussian(torch.tensor([mu], dtype=torch.float64), torch.ones(1, dtype=torch.float64))
        want = float(gaussian_log_prob(std1, torch.zeros(1)))
        assert float(gaussian_log_prob(g, torch.tensor([mu]))) == pytest.approx(want)
    std2 = DiagonalGaussian.standard(2, dtype=torch.float64)
    assert float(gaussian_log_prob(std2, torch.zeros(2))) == pytest.approx(-1.83788, abs=1e-5)
    with pytest.raises(ValueError):
        gaussian_log_prob(std2, torch.zeros(3))


@pytest.mark.parametrize("mean, var", [(0.0, 1.0), (1.3, 0.04), (-2.0, 7.5)])
def test_log_prob_integrates_to_one(mean, var):
    g = DiagonalGaussian(torch.tensor([mean], dtype=torch.float64), torch.tensor([var], dtype=torch.float64))
    sd = math.sqrt(var)

    def density(x):
        return math.exp(float(gaussian_log_prob(g, torch.tensor([x], dtype=torch.float64))))

    total, _ = integrate.quad(density, mean - 10 * sd, mean + 10 * sd, epsabs=1e-12, epsrel=1e-12, limit=200)
    assert abs(total - 1.0) < 1e-6


def test_kl_examples():
    std = DiagonalGaussian.standard(1, dtype=torch.float64)
    assert float(gaussian_kl(std, std)) == 0.0
    shifted = DiagonalGaussian(torch.ones(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    assert float(gaussian_kl(shifted, std)) == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_monte_carlo():
    gen = torch.Generator().manual_seed(0)
    q = DiagonalGaussian(torch.tensor([1.0], dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    p = DiagonalGaussian.standard(1, dtype=torch.float64)
    x = gaussian_sample(q, torch.randn(10**6, 1, generator=gen, dtype=torch.float64))
    mc = float((gaussian_log_prob(q, x) - gaussian_log_prob(p, x)).mean())
    assert mc == pytest.approx(0.5, rel=0.01)


def test_kl_additive_over_dimensions():
    q = DiagonalGaussian(torch.tensor([0.3, -1.0], dtype=torch.float64),
                         torch.tensor([0.5, 2.0], dtype=torch.float64))
    p = DiagonalGaussian(torch.tensor([0.0, 0.4], dtype=torch.float64),
                         torch.tensor([1.5, 0.7], dtype=torch.float64))
    parts = sum(float(gaussian_kl(q[i:i + 1], p[i:i + 1])) for i in range(2))
    assert float(gaussian_kl(q, p)) == pytest.approx(parts, rel=1e-12)


def test_kl_nonnegative_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        d = rng.integers(1, 6)
        q = DiagonalGaussian(torch.tensor(rng.normal(size=d)), torch.tensor(rng.uniform(0.01, 5, size=d)))
        p = DiagonalGaussian(torch.tensor(rng.normal(size=d)), torch.tensor(rng.uniform(0.01, 5, size=d)))
        assert float(gaussian_kl(q, p)) > 0
        assert abs(float(gaussian_kl(q, q))) < 1e-12


def test_sample_examples():
    g = DiagonalGaussian(torch.tensor([0.0]), torch.tensor([4.0]))
    assert float(gaussian_sample(g, torch.tensor([1.0]))) == 2.0
    g = DiagonalGaussian(torch.tensor([1.0, -2.0]), torch.tensor([3.0, 0.1]))
    assert torch.equal(gaussian_sample(g, torch.zeros(2)), g.mean)


def test_sample_mean_within_standard_errors():
    gen = torch.Generator().manual_seed(3)
    g = DiagonalGaussian(torch.tensor([0.5, -3.0], dtype=torch.float64),
                         torch.tensor([2.0, 0.25], dtype=torch.float64))
    n = 10**5
    x = gaussian_sample(g, torch.randn(n, 2, generator=gen, dtype=torch.float64))
    se = (g.var / n).sqrt()
    assert bool(((x.mean(0) - g.mean).abs() < 3 * se).all())


def test_sample_gradient_matches_finite_differences():
    torch.manual_seed(0)
    mean = torch.randn(3, dtype=torch.float64, requires_grad=True)
    var = (torch.rand(3, dtype=torch.float64) + 0.5).requires_grad_(True)
    noise = torch.randn(3, dtype=torch.float64)

    def f(mu, v):
        x = gaussian_sample(DiagonalGaussian(mu, v), noise)
        return (x.sin() * x).sum()

    f(mean, var).backward()
    eps = 1e-6
    for param, grad, other in ((mean, mean.grad, "var"), (var, var.grad, "mean")):
        fd = torch.zeros(3, dtype=torch.float64)
        for i in range(3):
            e = torch.zeros(3, dtype=torch.float64)
            e[i] = eps
            with torch.no_grad():
                if other == "var":
                    fd[i] = (f(mean + e, var) - f(mean - e, var)) / (2 * eps)
                else:
                    fd[i] = (f(mean, var + e) - f(mean, var - e)) / (2 * eps)
        assert float((fd - grad).norm() / grad.norm()) < 1e-4

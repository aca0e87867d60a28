import dataclasses

import numpy as np
import pytest

from errors import KernelError
from kernels import KERNELS, gamma1, gamma2, get_kernel, validate_kernel


def test_gamma1_is_constant_inside_and_truncated() -> None:
    k = gamma1(0.1)
    c = 4.0 / (np.pi * 0.1 ** 4)
    x = np.zeros((3, 2))
    y = np.array([[0.05, 0.0], [0.1, 0.0], [0.0, 0.2]])
    assert np.allclose(k.value(x, y), [c, 0.0, 0.0])
    assert not k.has_gradient
    assert np.all(k.smooth_grad_x(x, y) == 0.0)


def test_gamma2_profile() -> None:
    k = gamma2(0.2)
    c = 4.0 / (np.pi * 0.2 ** 4)
    x = np.array([[0.0, 0.0], [0.0, 0.0]])
    y = np.array([[0.0, 0.0], [0.1, 0.0]])
    assert np.allclose(k.value(x, y), [c, c * (1.0 - 0.5 * 0.25)])
    assert k.lower_bound == pytest.approx(0.875 * c)
    assert np.allclose(k.smooth_grad_x(x[1:], y[1:]), -(c / 0.04) * (x[1:] - y[1:]))
    assert np.allclose(k.smooth_grad_y(x[1:], y[1:]), -k.smooth_grad_x(x[1:], y[1:]))


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_registered_kernels_pass_validation(name: str) -> None:
    report = validate_kernel(get_kernel(name, 0.1), samples=1000, seed=0)
    assert report.passed, report.failures()
    assert report.gradient_rel_error <= 1e-5


def test_wrong_gradient_sign_is_detected() -> None:
    good = gamma2(0.1)
    bad = dataclasses.replace(good, grad_phi=lambda z: -good.grad_phi(z))
    report = validate_kernel(bad, seed=1)
    assert not report.passed
    assert "gradient_consistent" in report.failures()
    assert report.gradient_rel_error == pytest.approx(2.0, rel=1e-3)


def test_negative_kernel_fails_nonnegativity() -> None:
    good = gamma1(0.1)
    bad = dataclasses.replace(good, phi=lambda z: -good.phi(z), lower_bound=-good.upper_bound)
    report = validate_kernel(bad, seed=2)
    assert "nonnegative" in report.failures()


def test_kernel_arguments_are_checked() -> None:
    with pytest.raises(KernelError):
        get_kernel("gamma3", 0.1)
    with pytest.raises(KernelError):
        gamma1(0.0)
    with pytest.raises(KernelError):
        gamma2(float("nan"))
    with pytest.raises(ValueError):
        validate_kernel(gamma1(0.1), samples=10)


@pytest.mark.parametrize("kernel, expected", [(gamma1(0.1), 4.0), (gamma2(0.1), 3.0)])
def test_integral_over_horizon_ball(kernel, expected) -> None:
    # 極座標：r 用 Gauss-Legendre，θ 用等距點
    delta = kernel.delta
    nodes, weights = np.polynomial.legendre.leggauss(20)
    r = 0.5 * delta * (nodes + 1.0)
    wr = 0.5 * delta * weights
    theta = np.linspace(0.0, 2.0 * np.pi, 64, endpoint=False)
    z = np.stack([np.outer(r, np.cos(theta)), np.outer(r, np.sin(theta))], axis=-1)
    y = z.reshape(-1, 2)
    values = kernel.value(np.zeros_like(y), y).reshape(r.size, theta.size)
    total = np.sum(wr[:, None] * r[:, None] * values) * (2.0 * np.pi / theta.size)
    assert total == pytest.approx(expected / delta ** 2, rel=1e-10)

from math import factorial

import numpy as np
import pytest

from quadrature import triangle_rule


def _exact_monomial(a: int, b: int) -> float:
    # ∫_ref ξ^a η^b ，再除以參考面積 1/2
    return 2.0 * factorial(a) * factorial(b) / factorial(a + b + 2)


@pytest.mark.parametrize("degree", [1, 2, 5, 7, 10])
def test_rule_is_exact_up_to_its_degree(degree: int) -> None:
    rule = triangle_rule(degree)
    xi, eta = rule.points[:, 0], rule.points[:, 1]
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            assert rule.weights @ (xi ** a * eta ** b) == pytest.approx(_exact_monomial(a, b), rel=1e-12, abs=1e-14)


def test_weights_sum_to_one_and_points_are_inside() -> None:
    for degree in range(0, 9):
        rule = triangle_rule(degree)
        assert rule.weights.sum() == pytest.approx(1.0, rel=1e-14)
        assert np.all(rule.barycentric >= -1e-14)
        assert np.allclose(rule.barycentric.sum(axis=1), 1.0)


def test_rules_are_cached_and_read_only() -> None:
    rule = triangle_rule(5)
    assert triangle_rule(5) is rule
    assert rule.size == 7
    with pytest.raises(ValueError):
        rule.weights[0] = 0.0


def test_negative_degree_is_rejected() -> None:
    with pytest.raises(ValueError):
        triangle_rule(-1)

"""參考三角形 (0,0)-(1,0)-(0,1) 上的積分規則。

權重總和為 1，所以 ∫_T f ≈ |T| · Σ w_q f(x_q)。
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class TriangleRule:
    degree: int
    points: np.ndarray    # (Q, 2) 參考座標 (ξ, η)
    weights: np.ndarray   # (Q,)

    @property
    def barycentric(self) -> np.ndarray:
        """(Q, 3)：P1 基底函數 λ0, λ1, λ2 在積分點的值。"""
        xi, eta = self.points[:, 0], self.points[:, 1]
        return np.column_stack([1.0 - xi - eta, xi, eta])

    @property
    def size(self) -> int:
        return self.weights.size


def _permutations(a, b):
    # 重心座標 (a, a, b) 的三個排列，轉成 (ξ, η)
    return [(a, a), (a, b), (b, a)]


def _dunavant5():
    s = math.sqrt(15.0)
    a1, b1 = (6.0 + s) / 21.0, (9.0 - 2.0 * s) / 21.0
    a2, b2 = (6.0 - s) / 21.0, (9.0 + 2.0 * s) / 21.0
    w1, w2 = (155.0 + s) / 1200.0, (155.0 - s) / 1200.0
    pts = [(1.0 / 3.0, 1.0 / 3.0)] + _permutations(a1, b1) + _permutations(a2, b2)
    wts = [9.0 / 40.0] + [w1] * 3 + [w2] * 3
    return np.array(pts), np.array(wts)


def _collapsed_gauss(degree):
    """Duffy 變換下的 Gauss-Legendre tensor rule，對任意次數都精確。"""
    n = max(1, math.ceil((degree + 2) / 2))
    x, w = np.polynomial.legendre.leggauss(n)
    u, wu = 0.5 * (x + 1.0), 0.5 * w
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    xi = U.ravel()
    eta = (V * (1.0 - U)).ravel()
    # 參考三角形面積 1/2，正規化成總和 1
    weights = (WU * WV * (1.0 - U)).ravel() * 2.0
    return np.column_stack([xi, eta]), weights


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> TriangleRule:
    if degree < 0:
        raise ValueError(f"quadrature degree 必須 >= 0，收到 {degree}")
    if degree <= 1:
        pts, wts = np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([1.0])
    elif degree == 2:
        pts = np.array([[1.0 / 6.0, 1.0 / 6.0], [2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0]])
        wts = np.full(3, 1.0 / 3.0)
    elif degree <= 5:
        pts, wts = _dunavant5()
    else:
        pts, wts = _collapsed_gauss(degree)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return TriangleRule(degree=degree, points=pts, weights=wts)

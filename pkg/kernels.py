"""有界、平移不變、在 δ 截斷的交互作用核 γ(x, y) = φ(x − y)·𝟙[‖x − y‖ < δ]。"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from errors import KernelError

logger = logging.getLogger(__name__)


def _check_delta(delta):
    delta = float(delta)
    if not np.isfinite(delta) or delta <= 0:
        raise KernelError(f"horizon δ 必須是正數，收到 {delta}")
    return delta


@dataclass(frozen=True)
class Kernel:
    """φ 與 ∇φ 都以差向量 z = x − y 表示；∇_x γ = ∇φ(z)、∇_y γ = −∇φ(z)。"""
    name: str
    delta: float
    phi: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    grad_phi: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    lower_bound: float
    epsilon: float
    upper_bound: float
    has_gradient: bool = True

    # --- 以差向量 z 計算（組裝時用）---
    def value_diff(self, z: np.ndarray) -> np.ndarray:
        r2 = np.einsum("...i,...i->...", z, z)
        return np.where(r2 < self.delta ** 2, self.phi(z), 0.0)

    def inside(self, z: np.ndarray) -> np.ndarray:
        return np.einsum("...i,...i->...", z, z) < self.delta ** 2

    # --- 以 (x, y) 計算 ---
    def value(self, x, y) -> np.ndarray:
        return self.value_diff(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))

    def smooth_value(self, x, y) -> np.ndarray:
        return self.phi(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))

    def smooth_grad_x(self, x, y) -> np.ndarray:
        return self.grad_phi(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))

    def smooth_grad_y(self, x, y) -> np.ndarray:
        return -self.grad_phi(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))


def gamma1(delta: float) -> Kernel:
    delta = _check_delta(delta)
    c = 4.0 / (np.pi * delta ** 4)
    return Kernel(
        name="gamma1",
        delta=delta,
        phi=lambda z: np.full(np.shape(z)[:-1], c),
        grad_phi=lambda z: np.zeros(np.shape(z)),
        lower_bound=c,
        epsilon=0.5 * delta,
        upper_bound=c,
        has_gradient=False,
    )


def gamma2(delta: float) -> Kernel:
    delta = _check_delta(delta)
    c = 4.0 / (np.pi * delta ** 4)

    def phi(z):
        return c * (1.0 - 0.5 * np.einsum("...i,...i->...", z, z) / delta ** 2)

    def grad_phi(z):
        return -(c / delta ** 2) * np.asarray(z, dtype=float)

    return Kernel(
        name="gamma2",
        delta=delta,
        phi=phi,
        grad_phi=grad_phi,
        lower_bound=c * (1.0 - 0.5 * 0.25),
        epsilon=0.5 * delta,
        upper_bound=c,
    )


KERNELS: dict[str, Callable[[float], Kernel]] = {"gamma1": gamma1, "gamma2": gamma2}


def get_kernel(name: str, delta: float) -> Kernel:
    try:
        factory = KERNELS[name.strip().lower()]
    except KeyError:
        raise KernelError(f"未知的 kernel：{name!r}（可用 {sorted(KERNELS)}）") from None
    return factory(delta)


@dataclass
class KernelReport:
    nonnegative: bool
    truncated: bool
    lower_bound: bool
    bounded: bool
    symmetric: bool
    translation_invariant: bool
    gradient_consistent: bool
    gradient_rel_error: float
    samples: int

    @property
    def passed(self) -> bool:
        return all([self.nonnegative, self.truncated, self.lower_bound, self.bounded,
                    self.symmetric, self.translation_invariant, self.gradient_consistent])

    def failures(self) -> list[str]:
        names = ["nonnegative", "truncated", "lower_bound", "bounded",
                 "symmetric", "translation_invariant", "gradient_consistent"]
        return [n for n in names if not getattr(self, n)]


def validate_kernel(kernel: Kernel, samples: int = 1000, box: tuple[float, float] = (-0.1, 1.1),
                    seed: Optional[int] = 0, grad_tol: float = 1e-5) -> KernelReport:
    """在 Ω∪I 的外框內隨機抽樣，逐項檢查核函數的條件與解析梯度。"""
    if samples < 100:
        raise ValueError(f"samples 至少 100，收到 {samples}")
    rng = np.random.default_rng(seed)
    d = kernel.delta
    x = rng.uniform(box[0], box[1], size=(samples, 2))
    # 距離抽到 1.5δ，讓截斷內外都有樣本
    r = 1.5 * d * np.sqrt(rng.uniform(size=samples))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=samples)
    y = x + np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    v = kernel.value(x, y)
    tol = 1e-12 * kernel.upper_bound

    nonnegative = bool(np.all(v >= 0.0))
    truncated = bool(np.all(v[r >= d] == 0.0)) and bool(np.all(np.isfinite(v)))
    lower_bound = bool(np.all(v[r <= kernel.epsilon] >= kernel.lower_bound - tol))
    bounded = bool(np.all(np.abs(v) <= kernel.upper_bound + tol))
    symmetric = bool(np.allclose(v, kernel.value(y, x), rtol=1e-12, atol=tol))
    shift = rng.uniform(-1.0, 1.0, size=(samples, 2))
    translation_invariant = bool(np.allclose(v, kernel.value(x + shift, y + shift), rtol=1e-10, atol=1e-10 * kernel.upper_bound))

    # 梯度：‖x−y‖ < 0.9δ 的樣本做中央差分，步長 1e-6·δ
    near_r = 0.9 * d * np.sqrt(rng.uniform(size=samples))
    near_t = rng.uniform(0.0, 2.0 * np.pi, size=samples)
    yn = x + np.column_stack([near_r * np.cos(near_t), near_r * np.sin(near_t)])
    h = 1e-6 * d
    fd = np.empty((samples, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd[:, i] = (kernel.smooth_value(x + e, yn) - kernel.smooth_value(x - e, yn)) / (2.0 * h)
    analytic = kernel.smooth_grad_x(x, yn)
    floor = 1e-8 * kernel.upper_bound / d
    err = np.linalg.norm(analytic - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), floor)
    err_y = np.linalg.norm(kernel.smooth_grad_y(x, yn) + analytic, axis=1) / np.maximum(np.linalg.norm(analytic, axis=1), floor)
    gradient_rel_error = float(max(err.max(), err_y.max()))

    report = KernelReport(
        nonnegative=nonnegative,
        truncated=truncated,
        lower_bound=lower_bound,
        bounded=bounded,
        symmetric=symmetric,
        translation_invariant=translation_invariant,
        gradient_consistent=gradient_rel_error <= grad_tol,
        gradient_rel_error=gradient_rel_error,
        samples=samples,
    )
    if not report.passed:
        logger.warning("kernel %s 檢查未通過：%s", kernel.name, report.failures())
    return report

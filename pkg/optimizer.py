"""形狀最佳化外迴圈：L-BFGS 方向、Armijo 回溯、停止條件、歷史紀錄與 checkpoint/restart。"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd

from errors import ConfigError, InterfaceMismatch, InvalidDeformation, StepFailure
from mesh_geometry import LabeledMesh, deform, derive_interface, interface_hausdorff, mesh_quality
from shape_calculus import (
    ElasticityMetric,
    ShapeEvaluation,
    ShapeProblem,
    riesz_gradient,
    solve_mu,
    vector_l2_norm,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ltn-checkpoint"
CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ["iteration", "objective", "gradient_norm", "slope", "alpha", "direction",
                   "trials", "min_angle", "min_area_ratio", "status"]

Inner = Callable[[np.ndarray, np.ndarray], float]


def euclidean_inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a, b))


@dataclass
class OptConfig:
    nu: float = 1e-3
    tol: float = 5e-5
    maxiter: int = 25
    armijo_c: float = 1e-4
    tau: float = 0.5
    alpha_max: float = 1.0
    alpha_fraction: float = 0.5
    alpha_min: float = 1e-12
    memory: int = 5
    mu_min: float = 0.0
    mu_max: float = 1.0
    min_angle: float = 10.0

    def validate(self) -> "OptConfig":
        checks = [
            (self.tol > 0, "optimization.tol 必須 > 0"),
            (0 < self.tau < 1, "optimization.tau 必須在 (0, 1)"),
            (0 < self.armijo_c < 1, "optimization.armijo_c 必須在 (0, 1)"),
            (self.memory >= 0, "optimization.memory 必須 >= 0"),
            (self.maxiter >= 0, "optimization.maxiter 必須 >= 0"),
            (self.nu >= 0, "optimization.nu 必須 >= 0"),
            (self.alpha_max > 0 and self.alpha_fraction > 0, "optimization.alpha_max / alpha_fraction 必須 > 0"),
            (self.mu_max > 0 and self.mu_min <= self.mu_max, "需要 0 < mu_max 且 mu_min <= mu_max"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(f"{message}（目前設定 {asdict(self)}）")
        return self


# === L-BFGS ===
class LbfgsMemory:
    """最多 size 組 (s, y)；只收 ⟨s, y⟩ > 0 的配對。"""

    def __init__(self, size: int):
        self.size = int(size)
        self.pairs: deque = deque(maxlen=max(self.size, 1))

    def __len__(self) -> int:
        return len(self.pairs) if self.size > 0 else 0

    def push(self, s: np.ndarray, y: np.ndarray, inner: Inner = euclidean_inner) -> bool:
        if self.size == 0:
            return False
        sy = inner(s, y)
        if not (np.isfinite(sy) and sy > 0.0):
            logger.info("曲率條件不成立（⟨s,y⟩=%.3e），捨棄這組配對", sy)
            return False
        self.pairs.append((np.array(s, dtype=float), np.array(y, dtype=float), float(sy)))
        return True

    def clear(self):
        self.pairs.clear()


def lbfgs_direction(memory: LbfgsMemory, gradient: np.ndarray, inner: Inner = euclidean_inner) -> tuple[np.ndarray, str]:
    """two-loop recursion；回傳 (方向, 類型)，類型為 'lbfgs' 或 'steepest'。"""
    g = np.asarray(gradient, dtype=float)
    if len(memory) == 0:
        return -g, "steepest"
    q = g.copy()
    alphas = []
    for s, y, sy in reversed(memory.pairs):
        a = inner(s, q) / sy
        q -= a * y
        alphas.append(a)
    s, y, sy = memory.pairs[-1]
    r = (sy / inner(y, y)) * q
    for (s, y, sy), a in zip(memory.pairs, reversed(alphas)):
        b = inner(y, r) / sy
        r += (a - b) * s
    d = -r
    if not (np.all(np.isfinite(d)) and inner(d, g) < 0.0):
        logger.info("L-BFGS 方向不是下降方向，改用 −∇J")
        return -g, "steepest"
    return d, "lbfgs"


# === line search ===
@dataclass
class LineSearchResult:
    alpha: float
    value: float
    trials: int
    payload: object = None


def backtracking(phi: Callable[[float], tuple[float, object]], phi0: float, slope: float, alpha0: float,
                 c: float = 1e-4, tau: float = 0.5, alpha_min: float = 1e-12) -> LineSearchResult:
    """Armijo：接受第一個 φ(α) ≤ φ0 + c·α·slope 的 α = α0·τ^j；φ 丟 InvalidDeformation 也視為拒絕。"""
    if not slope < 0:
        raise ValueError(f"需要下降方向（slope < 0），收到 {slope}")
    alpha, trials = float(alpha0), 0
    while alpha >= alpha_min:
        trials += 1
        try:
            value, payload = phi(alpha)
        except InvalidDeformation as exc:
            logger.debug("α=%.3e 的網格無效：%s", alpha, exc)
            alpha *= tau
            continue
        if value <= phi0 + c * alpha * slope:
            return LineSearchResult(alpha, float(value), trials, payload)
        logger.debug("α=%.3e 未滿足 Armijo：%.10e > %.10e", alpha, value, phi0 + c * alpha * slope)
        alpha *= tau
    raise StepFailure(f"步長低於 {alpha_min:.0e} 仍無法接受（{trials} 次嘗試）")


def initial_step(mesh: LabeledMesh, direction: np.ndarray, config: OptConfig) -> float:
    """α0 = min(α_max, fraction·h_min/‖U‖∞)。"""
    umax = float(np.abs(direction).max()) if direction.size else 0.0
    if umax == 0.0:
        return config.alpha_max
    return min(config.alpha_max, config.alpha_fraction * mesh.h_min / umax)


def line_search(problem: ShapeProblem, mesh: LabeledMesh, direction: np.ndarray, objective: float,
                slope: float, config: OptConfig) -> LineSearchResult:
    """每個試驗步都在變形後的網格上重新解 state；payload 為 ShapeEvaluation。"""
    def phi(alpha: float):
        ev = problem.evaluate(deform(mesh, direction, alpha))
        return ev.objective, ev

    return backtracking(phi, objective, slope, initial_step(mesh, direction, config),
                        config.armijo_c, config.tau, config.alpha_min)


# === 狀態、歷史 ===
class OptHistory:
    def __init__(self, rows: Optional[list[dict]] = None):
        self.rows: list[dict] = list(rows or [])

    def append(self, **row):
        self.rows.append({k: row.get(k) for k in HISTORY_COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=HISTORY_COLUMNS)

    def accepted(self) -> pd.DataFrame:
        frame = self.to_frame()
        return frame[frame["status"] == "accepted"]

    def is_monotone(self) -> bool:
        obj = self.to_frame()["objective"].astype(float).to_numpy()
        return bool(np.all(np.diff(obj) <= 0.0))

    def satisfies_armijo(self, c: float) -> bool:
        frame = self.to_frame()
        obj = frame["objective"].astype(float).to_numpy()
        for k in range(len(frame) - 1):
            if frame["status"].iloc[k] != "accepted":
                continue
            bound = obj[k] + c * float(frame["alpha"].iloc[k]) * float(frame["slope"].iloc[k])
            if obj[k + 1] > bound:
                return False
        return True


@dataclass
class OptState:
    mesh: LabeledMesh
    iteration: int = 0
    memory: LbfgsMemory = field(default_factory=lambda: LbfgsMemory(5))
    history: OptHistory = field(default_factory=OptHistory)
    last_step: Optional[np.ndarray] = None
    last_gradient: Optional[np.ndarray] = None
    seed: Optional[int] = None


@dataclass
class OptResult:
    mesh: LabeledMesh
    history: OptHistory
    status: str
    state: OptState
    remesh_recommended: bool = False
    gradient: Optional[np.ndarray] = None


def optimize(initial_mesh: LabeledMesh, problem: ShapeProblem, config: OptConfig,
             state: Optional[OptState] = None, checkpoint_path: Optional[Union[str, Path]] = None,
             callback: Optional[Callable[[OptState, ShapeEvaluation, np.ndarray], None]] = None) -> OptResult:
    """梯度 → 方向 → line search → 變形，直到 ‖∇J‖_{L²} < tol、達到 maxiter 或 StepFailure。"""
    config.validate()
    if state is None:
        state = OptState(mesh=initial_mesh, memory=LbfgsMemory(config.memory))
    status, remesh, grad = "maxiter", False, None
    ev: Optional[ShapeEvaluation] = None
    while state.iteration < config.maxiter:
        mesh = state.mesh
        if ev is None:
            ev = problem.evaluate(mesh)
        derivative, _ = problem.derivative(ev)
        mu = solve_mu(mesh, config.mu_min, config.mu_max)
        metric = ElasticityMetric(mesh, mu)
        grad = riesz_gradient(derivative, mesh, mu, metric)
        gnorm = vector_l2_norm(mesh, grad)
        quality = mesh_quality(mesh)
        if quality.needs_remesh(config.min_angle):
            remesh = True
            logger.warning("第 %d 次：最小角 %.2f° < %.1f°，建議重新網格化", state.iteration, quality.min_angle, config.min_angle)
        if state.last_step is not None and state.last_gradient is not None:
            state.memory.push(state.last_step, grad - state.last_gradient, metric.inner)
        row = dict(iteration=state.iteration, objective=ev.objective, gradient_norm=gnorm,
                   min_angle=quality.min_angle, min_area_ratio=quality.min_area_ratio)
        logger.info("第 %d 次：J=%.10e ‖∇J‖=%.3e", state.iteration, ev.objective, gnorm)
        if callback is not None:
            callback(state, ev, grad)
        if gnorm < config.tol:
            state.history.append(**row, slope=0.0, alpha=0.0, direction="none", trials=0, status="converged")
            status = "converged"
            break

        direction, kind = lbfgs_direction(state.memory, grad, metric.inner)
        slope = derivative.apply(direction)
        if not slope < 0:
            direction, kind = -grad, "steepest"
            slope = derivative.apply(direction)
        try:
            ls = line_search(problem, mesh, direction, ev.objective, slope, config)
        except StepFailure as exc:
            logger.warning("line search 失敗：%s；建議重新網格化", exc)
            state.history.append(**row, slope=slope, alpha=0.0, direction=kind, trials=0, status="step_failure")
            status, remesh = "step_failure", True
            break
        state.history.append(**row, slope=slope, alpha=ls.alpha, direction=kind, trials=ls.trials, status="accepted")
        state.last_step = ls.alpha * direction
        state.last_gradient = grad
        ev = ls.payload
        state.mesh = ev.mesh
        state.iteration += 1
        if checkpoint_path is not None:
            save_checkpoint(state, checkpoint_path)
    else:
        if config.maxiter > 0 and ev is not None:
            quality = mesh_quality(state.mesh)
            state.history.append(iteration=state.iteration, objective=ev.objective, gradient_norm=float("nan"),
                                 slope=0.0, alpha=0.0, direction="none", trials=0,
                                 min_angle=quality.min_angle, min_area_ratio=quality.min_area_ratio, status="maxiter")
    logger.info("最佳化結束：%s（%d 次迭代）", status, state.iteration)
    return OptResult(state.mesh, state.history, status, state, remesh, grad)


# === checkpoint ===
def _mesh_to_dict(mesh):
    return {"vertices": mesh.vertices.tolist(), "triangles": mesh.triangles.tolist(), "labels": mesh.labels.tolist()}


def _mesh_from_dict(data):
    return LabeledMesh(np.array(data["vertices"], dtype=float), np.array(data["triangles"]), np.array(data["labels"]))


def _json_value(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def save_checkpoint(state: OptState, path: Union[str, Path]) -> Path:
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "seed": state.seed,
        "mesh_hash": state.mesh.hash,
        "mesh": _mesh_to_dict(state.mesh),
        "history": [{k: _json_value(v) for k, v in row.items()} for row in state.history.rows],
        "memory": {
            "size": state.memory.size,
            "pairs": [{"s": s.tolist(), "y": y.tolist(), "sy": sy} for s, y, sy in state.memory.pairs],
        },
        "last_step": None if state.last_step is None else state.last_step.tolist(),
        "last_gradient": None if state.last_gradient is None else state.last_gradient.tolist(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    tmp.replace(path)
    return path


def _optional_array(value):
    return None if value is None else np.array(value, dtype=float)


def load_checkpoint(path: Union[str, Path]) -> OptState:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"無法讀取 checkpoint {path}：{exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path} 不是支援的 checkpoint（format={doc.get('format')}, version={doc.get('version')}）")
    mem = LbfgsMemory(doc["memory"]["size"])
    for pair in doc["memory"]["pairs"]:
        mem.pairs.append((np.array(pair["s"]), np.array(pair["y"]), float(pair["sy"])))
    return OptState(
        mesh=_mesh_from_dict(doc["mesh"]),
        iteration=int(doc["iteration"]),
        memory=mem,
        history=OptHistory(doc["history"]),
        last_step=_optional_array(doc.get("last_step")),
        last_gradient=_optional_array(doc.get("last_gradient")),
        seed=doc.get("seed"),
    )


def restart(checkpoint_path: Union[str, Path], new_mesh: LabeledMesh) -> OptState:
    """換到新網格繼續：Γ 的 Hausdorff 距離須 ≤ 2·最大介面邊長；網格不同時清空 L-BFGS 記憶。"""
    state = load_checkpoint(checkpoint_path)
    old_gamma, new_gamma = derive_interface(state.mesh), derive_interface(new_mesh)
    distance = interface_hausdorff(old_gamma, new_gamma)
    limit = 2.0 * max(float(old_gamma.lengths.max()), float(new_gamma.lengths.max()))
    if distance > limit:
        raise InterfaceMismatch(f"新網格的介面與 checkpoint 相距 {distance:.4e} > {limit:.4e}")
    if new_mesh.hash != state.mesh.hash:
        state.memory.clear()
        state.last_step = None
        state.last_gradient = None
        logger.info("重新網格化後繼續（Hausdorff %.3e），L-BFGS 記憶已清空", distance)
    state.mesh = new_mesh
    return state

"""目標函數、形狀導數（五組項）、介面歸零、μ 場與彈性 Riesz 梯度。"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse import linalg as spla

from assembly_local import (
    DEFAULT_DEGREE,
    Forcing,
    ScalarField,
    TripletAccumulator,
    assemble_mass,
    element_mass,
    element_stiffness,
    quadrature_points,
)
from assembly_nonlocal import DEFAULT_PAIR_DEGREE, assemble_nl_shape_derivative
from errors import SolverError
from kernels import Kernel
from ltn_solver import (
    SOLVER_METHODS,
    SOLVER_TOL,
    BrokenField,
    LtNSystem,
    assemble_monolithic,
    solve_adjoint,
    solve_state,
    tracking_error,
)
from mesh_geometry import InterfaceCurve, Label, LabeledMesh, deform, derive_interface, interpolate
from quadrature import triangle_rule

logger = logging.getLogger(__name__)


# === 目標函數 ===
def tracking_value(u: BrokenField, mesh: LabeledMesh, ubar: np.ndarray,
                   mass: Optional[sparse.spmatrix] = None) -> float:
    """½∫_Ω (u − ū)² dx（兩側各自在所屬三角形上積分）。"""
    if mass is None:
        mass = assemble_mass(mesh, (Label.LOCAL, Label.NONLOCAL), u.dofmap)
    e = tracking_error(u, ubar)
    return float(0.5 * e @ (mass @ e))


def eval_objective(u: BrokenField, mesh: LabeledMesh, ubar: np.ndarray, nu: float,
                   interface: Optional[InterfaceCurve] = None, mass: Optional[sparse.spmatrix] = None) -> float:
    if interface is None:
        interface = derive_interface(mesh)
    return tracking_value(u, mesh, ubar, mass) + nu * interface.length


# === 形狀導數各項，皆回傳 (n_vertices, 2)：對基底 V = e_c λ_k 的值 ===
def _scatter(mesh, tri, local):
    out = np.zeros((mesh.n_vertices, 2))
    np.add.at(out, mesh.triangles[tri], local)
    return out


def shape_derivative_tracking(u: BrokenField, ubar: np.ndarray, grad_ubar: np.ndarray,
                              mesh: LabeledMesh) -> np.ndarray:
    """∫ −(u − ū) ∇ū·V + ½(u − ū)² div V；∇ū·V 取節點值 ∇ū(x_i)·V_i 的 P1 內插。"""
    tri = mesh.select(Label.LOCAL, Label.NONLOCAL)
    e = tracking_error(u, ubar)[u.dofmap.element_indices[tri]]
    Me = np.einsum("kij,kj->ki", element_mass(mesh, tri), e)
    quad = 0.5 * np.einsum("ki,ki->k", e, Me)
    local = quad[:, None, None] * mesh.basis_gradients[tri]
    local -= Me[:, :, None] * np.asarray(grad_ubar)[mesh.triangles[tri]]
    return _scatter(mesh, tri, local)


def shape_derivative_perimeter(interface: InterfaceCurve, mesh: LabeledMesh, nu: float) -> np.ndarray:
    """ν ∫_Γ div V − nᵀ∇V n ds，邊中點積分，∇V 取兩側三角形平均。"""
    out = np.zeros((mesh.n_vertices, 2))
    n = interface.normals
    for side in range(2):
        tri = interface.adjacent[:, side]
        G = mesh.basis_gradients[tri]                       # (k, 3, 2)
        normal_part = np.einsum("kic,kc->ki", G, n)[:, :, None] * n[:, None, :]
        local = 0.5 * nu * interface.lengths[:, None, None] * (G - normal_part)
        np.add.at(out, mesh.triangles[tri], local)
    return out


def shape_derivative_force(v: BrokenField, forcing: Forcing, mesh: LabeledMesh,
                           degree: int = DEFAULT_DEGREE) -> np.ndarray:
    """∫_Ω (∇f·V) v + f v div V（各子區域用自己的 f）。"""
    rule = triangle_rule(degree)
    phi = rule.barycentric
    out = np.zeros((mesh.n_vertices, 2))
    side = v.side_values()
    for label in (Label.LOCAL, Label.NONLOCAL):
        tri = mesh.select(label)
        f = forcing.for_label(label)
        if tri.size == 0 or f.is_zero:
            continue
        xq = quadrature_points(mesh, rule, tri)
        fq, gq = f(xq), f.gradient(xq)
        vq = side[tri] @ phi.T
        area = mesh.areas[tri]
        grad_part = np.einsum("q,kqc,qi,kq->kic", rule.weights, gq, phi, vq)
        div_part = np.einsum("q,kq,kq->k", rule.weights, fq, vq)[:, None, None] * mesh.basis_gradients[tri]
        out += _scatter(mesh, tri, area[:, None, None] * (grad_part + div_part))
    return out


def shape_derivative_local(u: BrokenField, v: BrokenField, mesh: LabeledMesh) -> np.ndarray:
    """Ω_l 上 −((∇V + ∇Vᵀ)∇u, ∇v) + (∇u, ∇v) div V，P1 下每個三角形都是常數。"""
    tri = mesh.select(Label.LOCAL)
    G = mesh.basis_gradients[tri]
    gu = np.einsum("ki,kic->kc", u.side_values()[tri], G)
    gv = np.einsum("ki,kic->kc", v.side_values()[tri], G)
    Gu = np.einsum("kic,kc->ki", G, gu)
    Gv = np.einsum("kic,kc->ki", G, gv)
    local = -(Gu[:, :, None] * gv[:, None, :] + Gv[:, :, None] * gu[:, None, :])
    local += np.einsum("kc,kc->k", gu, gv)[:, None, None] * G
    return _scatter(mesh, tri, mesh.areas[tri][:, None, None] * local)


def shape_derivative_nonlocal(u: BrokenField, v: BrokenField, mesh: LabeledMesh, kernel: Kernel,
                              pairs: np.ndarray, pair_degree: int = DEFAULT_PAIR_DEGREE) -> np.ndarray:
    return assemble_nl_shape_derivative(mesh, kernel, u.side_values(), v.side_values(), pairs, pair_degree)


# === 組合與歸零 ===
def interface_patch_mask(mesh: LabeledMesh) -> np.ndarray:
    """保留的頂點：patch 中有三角形碰到 Γ，且不在 ∂Ω 或外層。"""
    on_gamma = mesh.vertex_flags.on_interface
    touches = on_gamma[mesh.triangles].any(axis=1)
    keep = np.zeros(mesh.n_vertices, dtype=bool)
    keep[mesh.triangles[touches].ravel()] = True
    return keep & ~mesh.fixed_vertices


@dataclass
class ShapeDerivativeVector:
    values: np.ndarray                 # (n, 2)
    mask: np.ndarray                   # (n,) True = 保留
    components: dict = field(default_factory=dict, repr=False)

    def zeroed(self) -> "ShapeDerivativeVector":
        return ShapeDerivativeVector(np.where(self.mask[:, None], self.values, 0.0), self.mask, self.components)

    def apply(self, direction: np.ndarray) -> float:
        """D[V] = Σ_i c_i·D[V_i]。"""
        return float(np.sum(self.values * np.asarray(direction)))


def assemble_full_shape_derivative(u: BrokenField, v: BrokenField, mesh: LabeledMesh, kernel: Kernel,
                                   ubar: np.ndarray, grad_ubar: np.ndarray, forcing: Forcing, nu: float,
                                   pairs: np.ndarray, interface: Optional[InterfaceCurve] = None,
                                   degree: int = DEFAULT_DEGREE, pair_degree: int = DEFAULT_PAIR_DEGREE,
                                   zero_off_interface: bool = True) -> ShapeDerivativeVector:
    if interface is None:
        interface = derive_interface(mesh)
    parts = {
        "tracking": shape_derivative_tracking(u, ubar, grad_ubar, mesh),
        "perimeter": shape_derivative_perimeter(interface, mesh, nu),
        "local": shape_derivative_local(u, v, mesh),
        "nonlocal": shape_derivative_nonlocal(u, v, mesh, kernel, pairs, pair_degree),
        "force": -shape_derivative_force(v, forcing, mesh, degree),
    }
    total = sum(parts.values())
    # V 在 ∂Ω 與外層恆為 0
    total[mesh.fixed_vertices] = 0.0
    mask = interface_patch_mask(mesh) if zero_off_interface else ~mesh.fixed_vertices
    out = ShapeDerivativeVector(total, mask, parts)
    return out.zeroed()


# === μ 場與彈性內積 ===
@dataclass
class MuField:
    values: np.ndarray
    mu_min: float
    mu_max: float


def _omega_stiffness(mesh):
    tri = mesh.select(Label.LOCAL, Label.NONLOCAL)
    acc = TripletAccumulator((mesh.n_vertices, mesh.n_vertices))
    acc.add_blocks(mesh.triangles[tri], mesh.triangles[tri], element_stiffness(mesh, tri))
    return acc.to_csr()


def solve_mu(mesh: LabeledMesh, mu_min: float = 0.0, mu_max: float = 1.0) -> MuField:
    """Δμ = 0 於 Ω，∂Ω 上 μ_min，Γ 上 μ_max（外層頂點也固定為 μ_min）。"""
    flags = mesh.vertex_flags
    if not flags.on_interface.any():
        raise ValueError("solve_mu 需要非空的介面 Γ")
    mu = np.full(mesh.n_vertices, float(mu_min))
    fixed = mesh.fixed_vertices | flags.on_interface
    mu[flags.on_interface] = mu_max
    free = np.flatnonzero(~fixed)
    if free.size:
        K = _omega_stiffness(mesh)
        fixed_ids = np.flatnonzero(fixed)
        rhs = -(K[free][:, fixed_ids] @ mu[fixed_ids])
        sol = spla.spsolve(K[free][:, free].tocsc(), rhs)
        if not np.all(np.isfinite(sol)):
            raise SolverError("μ 場的 Laplace 系統求解失敗")
        mu[free] = sol
    return MuField(mu, float(mu_min), float(mu_max))


def _elasticity_blocks(mesh, tri, mu):
    """(k, 6, 6)：|T|·μ̄·Bᵀ diag(2,2,1) B，DOF 順序 [u0x, u0y, u1x, u1y, u2x, u2y]。"""
    G = mesh.basis_gradients[tri]
    B = np.zeros((tri.size, 3, 6))
    B[:, 0, 0::2] = G[:, :, 0]
    B[:, 1, 1::2] = G[:, :, 1]
    B[:, 2, 0::2] = G[:, :, 1]
    B[:, 2, 1::2] = G[:, :, 0]
    D = np.diag([2.0, 2.0, 1.0])
    mu_bar = mu[mesh.triangles[tri]].mean(axis=1)
    return (mesh.areas[tri] * mu_bar)[:, None, None] * np.einsum("kai,ab,kbj->kij", B, D, B)


class ElasticityMetric:
    """b_Γ(U, V) = ∫ 2μ ε(U):ε(V)（λ = 0），U = 0 於 ∂Ω 與外層。"""

    def __init__(self, mesh: LabeledMesh, mu: MuField):
        if mu.mu_max <= 0:
            raise ValueError(f"μ_max 必須 > 0，收到 {mu.mu_max}")
        tri = mesh.select(Label.LOCAL, Label.NONLOCAL)
        dofs = np.stack([2 * mesh.triangles[tri], 2 * mesh.triangles[tri] + 1], axis=2).reshape(-1, 6)
        acc = TripletAccumulator((2 * mesh.n_vertices, 2 * mesh.n_vertices))
        acc.add_blocks(dofs, dofs, _elasticity_blocks(mesh, tri, mu.values))
        free_vertices = np.flatnonzero(~mesh.fixed_vertices)
        self.mesh = mesh
        self.free = np.stack([2 * free_vertices, 2 * free_vertices + 1], axis=1).ravel()
        self.full = acc.to_csr()
        self.matrix = self.full[self.free][:, self.free].tocsc()
        self._solve = spla.factorized(self.matrix) if self.free.size else None

    def _flat(self, field_):
        return np.asarray(field_, dtype=float).reshape(-1)[self.free]

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(self._flat(a) @ (self.matrix @ self._flat(b)))

    def apply(self, field_: np.ndarray) -> np.ndarray:
        out = np.zeros(2 * self.mesh.n_vertices)
        out[self.free] = self.matrix @ self._flat(field_)
        return out.reshape(-1, 2)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        out = np.zeros(2 * self.mesh.n_vertices)
        if self._solve is not None:
            out[self.free] = self._solve(self._flat(rhs))
        return out.reshape(-1, 2)


def riesz_gradient(derivative: ShapeDerivativeVector, mesh: LabeledMesh, mu: MuField,
                   metric: Optional[ElasticityMetric] = None) -> np.ndarray:
    metric = ElasticityMetric(mesh, mu) if metric is None else metric
    grad = metric.solve(derivative.values)
    res = metric.apply(grad).reshape(-1)[metric.free] - derivative.values.reshape(-1)[metric.free]
    scale = max(float(np.linalg.norm(derivative.values)), np.finfo(float).tiny)
    if np.linalg.norm(res) > 1e-10 * scale:
        raise SolverError(f"Riesz 系統殘差過大：{np.linalg.norm(res):.3e}")
    return grad


def vector_l2_norm(mesh: LabeledMesh, field_: np.ndarray, mass: Optional[sparse.spmatrix] = None) -> float:
    """‖V‖_{L²(Ω)}，連續 P1 質量矩陣。"""
    if mass is None:
        mass = assemble_mass(mesh, (Label.LOCAL, Label.NONLOCAL))
    f = np.asarray(field_, dtype=float)
    return float(np.sqrt(max(sum(f[:, c] @ (mass @ f[:, c]) for c in range(2)), 0.0)))


# === 問題封裝：給 optimizer 與導數檢查用 ===
@dataclass
class DataField:
    """固定資料網格上的連續 P1 ū。"""
    mesh: LabeledMesh
    values: np.ndarray


@dataclass
class ShapeEvaluation:
    mesh: LabeledMesh
    system: LtNSystem
    state: BrokenField
    ubar: np.ndarray
    grad_ubar: np.ndarray
    interface: InterfaceCurve
    objective: float


@dataclass
class ShapeProblem:
    data: DataField
    kernel: Kernel
    forcing: Forcing
    nu: float = 1e-3
    volume_constraint: Optional[ScalarField] = None
    degree: int = DEFAULT_DEGREE
    pair_degree: int = DEFAULT_PAIR_DEGREE
    solver_methods: tuple = SOLVER_METHODS
    solver_tol: float = SOLVER_TOL
    data_reach: Optional[float] = None

    def evaluate(self, mesh: LabeledMesh, pairs=None, indicator_vertices=None) -> ShapeEvaluation:
        """在 mesh 上解 state 並計算 J^red；pairs 與 indicator_vertices 直接交給 assemble_monolithic。"""
        interface = derive_interface(mesh)
        system = assemble_monolithic(mesh, self.kernel, self.forcing, volume_constraint=self.volume_constraint,
                                     degree=self.degree, pair_degree=self.pair_degree, pairs=pairs,
                                     methods=self.solver_methods, tol=self.solver_tol,
                                     indicator_vertices=indicator_vertices)
        u = solve_state(system)
        reach = self.kernel.delta if self.data_reach is None else self.data_reach
        ubar, grad = interpolate(self.data.mesh, self.data.values, mesh, max_distance=reach, with_gradient=True)
        J = eval_objective(u, mesh, ubar, self.nu, interface, system.omega_mass)
        return ShapeEvaluation(mesh, system, u, ubar, grad, interface, J)

    def objective(self, mesh: LabeledMesh) -> float:
        return self.evaluate(mesh).objective

    def derivative(self, ev: ShapeEvaluation, zero_off_interface: bool = True):
        """回傳 (ShapeDerivativeVector, adjoint)。"""
        v = solve_adjoint(ev.system, ev.state, ev.ubar)
        d = assemble_full_shape_derivative(ev.state, v, ev.mesh, self.kernel, ev.ubar, ev.grad_ubar,
                                           self.forcing, self.nu, ev.system.pairs, ev.interface,
                                           self.degree, self.pair_degree, zero_off_interface)
        return d, v


# === 有限差分檢查 ===
def random_interface_field(mesh: LabeledMesh, rng: np.random.Generator, n_bumps: int = 3,
                           radius: Optional[float] = None, amplitude: float = 1.0) -> np.ndarray:
    """Γ 附近的平滑向量場：以 Γ 頂點為中心的 (1 − s²)² bump 疊加，再限制到保留頂點。"""
    interface = derive_interface(mesh)
    if radius is None:
        radius = 3.0 * float(interface.lengths.mean())
    centers = mesh.vertices[rng.choice(interface.vertex_ids, size=n_bumps)]
    coeff = rng.normal(size=(n_bumps, 2)) * amplitude
    s = np.linalg.norm(mesh.vertices[:, None, :] - centers[None], axis=2) / radius
    bump = np.where(s < 1.0, (1.0 - s ** 2) ** 2, 0.0)
    field_ = bump @ coeff
    field_[~interface_patch_mask(mesh)] = 0.0
    return field_


def finite_difference_check(problem: ShapeProblem, mesh: LabeledMesh, fields: Sequence[np.ndarray],
                            steps: Iterable[float] = (1e-3, 1e-4, 1e-5)) -> pd.DataFrame:
    """比較 D J[V] 與 (J(Γ_t) − J(Γ))/t；每個 (V, t) 一列。

    J(Γ_t) 沿用參考網格的配對與截斷指標，和導數略去指標分佈項的做法一致。
    """
    ev = problem.evaluate(mesh)
    derivative, _ = problem.derivative(ev)
    rows = []
    for k, V in enumerate(fields):
        V = np.where(derivative.mask[:, None], V, 0.0)
        d = derivative.apply(V)
        for t in steps:
            moved = deform(mesh, V, t)
            Jt = problem.evaluate(moved, pairs=ev.system.pairs, indicator_vertices=mesh.vertices).objective
            quotient = (Jt - ev.objective) / t
            rel = abs(d - quotient) / max(abs(d), np.finfo(float).tiny)
            rows.append({"field": k, "t": t, "derivative": d, "quotient": quotient, "rel_error": rel})
            logger.info("FD 檢查 V%d t=%.0e：D=%.6e ΔJ/t=%.6e 相對誤差 %.2e", k, t, d, quotient, rel)
    return pd.DataFrame(rows, columns=["field", "t", "derivative", "quotient", "rel_error"])

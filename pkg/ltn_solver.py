"""LtN 耦合系統：組裝、state/adjoint 求解、Schwarz 迭代與能量泛函。"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy import sparse, stats
from scipy.sparse import linalg as spla

from assembly_local import (
    DEFAULT_DEGREE,
    DofMap,
    Forcing,
    ScalarField,
    SparseSystem,
    assemble_laplace,
    assemble_load,
    assemble_mass,
)
from assembly_nonlocal import DEFAULT_PAIR_DEGREE, NonlocalBlocks, assemble_nonlocal_blocks
from errors import SolverError
from kernels import Kernel
from mesh_geometry import Label, LabeledMesh, interaction_pairs, locate

logger = logging.getLogger(__name__)

SOLVER_TOL = 1e-10
SOLVER_METHODS = ("direct", "cg")


@dataclass
class BrokenField:
    """broken 空間 H(Γ) 的 P1 函數：完整編號下的係數（約束項為給定值）。"""
    dofmap: DofMap
    values: np.ndarray

    @classmethod
    def from_free(cls, dofmap: DofMap, free: np.ndarray, constrained: Optional[np.ndarray] = None) -> "BrokenField":
        values = np.zeros(dofmap.n_total)
        values[:dofmap.n_free] = free
        if constrained is not None:
            values[dofmap.n_free:] = constrained
        return cls(dofmap, values)

    @property
    def free(self) -> np.ndarray:
        return self.values[:self.dofmap.n_free]

    @property
    def constrained(self) -> np.ndarray:
        return self.values[self.dofmap.n_free:]

    def _nodal(self, index):
        out = np.full(self.dofmap.n_vertices, np.nan)
        has = index >= 0
        out[has] = self.values[index[has]]
        return out

    def local_nodal(self) -> np.ndarray:
        """u_l 的頂點值，不在 local 側的頂點為 NaN。"""
        return self._nodal(self.dofmap.local_index)

    def nonlocal_nodal(self) -> np.ndarray:
        return self._nodal(self.dofmap.nonlocal_index)

    def side_values(self) -> np.ndarray:
        """(m, 3)：每個三角形在所屬側的節點值。"""
        return self.values[self.dofmap.element_indices]

    def evaluate(self, mesh: LabeledMesh, points: np.ndarray) -> np.ndarray:
        loc = locate(mesh, points)
        return np.einsum("ni,ni->n", loc.barycentric, self.side_values()[loc.triangles])

    def to_continuous(self) -> np.ndarray:
        """投影成連續 P1：Γ 上取兩側平均。"""
        ul, unl = self.local_nodal(), self.nonlocal_nodal()
        both = ~np.isnan(ul) & ~np.isnan(unl)
        out = np.where(np.isnan(ul), unl, ul)
        out[both] = 0.5 * (ul[both] + unl[both])
        return np.nan_to_num(out, nan=0.0)


@dataclass
class LtNSystem(SparseSystem):
    """單一形狀上的 A^LtN 系統；state 與 adjoint 共用同一個分解。"""
    mesh: LabeledMesh = None
    kernel: Kernel = None
    forcing: Forcing = None
    pairs: np.ndarray = None
    laplace: sparse.csr_matrix = None
    blocks: NonlocalBlocks = None
    degree: int = DEFAULT_DEGREE
    pair_degree: int = DEFAULT_PAIR_DEGREE
    methods: tuple = SOLVER_METHODS
    tol: float = SOLVER_TOL
    _factor: Optional[Callable] = field(default=None, repr=False)

    @cached_property
    def omega_mass(self) -> sparse.csr_matrix:
        return assemble_mass(self.mesh, (Label.LOCAL, Label.NONLOCAL), self.dofmap)

    def factorization(self) -> Callable:
        if self._factor is None:
            self._factor = spla.factorized(self.matrix.tocsc())
            logger.debug("稀疏 LU 分解完成（%d 自由度）", self.n_free)
        return self._factor

    def _solve_with(self, method, rhs):
        if method == "direct":
            return self.factorization()(rhs)
        if method == "cg":
            diag = self.matrix.diagonal()
            M = sparse.diags(np.where(diag > 0, 1.0 / diag, 1.0))
            x, info = spla.cg(self.matrix, rhs, rtol=0.1 * self.tol, maxiter=20 * max(self.n_free, 1), M=M)
            if info != 0:
                raise SolverError(f"CG 未收斂（info={info}）")
            return x
        raise ValueError(f"未知的求解方法 {method!r}")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """依序嘗試 direct → CG，殘差 ≤ tol·‖rhs‖ 才接受。"""
        rhs = np.asarray(rhs, dtype=float)
        if self.n_free == 0:
            return np.zeros(0)
        scale = float(np.linalg.norm(rhs))
        if scale == 0.0:
            return np.zeros_like(rhs)
        errors = []
        for method in self.methods:
            try:
                x = self._solve_with(method, rhs)
            except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
                logger.warning("求解方法 %s 失敗：%s", method, exc)
                errors.append(f"{method}: {exc}")
                continue
            res = float(np.linalg.norm(self.matrix @ x - rhs))
            if np.all(np.isfinite(x)) and res <= self.tol * scale:
                return x
            logger.warning("求解方法 %s 殘差 %.3e 超過門檻 %.3e，改用下一個", method, res, self.tol * scale)
            errors.append(f"{method}: residual {res:.3e}")
        raise SolverError("所有求解方法都失敗：" + "; ".join(errors))


def assemble_monolithic(mesh: LabeledMesh, kernel: Kernel, forcing: Forcing, *,
                        volume_constraint: Optional[ScalarField] = None,
                        degree: int = DEFAULT_DEGREE, pair_degree: int = DEFAULT_PAIR_DEGREE,
                        pairs: Optional[np.ndarray] = None, methods: tuple = SOLVER_METHODS,
                        tol: float = SOLVER_TOL, workers: Optional[int] = None,
                        indicator_vertices: Optional[np.ndarray] = None) -> LtNSystem:
    """組裝並消去約束；indicator_vertices 見 assembly_nonlocal。"""
    dofmap = DofMap.from_mesh(mesh)
    if pairs is None:
        pairs = interaction_pairs(mesh, kernel.delta)
    laplace = assemble_laplace(mesh, dofmap)
    blocks = assemble_nonlocal_blocks(mesh, kernel, pairs, dofmap, pair_degree, workers, indicator_vertices)
    full = (laplace + blocks.full_form()).tocsr()
    load = assemble_load(mesh, forcing, dofmap, degree)
    constrained = dofmap.constrained_values(mesh, volume_constraint)
    base = SparseSystem.from_full(full, load, dofmap, constrained)
    system = LtNSystem(
        matrix=base.matrix, rhs=base.rhs, dofmap=dofmap, constrained=base.constrained,
        full_matrix=base.full_matrix, full_load=base.full_load,
        mesh=mesh, kernel=kernel, forcing=forcing, pairs=pairs, laplace=laplace, blocks=blocks,
        degree=degree, pair_degree=pair_degree, methods=tuple(methods), tol=tol,
    )
    logger.info("LtN 系統：%d 自由度（local %d / nonlocal %d），%d 配對",
                dofmap.n_free, dofmap.n_free_local, dofmap.n_free_nonlocal, pairs.shape[0])
    return system


def solve_state(system: LtNSystem) -> BrokenField:
    u = system.solve(system.rhs)
    return BrokenField.from_free(system.dofmap, u, system.constrained)


def tracking_error(u: BrokenField, ubar: np.ndarray) -> np.ndarray:
    """完整編號下的 u − ū（ū 為連續 P1 頂點值）。"""
    return u.values - np.asarray(ubar, dtype=float)[u.dofmap.vertex_of]


def solve_adjoint(system: LtNSystem, u: BrokenField, ubar: np.ndarray) -> BrokenField:
    """A v = −M_Ω (u − ū)，約束項為 0。"""
    rhs = -(system.omega_mass @ tracking_error(u, ubar))[:system.n_free]
    v = system.solve(rhs)
    return BrokenField.from_free(system.dofmap, v)


def energy(u: BrokenField, system: SparseSystem) -> float:
    x = u.free
    return float(0.5 * x @ (system.matrix @ x) - system.rhs @ x)


def l2_norm(u: BrokenField, system: LtNSystem) -> float:
    return float(np.sqrt(max(u.values @ (system.omega_mass @ u.values), 0.0)))


# === Schwarz ===
@dataclass
class SchwarzReport:
    method: str
    residuals: list[float]
    converged: bool
    iterations: int
    ratio: float = float("nan")
    r_squared: float = float("nan")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"iteration": np.arange(1, len(self.residuals) + 1), "residual": self.residuals})


def fit_geometric(residuals: list[float], floor: float = 0.0) -> tuple[float, float]:
    """log r_k ≈ log C + k log ε 的最小平方擬合，回傳 (ε, R²)。"""
    r = np.asarray(residuals, dtype=float)
    k = np.arange(1, r.size + 1)
    keep = (r > floor) & np.isfinite(r)
    if keep.sum() < 3:
        return float("nan"), float("nan")
    fit = stats.linregress(k[keep], np.log(r[keep]))
    return float(np.exp(fit.slope)), float(fit.rvalue ** 2)


def _schwarz(system, init, tol, maxiter, additive):
    if tol <= 0:
        raise ValueError(f"tol 必須 > 0，收到 {tol}")
    dm = system.dofmap
    A, F = system.matrix, system.rhs
    L, N = dm.local_free, dm.nonlocal_free
    A_ll, A_nn = A[L, L].tocsc(), A[N, N].tocsc()
    A_ln, A_nl = A[L, N].tocsr(), A[N, L].tocsr()
    solve_l = spla.factorized(A_ll) if dm.n_free_local else (lambda b: np.zeros(0))
    solve_n = spla.factorized(A_nn) if dm.n_free_nonlocal else (lambda b: np.zeros(0))

    u = np.zeros(dm.n_free) if init is None else init.free.copy()
    ul, un = u[L].copy(), u[N].copy()
    residuals, converged = [], False
    method = "additive" if additive else "multiplicative"
    pool = ThreadPoolExecutor(max_workers=2) if additive else None
    try:
        for k in range(1, maxiter + 1):
            if additive:
                fl = pool.submit(solve_l, F[L] - A_ln @ un)
                fn = pool.submit(solve_n, F[N] - A_nl @ ul)
                ul, un = fl.result(), fn.result()
            else:
                ul = solve_l(F[L] - A_ln @ un)
                un = solve_n(F[N] - A_nl @ ul)
            u = np.concatenate([ul, un])
            r = float(np.linalg.norm(A @ u - F))
            residuals.append(r)
            logger.debug("%s Schwarz 第 %d 次：殘差 %.3e", method, k, r)
            if r <= tol:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    floor = 100.0 * np.finfo(float).eps * max(float(np.linalg.norm(F)), 1.0)
    ratio, r2 = fit_geometric(residuals, floor)
    report = SchwarzReport(method, residuals, converged, len(residuals), ratio, r2)
    if converged:
        logger.info("%s Schwarz 在 %d 次收斂（ε≈%.3f）", method, report.iterations, ratio)
    else:
        logger.warning("%s Schwarz 達到 maxiter=%d 仍未收斂（殘差 %.3e）", method, maxiter,
                       residuals[-1] if residuals else float("nan"))
    return BrokenField.from_free(dm, u, system.constrained), report


def schwarz_multiplicative(system: LtNSystem, init: Optional[BrokenField] = None, tol: float = 1e-10,
                           maxiter: int = 200) -> tuple[BrokenField, SchwarzReport]:
    """先解 local 再用新的 u_l 解 nonlocal（block Gauss-Seidel）。"""
    return _schwarz(system, init, tol, maxiter, additive=False)


def schwarz_additive(system: LtNSystem, init: Optional[BrokenField] = None, tol: float = 1e-10,
                     maxiter: int = 400) -> tuple[BrokenField, SchwarzReport]:
    """兩個子問題都用上一輪的值，可同時求解。"""
    return _schwarz(system, init, tol, maxiter, additive=True)

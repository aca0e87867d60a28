"""P1 連續 Galerkin 的單積分項：Laplace 剛度、質量、載重與加權質量矩陣。

所有組裝函式回傳「完整」編號（未消去約束）的矩陣/向量；消去在 SparseSystem.from_full 做。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Optional, Union

import numpy as np
from scipy import sparse

from errors import AssemblyError, ConfigError
from mesh_geometry import Label, LabeledMesh
from quadrature import TriangleRule, triangle_rule

logger = logging.getLogger(__name__)

DEFAULT_DEGREE = 5


# === 純量場（forcing、體積約束 g 等）===
@dataclass
class ScalarField:
    name: str
    value: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    gradient: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.value(np.asarray(points, dtype=float))

    @property
    def is_zero(self) -> bool:
        return self.name in ("0", "0.0", "zero")


def constant_field(c: float) -> ScalarField:
    c = float(c)
    return ScalarField(
        name="zero" if c == 0.0 else repr(c),
        value=lambda p: np.full(np.shape(p)[:-1], c),
        gradient=lambda p: np.zeros(np.shape(p)),
    )


def _unit(i):
    return lambda p: np.broadcast_to(np.eye(2)[i], np.shape(p)).copy()


NAMED_FIELDS: dict[str, ScalarField] = {
    "zero": constant_field(0.0),
    "x1": ScalarField("x1", lambda p: p[..., 0].copy(), _unit(0)),
    "x2": ScalarField("x2", lambda p: p[..., 1].copy(), _unit(1)),
    "radial2": ScalarField("radial2", lambda p: np.einsum("...i,...i->...", p, p), lambda p: 2.0 * p),
    "sin": ScalarField(
        "sin",
        lambda p: np.sin(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1]),
        lambda p: np.pi * np.stack([np.cos(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1]),
                                    np.sin(np.pi * p[..., 0]) * np.cos(np.pi * p[..., 1])], axis=-1),
    ),
}


def make_field(spec: Union[float, int, str, ScalarField]) -> ScalarField:
    """數字 → 常數場；字串 → NAMED_FIELDS 中的解析場（或可轉成數字的字串）。"""
    if isinstance(spec, ScalarField):
        return spec
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return constant_field(spec)
    if isinstance(spec, str):
        key = spec.strip().lower()
        if key in NAMED_FIELDS:
            return NAMED_FIELDS[key]
        try:
            return constant_field(float(key))
        except ValueError:
            pass
    raise ConfigError(f"無法解析的純量場 {spec!r}（可用數字或 {sorted(NAMED_FIELDS)}）")


@dataclass
class Forcing:
    """分段定義的右端項 f = f_l χ_{Ω_l} + f_nl χ_{Ω_nl}。"""
    local: ScalarField
    nonlocal_: ScalarField

    @classmethod
    def from_spec(cls, local, nonlocal_) -> "Forcing":
        return cls(make_field(local), make_field(nonlocal_))

    def for_label(self, label: Label) -> Optional[ScalarField]:
        if label == Label.LOCAL:
            return self.local
        if label == Label.NONLOCAL:
            return self.nonlocal_
        return None

    @property
    def is_zero(self) -> bool:
        return self.local.is_zero and self.nonlocal_.is_zero


# === 自由度 ===
@dataclass(frozen=True, eq=False)
class DofMap:
    """broken 空間的編號：Γ 頂點兩側各一個 DOF。

    完整編號依序為 [自由 local | 自由 nonlocal | 約束 local | 約束 nonlocal]。
    nonlocal 側包含外層 I 的頂點（值由體積約束給定）。
    """
    n_vertices: int
    local_index: np.ndarray      # (n,) -1 表示不在 local 側
    nonlocal_index: np.ndarray   # (n,)
    n_free_local: int
    n_free_nonlocal: int
    n_total: int
    element_indices: np.ndarray  # (m, 3) 每個三角形所屬側的完整編號

    @classmethod
    def from_mesh(cls, mesh: LabeledMesh) -> "DofMap":
        flags = mesh.vertex_flags
        pinned = flags.on_boundary | flags.in_exterior
        local_side = flags.in_local
        nonlocal_side = flags.in_nonlocal | flags.in_exterior
        groups = [
            np.flatnonzero(local_side & ~pinned),
            np.flatnonzero(nonlocal_side & ~pinned),
            np.flatnonzero(local_side & pinned),
            np.flatnonzero(nonlocal_side & pinned),
        ]
        offsets = np.cumsum([0] + [g.size for g in groups])
        local_index = np.full(mesh.n_vertices, -1, dtype=np.int64)
        nonlocal_index = np.full(mesh.n_vertices, -1, dtype=np.int64)
        for k, g in enumerate(groups):
            target = local_index if k % 2 == 0 else nonlocal_index
            target[g] = offsets[k] + np.arange(g.size)
        element = np.where((mesh.labels == Label.LOCAL)[:, None],
                           local_index[mesh.triangles], nonlocal_index[mesh.triangles])
        for arr in (local_index, nonlocal_index, element):
            arr.setflags(write=False)
        dm = cls(
            n_vertices=mesh.n_vertices,
            local_index=local_index,
            nonlocal_index=nonlocal_index,
            n_free_local=int(groups[0].size),
            n_free_nonlocal=int(groups[1].size),
            n_total=int(offsets[-1]),
            element_indices=element,
        )
        logger.debug("DofMap：free local %d、free nonlocal %d、總數 %d", dm.n_free_local, dm.n_free_nonlocal, dm.n_total)
        return dm

    @property
    def n_free(self) -> int:
        return self.n_free_local + self.n_free_nonlocal

    @cached_property
    def vertex_of(self) -> np.ndarray:
        """(n_total,) 每個完整編號對應的頂點。"""
        out = np.empty(self.n_total, dtype=np.int64)
        for index in (self.local_index, self.nonlocal_index):
            has = index >= 0
            out[index[has]] = np.flatnonzero(has)
        return out

    @cached_property
    def is_local(self) -> np.ndarray:
        out = np.zeros(self.n_total, dtype=bool)
        out[self.local_index[self.local_index >= 0]] = True
        return out

    @property
    def local_free(self) -> slice:
        return slice(0, self.n_free_local)

    @property
    def nonlocal_free(self) -> slice:
        return slice(self.n_free_local, self.n_free)

    def constrained_values(self, mesh: LabeledMesh, volume_constraint: Optional[ScalarField] = None) -> np.ndarray:
        """約束 DOF 的值：local 側為 0，nonlocal 側為 g(x)（預設 0）。"""
        values = np.zeros(self.n_total - self.n_free)
        if volume_constraint is not None and not volume_constraint.is_zero:
            idx = np.arange(self.n_free, self.n_total)
            nl = ~self.is_local[idx]
            values[nl] = volume_constraint(mesh.vertices[self.vertex_of[idx[nl]]])
        return values


# === 稀疏組裝 ===
class TripletAccumulator:
    """COO 三元組累加，最後一次轉 CSR（重複項相加）。"""

    def __init__(self, shape: tuple[int, int]):
        self.shape = shape
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, rows, cols, vals):
        rows, cols, vals = np.broadcast_arrays(rows, cols, vals)
        keep = (rows >= 0) & (cols >= 0)
        self._rows.append(rows[keep].ravel())
        self._cols.append(cols[keep].ravel())
        self._vals.append(vals[keep].ravel())

    def add_blocks(self, row_idx: np.ndarray, col_idx: np.ndarray, blocks: np.ndarray):
        """row_idx (k, a)、col_idx (k, b)、blocks (k, a, b)。"""
        self.add(row_idx[:, :, None], col_idx[:, None, :], blocks)

    def extend(self, other: "TripletAccumulator"):
        self._rows += other._rows
        self._cols += other._cols
        self._vals += other._vals

    def to_csr(self) -> sparse.csr_matrix:
        if not self._rows:
            return sparse.csr_matrix(self.shape)
        r = np.concatenate(self._rows)
        c = np.concatenate(self._cols)
        v = np.concatenate(self._vals)
        m = sparse.coo_matrix((v, (r, c)), shape=self.shape).tocsr()
        m.sum_duplicates()
        return m


def asymmetry(matrix: sparse.spmatrix) -> float:
    """‖A − Aᵀ‖_max / ‖A‖_max，空矩陣回傳 0。"""
    scale = abs(matrix).max() if matrix.nnz else 0.0
    if scale == 0.0:
        return 0.0
    diff = (matrix - matrix.T).tocoo()
    return float(np.abs(diff.data).max() / scale) if diff.nnz else 0.0


@dataclass
class SparseSystem:
    """消去約束後的對稱系統 A u = F（只含自由 DOF），保留完整矩陣供檢查。"""
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    dofmap: DofMap
    constrained: np.ndarray
    full_matrix: sparse.csr_matrix
    full_load: np.ndarray

    @classmethod
    def from_full(cls, full_matrix, full_load, dofmap: DofMap, constrained: Optional[np.ndarray] = None) -> "SparseSystem":
        nf = dofmap.n_free
        full_matrix = sparse.csr_matrix(full_matrix)
        if constrained is None:
            constrained = np.zeros(dofmap.n_total - nf)
        A = full_matrix[:nf, :nf].tocsr()
        rhs = np.asarray(full_load[:nf], dtype=float).copy()
        if np.any(constrained != 0.0):
            rhs -= full_matrix[:nf, nf:] @ constrained
        return cls(matrix=A, rhs=rhs, dofmap=dofmap, constrained=np.asarray(constrained, dtype=float),
                   full_matrix=full_matrix, full_load=np.asarray(full_load, dtype=float))

    @property
    def n_free(self) -> int:
        return self.dofmap.n_free

    def residual(self, u_free: np.ndarray) -> np.ndarray:
        return self.matrix @ u_free - self.rhs

    def asymmetry(self) -> float:
        return asymmetry(self.matrix)


# === 元素層級工具 ===
def _triangles_of(mesh, region):
    labels = [region] if isinstance(region, (Label, int)) else list(region)
    return mesh.select(*labels)


def _indices(mesh, tri, dofmap):
    if dofmap is None:
        return mesh.triangles[tri], mesh.n_vertices
    return dofmap.element_indices[tri], dofmap.n_total


def quadrature_points(mesh: LabeledMesh, rule: TriangleRule, tri: Optional[np.ndarray] = None) -> np.ndarray:
    """(k, Q, 2) 實體座標的積分點。"""
    p = mesh.vertices[mesh.triangles if tri is None else mesh.triangles[tri]]
    return np.einsum("qi,kij->kqj", rule.barycentric, p)


def element_stiffness(mesh: LabeledMesh, tri: np.ndarray) -> np.ndarray:
    G = mesh.basis_gradients[tri]
    return mesh.areas[tri][:, None, None] * np.einsum("kid,kjd->kij", G, G)


def element_mass(mesh: LabeledMesh, tri: np.ndarray) -> np.ndarray:
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return mesh.areas[tri][:, None, None] * ref[None]


def assemble_laplace(mesh: LabeledMesh, dofmap: Optional[DofMap] = None) -> sparse.csr_matrix:
    """Ω_l 上的 P1 剛度矩陣。"""
    tri = mesh.select(Label.LOCAL)
    idx, n = _indices(mesh, tri, dofmap)
    acc = TripletAccumulator((n, n))
    acc.add_blocks(idx, idx, element_stiffness(mesh, tri))
    return acc.to_csr()


def assemble_mass(mesh: LabeledMesh, region: Union[Label, Iterable[Label]],
                  dofmap: Optional[DofMap] = None) -> sparse.csr_matrix:
    """region 上的 P1 一致質量矩陣；dofmap 為 None 時用頂點編號（連續 P1）。"""
    tri = _triangles_of(mesh, region)
    idx, n = _indices(mesh, tri, dofmap)
    acc = TripletAccumulator((n, n))
    acc.add_blocks(idx, idx, element_mass(mesh, tri))
    return acc.to_csr()


def assemble_load(mesh: LabeledMesh, forcing: Forcing, dofmap: Optional[DofMap] = None,
                  degree: int = DEFAULT_DEGREE) -> np.ndarray:
    """兩側都是 +∫ f v。"""
    rule = triangle_rule(degree)
    n = dofmap.n_total if dofmap is not None else mesh.n_vertices
    load = np.zeros(n)
    for label in (Label.LOCAL, Label.NONLOCAL):
        f = forcing.for_label(label)
        tri = mesh.select(label)
        if tri.size == 0 or f.is_zero:
            continue
        idx, _ = _indices(mesh, tri, dofmap)
        fq = f(quadrature_points(mesh, rule, tri))
        local = mesh.areas[tri][:, None] * np.einsum("q,kq,qi->ki", rule.weights, fq, rule.barycentric)
        keep = idx >= 0
        np.add.at(load, idx[keep], local[keep])
    return load


def assemble_weighted_mass(mesh: LabeledMesh, region: Union[Label, Iterable[Label]],
                           weight: Union[Callable[[np.ndarray], np.ndarray], np.ndarray],
                           dofmap: Optional[DofMap] = None, degree: int = DEFAULT_DEGREE) -> sparse.csr_matrix:
    """∫ w φ_i φ_j；weight 可為 callable(points (k,Q,2)) 或已算好的 (k, Q) 陣列。"""
    rule = triangle_rule(degree)
    tri = _triangles_of(mesh, region)
    idx, n = _indices(mesh, tri, dofmap)
    acc = TripletAccumulator((n, n))
    if tri.size == 0:
        return acc.to_csr()
    w = weight(quadrature_points(mesh, rule, tri)) if callable(weight) else np.asarray(weight, dtype=float)
    w = np.broadcast_to(w, (tri.size, rule.size))
    if np.any(w < 0):
        raise AssemblyError(f"加權質量的權重出現負值（最小 {w.min():.3e}），kernel 非負性被破壞")
    phi = rule.barycentric
    blocks = mesh.areas[tri][:, None, None] * np.einsum("q,kq,qi,qj->kij", rule.weights, w, phi, phi)
    acc.add_blocks(idx, idx, blocks)
    return acc.to_csr()

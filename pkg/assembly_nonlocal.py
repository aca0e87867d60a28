"""雙積分項：對交互作用三角形配對做 tensor-product 積分，在積分點配對上以 𝟙[‖x−y‖<δ] 截斷。

配對 (T_a, T_b) 為有序，x 一律取自 NONLOCAL 的 T_a，y 取自夥伴 T_b。
每批配對算出
    W_pq = w_p w_q |T_a| |T_b| γ(x_p, y_q)
    aa = Φᵀ diag(Σ_q W) Φ,  bb = Φᵀ diag(Σ_p W) Φ,  ab = Φᵀ W Φ
再依區塊種類散佈到完整編號。

indicator_vertices 給定時，截斷指標改在這組頂點座標（同一拓撲）的積分點上判斷，
φ 與面積仍用 mesh 本身；形狀導數的有限差分檢查靠它把參考網格的截斷帶到變形後的網格。
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy import sparse

from assembly_local import DofMap, TripletAccumulator
from kernels import Kernel
from mesh_geometry import Label, LabeledMesh
from quadrature import triangle_rule

logger = logging.getLogger(__name__)

DEFAULT_PAIR_DEGREE = 5
CHUNK_SIZE = 2048


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LTN_NUM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class PairBlocks:
    a: np.ndarray    # (P,) 三角形
    b: np.ndarray
    aa: np.ndarray   # (P, 3, 3)
    bb: np.ndarray
    ab: np.ndarray


def _split(pairs, chunk):
    return [pairs[i:i + chunk] for i in range(0, pairs.shape[0], chunk)]


def _pair_points(rule, pts, pairs):
    x = np.einsum("qi,pij->pqj", rule.barycentric, pts[pairs[:, 0]])
    y = np.einsum("qi,pij->pqj", rule.barycentric, pts[pairs[:, 1]])
    return x, y


def pair_weights(mesh: LabeledMesh, kernel: Kernel, pairs: np.ndarray, degree: int,
                 indicator_vertices: Optional[np.ndarray] = None):
    """回傳 (W, x, y, z, inside)：W (P,Q,Q) 含截斷的權重；x/y (P,Q,2) 積分點；z = x − y；inside 為截斷指標。"""
    rule = triangle_rule(degree)
    a, b = pairs[:, 0], pairs[:, 1]
    x, y = _pair_points(rule, mesh.vertices[mesh.triangles], pairs)
    z = x[:, :, None, :] - y[:, None, :, :]
    if indicator_vertices is None:
        inside = kernel.inside(z)
    else:
        xr, yr = _pair_points(rule, np.asarray(indicator_vertices, dtype=float)[mesh.triangles], pairs)
        inside = kernel.inside(xr[:, :, None, :] - yr[:, None, :, :])
    w = rule.weights
    scale = (mesh.areas[a] * mesh.areas[b])[:, None, None] * (w[:, None] * w[None, :])[None]
    W = np.where(inside, scale * kernel.phi(z), 0.0)
    return W, x, y, z, inside


def _blocks_for_chunk(mesh, kernel, chunk, degree, need_bb, indicator_vertices):
    phi = triangle_rule(degree).barycentric
    W = pair_weights(mesh, kernel, chunk, degree, indicator_vertices)[0]
    aa = np.einsum("px,xi,xj->pij", W.sum(axis=2), phi, phi)
    bb = np.einsum("py,yi,yj->pij", W.sum(axis=1), phi, phi) if need_bb else None
    ab = np.einsum("pxy,xi,yj->pij", W, phi, phi)
    return PairBlocks(chunk[:, 0], chunk[:, 1], aa, bb, ab)


def iter_pair_blocks(mesh: LabeledMesh, kernel: Kernel, pairs: np.ndarray, degree: int = DEFAULT_PAIR_DEGREE,
                     need_bb: bool = True, workers: Optional[int] = None, chunk: int = CHUNK_SIZE,
                     indicator_vertices: Optional[np.ndarray] = None) -> Iterator[PairBlocks]:
    """依配對順序產生每批的元素區塊；多執行緒時 map 仍維持原順序，所以結果與單執行緒相同。"""
    chunks = _split(np.asarray(pairs, dtype=np.int64), chunk)
    workers = worker_count() if workers is None else workers

    def run(c):
        return _blocks_for_chunk(mesh, kernel, c, degree, need_bb, indicator_vertices)

    if workers <= 1 or len(chunks) <= 1:
        for c in chunks:
            yield run(c)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(run, chunks)


def restrict_pairs(mesh: LabeledMesh, pairs: np.ndarray, partner: Label) -> np.ndarray:
    return pairs[mesh.labels[pairs[:, 1]] == partner]


# === 區塊 ===
@dataclass
class NonlocalBlocks:
    D_nlnl: sparse.csr_matrix
    C_nl_l: sparse.csr_matrix
    M_cross_nl: sparse.csr_matrix
    M_cross_l: sparse.csr_matrix
    M_absorb: sparse.csr_matrix
    C_nl_I: sparse.csr_matrix

    def full_form(self) -> sparse.csr_matrix:
        """所有雙積分項合成的對稱矩陣（完整編號）。"""
        cross = self.M_cross_nl - self.C_nl_l - self.C_nl_l.T + self.M_cross_l
        volume = -self.C_nl_I - self.C_nl_I.T
        return (self.D_nlnl + cross + self.M_absorb + volume).tocsr()


def assemble_difference_block(mesh: LabeledMesh, kernel: Kernel, pairs: np.ndarray, dofmap: DofMap,
                              degree: int = DEFAULT_PAIR_DEGREE, workers: Optional[int] = None,
                              indicator_vertices: Optional[np.ndarray] = None) -> sparse.csr_matrix:
    """∫_{Ω_nl}∫_{Ω_nl} (u(x)−u(y))(v(x)−v(y)) γ dy dx。"""
    pairs = restrict_pairs(mesh, pairs, Label.NONLOCAL)
    n = dofmap.n_total
    acc = TripletAccumulator((n, n))
    idx = dofmap.element_indices
    for blk in iter_pair_blocks(mesh, kernel, pairs, degree, workers=workers,
                                indicator_vertices=indicator_vertices):
        ia, ib = idx[blk.a], idx[blk.b]
        acc.add_blocks(ia, ia, blk.aa)
        acc.add_blocks(ib, ib, blk.bb)
        acc.add_blocks(ia, ib, -blk.ab)
        acc.add_blocks(ib, ia, -np.transpose(blk.ab, (0, 2, 1)))
    return acc.to_csr()


def assemble_cross_blocks(mesh: LabeledMesh, kernel: Kernel, pairs: np.ndarray, dofmap: DofMap,
                          degree: int = DEFAULT_PAIR_DEGREE, workers: Optional[int] = None,
                          indicator_vertices: Optional[np.ndarray] = None):
    """NONLOCAL×LOCAL 交叉項展開後的 (C_nl_l, M_cross_nl, M_cross_l)；C 的列為 nonlocal 側、行為 local 側。"""
    pairs = restrict_pairs(mesh, pairs, Label.LOCAL)
    n = dofmap.n_total
    C, Mnl, Ml = (TripletAccumulator((n, n)) for _ in range(3))
    idx = dofmap.element_indices
    for blk in iter_pair_blocks(mesh, kernel, pairs, degree, workers=workers,
                                indicator_vertices=indicator_vertices):
        ia, ib = idx[blk.a], idx[blk.b]
        Mnl.add_blocks(ia, ia, blk.aa)
        Ml.add_blocks(ib, ib, blk.bb)
        C.add_blocks(ia, ib, blk.ab)
    return C.to_csr(), Mnl.to_csr(), Ml.to_csr()


def assemble_absorption(mesh: LabeledMesh, kernel: Kernel, pairs: np.ndarray, dofmap: DofMap,
                        degree: int = DEFAULT_PAIR_DEGREE, workers: Optional[int] = None,
                        indicator_vertices: Optional[np.ndarray] = None) -> sparse.csr_matrix:
    """∫_{Ω_nl} u v ∫_I γ dy dx。"""
    pairs = restrict_pairs(mesh, pairs, Label.EXTERIOR)
    n = dofmap.n_total
    acc = TripletAccumulator((n, n))
    idx = dofmap.element_indices
    for blk in iter_pair_blocks(mesh, kernel, pairs, degree, need_bb=False, workers=workers,
                                indicator_vertices=indicator_vertices):
        ia = idx[blk.a]
        acc.add_blocks(ia, ia, blk.aa)
    return acc.to_csr()


def assemble_volume_coupling(mesh: LabeledMesh, kernel: Kernel, pairs: np.ndarray, dofmap: DofMap,
                             degree: int = DEFAULT_PAIR_DEGREE, workers: Optional[int] = None,
                             indicator_vertices: Optional[np.ndarray] = None) -> sparse.csr_matrix:
    """Ω_nl×I 的交叉項 ∫∫ v(x) g(y) γ：列為 nonlocal 自由 DOF，行為外層（約束）DOF。

    體積約束 g ≠ 0 時，−C g 移到右端項。
    """
    pairs = restrict_pairs(mesh, pairs, Label.EXTERIOR)
    n = dofmap.n_total
    acc = TripletAccumulator((n, n))
    idx = dofmap.element_indices
    for blk in iter_pair_blocks(mesh, kernel, pairs, degree, need_bb=False, workers=workers,
                                indicator_vertices=indicator_vertices):
        acc.add_blocks(idx[blk.a], idx[blk.b], blk.ab)
    return acc.to_csr()


def assemble_nonlocal_blocks(mesh: LabeledMesh, kernel: Kernel, pairs: np.ndarray, dofmap: DofMap,
                             degree: int = DEFAULT_PAIR_DEGREE, workers: Optional[int] = None,
                             indicator_vertices: Optional[np.ndarray] = None) -> NonlocalBlocks:
    args = (mesh, kernel, pairs, dofmap, degree, workers, indicator_vertices)
    C, Mnl, Ml = assemble_cross_blocks(*args)
    blocks = NonlocalBlocks(
        D_nlnl=assemble_difference_block(*args),
        C_nl_l=C,
        M_cross_nl=Mnl,
        M_cross_l=Ml,
        M_absorb=assemble_absorption(*args),
        C_nl_I=assemble_volume_coupling(*args),
    )
    logger.info("nonlocal 組裝完成：%d 配對，D nnz=%d，C nnz=%d", pairs.shape[0], blocks.D_nlnl.nnz, blocks.C_nl_l.nnz)
    return blocks


def kernel_weight(mesh: LabeledMesh, kernel: Kernel, points: np.ndarray, region: Label,
                  degree: int = DEFAULT_PAIR_DEGREE) -> np.ndarray:
    """任意點 x 的 ∫_region γ(x, y) dy，與組裝用同一個截斷積分。"""
    points = np.asarray(points, dtype=float)
    shape = points.shape[:-1]
    flat = points.reshape(-1, 2)
    tri = mesh.select(region)
    out = np.zeros(flat.shape[0])
    if tri.size == 0:
        return out.reshape(shape)
    rule = triangle_rule(degree)
    y = np.einsum("qi,kij->kqj", rule.barycentric, mesh.vertices[mesh.triangles[tri]])
    wy = mesh.areas[tri][:, None] * rule.weights[None, :]
    centroids = mesh.centroids[tri]
    reach = kernel.delta + float(np.linalg.norm(mesh.vertices[mesh.triangles[tri]] - centroids[:, None], axis=2).max())
    for k, x in enumerate(flat):
        near = np.flatnonzero(np.linalg.norm(centroids - x, axis=1) < reach)
        if near.size:
            out[k] = np.sum(wy[near] * kernel.value_diff(x - y[near]))
    return out.reshape(shape)


# === 形狀導數的雙積分項 ===
def assemble_nl_shape_derivative(mesh: LabeledMesh, kernel: Kernel, u_side: np.ndarray, v_side: np.ndarray,
                                 pairs: np.ndarray, degree: int = DEFAULT_PAIR_DEGREE,
                                 workers: Optional[int] = None) -> np.ndarray:
    """對每個向量 P1 基底 V = e_c λ_k 計算

        ∫∫ (u(x)−u(y))(v(x)−v(y)) [γ (div V(x) + div V(y)) + ∇_xγ·V(x) + ∇_yγ·V(y)] dy dx

    u_side/v_side 為 (m, 3)：每個三角形在其所屬側的節點值（EXTERIOR 三角形為體積約束值）。
    回傳 (n_vertices, 2)。γ₁ 沒有梯度項。
    """
    rule = triangle_rule(degree)
    phi = rule.barycentric
    grads = mesh.basis_gradients
    out = np.zeros((mesh.n_vertices, 2))
    workers = worker_count() if workers is None else workers

    def chunk_terms(chunk):
        a, b = chunk[:, 0], chunk[:, 1]
        W, _, _, z, inside = pair_weights(mesh, kernel, chunk, degree)
        du = (u_side[a] @ phi.T)[:, :, None] - (u_side[b] @ phi.T)[:, None, :]
        dv = (v_side[a] @ phi.T)[:, :, None] - (v_side[b] @ phi.T)[:, None, :]
        Wd = W * du * dv
        s = Wd.sum(axis=(1, 2))
        ga = s[:, None, None] * grads[a]
        gb = s[:, None, None] * grads[b]
        if kernel.has_gradient:
            # 梯度項：γ 換成 ∇φ，指標的分佈項不計
            rule_w = rule.weights[:, None] * rule.weights[None, :]
            base = (mesh.areas[a] * mesh.areas[b])[:, None, None] * rule_w[None] * inside * du * dv
            g = kernel.grad_phi(z)
            ga = ga + np.einsum("pxy,pxyc,xk->pkc", base, g, phi)
            gb = gb - np.einsum("pxy,pxyc,yk->pkc", base, g, phi)
        return a, b, ga, gb

    chunks = _split(np.asarray(pairs, dtype=np.int64), CHUNK_SIZE)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(chunk_terms, chunks))
    else:
        results = [chunk_terms(c) for c in chunks]
    for a, b, ga, gb in results:
        np.add.at(out, mesh.triangles[a], ga)
        np.add.at(out, mesh.triangles[b], gb)
    return out

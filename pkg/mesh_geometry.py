"""帶標籤的三角網格：讀寫 MSH、介面 Γ、交互作用配對、變形與內插。"""
from __future__ import annotations

import hashlib
import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Mapping, Optional, Union

import chardet
import numpy as np
from scipy.spatial import cKDTree

from errors import (
    DegenerateTriangle,
    EmptyInterface,
    EmptySubdomain,
    InterfaceNotClosed,
    InvalidDeformation,
    InvalidityReport,
    MeshError,
    MshParseError,
    NonConformingMesh,
    OutOfDomain,
    UnknownLabel,
)

logger = logging.getLogger(__name__)

SNAP_TOLERANCE = 1e-10
AREA_RATIO_MIN = 1e-3
ENCODINGS = ["utf-8", "utf-8-sig", "big5", "cp950", "latin-1"]


class Label(IntEnum):
    LOCAL = 0
    NONLOCAL = 1
    EXTERIOR = 2

    @classmethod
    def parse(cls, value: Union[str, int, "Label"]) -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise UnknownLabel(f"未知的標籤名稱：{value!r}（可用 local / nonlocal / exterior）") from None
        try:
            return cls(int(value))
        except ValueError:
            raise UnknownLabel(f"未知的標籤值：{value!r}") from None


DEFAULT_LABEL_MAP: dict[str, Label] = {
    "1": Label.LOCAL,
    "2": Label.NONLOCAL,
    "3": Label.EXTERIOR,
    "local": Label.LOCAL,
    "nonlocal": Label.NONLOCAL,
    "exterior": Label.EXTERIOR,
}
DEFAULT_PHYSICAL_TAGS = {Label.LOCAL: 1, Label.NONLOCAL: 2, Label.EXTERIOR: 3}


def normalize_label_map(label_map: Optional[Mapping]) -> dict[str, Label]:
    if not label_map:
        return dict(DEFAULT_LABEL_MAP)
    return {str(k).strip(): Label.parse(v) for k, v in label_map.items()}


# === 幾何小工具 ===
def signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (vertices[triangles[:, i]] for i in range(3))
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """點到線段距離，最後一維是座標，其餘維度可廣播。"""
    ab = b - a
    denom = np.einsum("...i,...i->...", ab, ab)
    t = np.einsum("...i,...i->...", p - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1)


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def segment_distance(p1, p2, q1, q2) -> np.ndarray:
    d = np.minimum.reduce([
        point_segment_distance(p1, q1, q2),
        point_segment_distance(p2, q1, q2),
        point_segment_distance(q1, p1, p2),
        point_segment_distance(q2, p1, p2),
    ])
    o1, o2 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    o3, o4 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    crossing = (o1 * o2 < 0) & (o3 * o4 < 0)
    return np.where(crossing, 0.0, d)


def _point_in_triangle(p, tri):
    s0 = _orient(tri[..., 0, :], tri[..., 1, :], p)
    s1 = _orient(tri[..., 1, :], tri[..., 2, :], p)
    s2 = _orient(tri[..., 2, :], tri[..., 0, :], p)
    return ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))


def triangle_distance(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """兩批三角形 (P,3,2) 之間的最短歐氏距離（相交或包含時為 0）。"""
    d = np.full(A.shape[0], np.inf)
    for i, j in itertools.product(range(3), range(3)):
        d = np.minimum(d, segment_distance(A[:, i], A[:, (i + 1) % 3], B[:, j], B[:, (j + 1) % 3]))
    inside = _point_in_triangle(A[:, 0], B) | _point_in_triangle(B[:, 0], A)
    return np.where(inside, 0.0, d)


def _label_of(labels, t):
    return np.where(t >= 0, labels[np.maximum(t, 0)], -1)


def _in_omega(labels, t):
    lab = _label_of(labels, t)
    return (lab == Label.LOCAL) | (lab == Label.NONLOCAL)


def _is_interface_edge(labels, t0, t1):
    l0, l1 = _label_of(labels, t0), _label_of(labels, t1)
    return ((l0 == Label.LOCAL) & (l1 == Label.NONLOCAL)) | ((l0 == Label.NONLOCAL) & (l1 == Label.LOCAL))


@dataclass
class VertexFlags:
    on_boundary: np.ndarray   # ∂Ω
    on_interface: np.ndarray  # Γ
    in_exterior: np.ndarray   # 屬於某個 EXTERIOR 三角形
    in_local: np.ndarray
    in_nonlocal: np.ndarray


@dataclass(frozen=True, eq=False)
class LabeledMesh:
    """頂點、三角形與每個三角形的 Label；建構後陣列唯讀，三角形一律逆時針。"""
    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        t = np.array(self.triangles, dtype=np.int64)
        lab = np.array(self.labels, dtype=np.int8)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError(f"vertices 形狀應為 (n, 2)，收到 {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles 形狀應為 (m, 3)，收到 {t.shape}")
        if lab.shape != (t.shape[0],):
            raise MeshError(f"labels 長度 {lab.shape} 與三角形數 {t.shape[0]} 不符")
        if t.size and (t.min() < 0 or t.max() >= v.shape[0]):
            raise MeshError("triangles 含有超出範圍的頂點索引")
        if lab.size and not np.isin(lab, [int(x) for x in Label]).all():
            raise UnknownLabel(f"labels 含有未知的值：{sorted(set(lab.tolist()) - {0, 1, 2})}")
        if not np.isin(lab, [Label.LOCAL, Label.NONLOCAL]).any():
            raise EmptySubdomain("Ω 是空的：沒有任何 LOCAL 或 NONLOCAL 三角形")
        used = np.zeros(v.shape[0], dtype=bool)
        used[t.ravel()] = True
        if not used.all():
            raise NonConformingMesh(f"{int((~used).sum())} 個頂點沒有被任何三角形使用")

        area = signed_areas(v, t)
        scale = np.ptp(v, axis=0).max() ** 2 if v.size else 1.0
        degenerate = np.abs(area) <= 1e-14 * scale
        if degenerate.any():
            raise DegenerateTriangle(f"退化三角形（面積≈0）：{np.flatnonzero(degenerate)[:10].tolist()}")
        flip = area < 0
        if flip.any():
            t[flip] = t[flip][:, [0, 2, 1]]

        for arr in (v, t, lab):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "labels", lab)
        self._check_conforming()

    # --- 基本量 ---
    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def with_vertices(self, vertices: np.ndarray) -> "LabeledMesh":
        return LabeledMesh(vertices, self.triangles, self.labels)

    def count(self, label: Label) -> int:
        return int(np.count_nonzero(self.labels == label))

    def select(self, *labels: Label) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, [int(x) for x in labels]))

    @cached_property
    def areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.triangles)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def omega_mask(self) -> np.ndarray:
        return self.labels != Label.EXTERIOR

    @cached_property
    def max_centroid_radius(self) -> float:
        d = np.linalg.norm(self.vertices[self.triangles] - self.centroids[:, None, :], axis=2)
        return float(d.max())

    @cached_property
    def centroid_tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    @cached_property
    def jacobian_inverse(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        return np.linalg.inv(J)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """(m, 3, 2)：每個三角形上 P1 基底 λ_i 的梯度。"""
        D = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        return np.einsum("ik,mkj->mij", D, self.jacobian_inverse)

    # --- 拓樸 ---
    @cached_property
    def _edge_table(self):
        local = np.array([[0, 1], [1, 2], [2, 0]])
        all_edges = np.sort(self.triangles[:, local].reshape(-1, 2), axis=1)
        edges, inverse = np.unique(all_edges, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        tri_of = np.repeat(np.arange(self.n_triangles), 3)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=edges.shape[0])
        edge_tris = np.full((edges.shape[0], max(2, int(counts.max(initial=0)))), -1, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(order.size) - np.repeat(starts, counts)
        edge_tris[inverse[order], slot] = tri_of[order]
        return edges, edge_tris, inverse.reshape(-1, 3)

    @property
    def edges(self) -> np.ndarray:
        return self._edge_table[0]

    @property
    def edge_triangles(self) -> np.ndarray:
        return self._edge_table[1]

    @property
    def triangle_edges(self) -> np.ndarray:
        return self._edge_table[2]

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    @property
    def h_min(self) -> float:
        return float(self.edge_lengths.min())

    @property
    def h_max(self) -> float:
        return float(self.edge_lengths.max())

    def _check_conforming(self):
        _, edge_tris, _ = self._edge_table
        if edge_tris.shape[1] > 2:
            bad = np.flatnonzero(edge_tris[:, 2] >= 0)
            raise NonConformingMesh(f"{bad.size} 條邊被三個以上三角形共用")
        boundary = self.edges[edge_tris[:, 1] < 0]
        if boundary.size == 0:
            return
        a, b = self.vertices[boundary[:, 0]], self.vertices[boundary[:, 1]]
        mid, half = 0.5 * (a + b), 0.5 * np.linalg.norm(b - a, axis=1)
        tree = cKDTree(self.vertices)
        hits = tree.query_ball_point(mid, half * (1.0 + 1e-9))
        for k, cand in enumerate(hits):
            for c in cand:
                if c in boundary[k]:
                    continue
                if point_segment_distance(self.vertices[c], a[k], b[k]) <= 1e-12 * (2 * half[k]):
                    raise NonConformingMesh(f"懸掛節點：頂點 {c} 落在邊 {boundary[k].tolist()} 的內部")

    @cached_property
    def vertex_flags(self) -> VertexFlags:
        n = self.n_vertices
        edges, edge_tris, _ = self._edge_table
        t0, t1 = edge_tris[:, 0], edge_tris[:, 1]
        boundary_edge = _in_omega(self.labels, t0) != _in_omega(self.labels, t1)
        interface_edge = _is_interface_edge(self.labels, t0, t1)

        def mark(edge_mask):
            flag = np.zeros(n, dtype=bool)
            flag[edges[edge_mask].ravel()] = True
            return flag

        def of_label(label):
            flag = np.zeros(n, dtype=bool)
            flag[self.triangles[self.labels == label].ravel()] = True
            return flag

        return VertexFlags(
            on_boundary=mark(boundary_edge),
            on_interface=mark(interface_edge),
            in_exterior=of_label(Label.EXTERIOR),
            in_local=of_label(Label.LOCAL),
            in_nonlocal=of_label(Label.NONLOCAL),
        )

    @cached_property
    def fixed_vertices(self) -> np.ndarray:
        """形狀變形時必須固定的頂點（∂Ω 與外層）。"""
        f = self.vertex_flags
        return f.on_boundary | f.in_exterior

    @cached_property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="i1").tobytes())
        return h.hexdigest()


# === MSH 讀寫 ===
def _decode(raw):
    guess = chardet.detect(raw[:200000]).get("encoding")
    tried = []
    for enc in ([guess] if guess else []) + ENCODINGS:
        if enc in tried:
            continue
        tried.append(enc)
        try:
            return raw.decode(enc)
        except (UnicodeDecodeError, LookupError):
            continue
    raise MshParseError(f"無法判斷檔案編碼（嘗試過 {tried}）")


def _sections(lines):
    sections, i = {}, 0
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("$") and not line.startswith("$End"):
            name = line[1:]
            end = f"$End{name}"
            j = i + 1
            while j < len(lines) and lines[j].strip() != end:
                j += 1
            if j == len(lines):
                raise MshParseError(f"第 {i + 1} 行：區段 ${name} 沒有對應的 {end}")
            sections[name] = (i + 2, lines[i + 1:j])
            i = j
        i += 1
    return sections


def load_msh(path: Union[str, Path], label_map: Optional[Mapping] = None) -> LabeledMesh:
    """讀取 Gmsh MSH 2.2 ASCII 檔；只保留 type 2（三角形），physical tag 透過 label_map 轉成 Label。"""
    path = Path(path)
    text = _decode(path.read_bytes())
    lines = text.splitlines()
    sections = _sections(lines)
    lmap = normalize_label_map(label_map)

    if "MeshFormat" in sections:
        first, body = sections["MeshFormat"]
        parts = body[0].split() if body else []
        if len(parts) < 2 or not parts[0].startswith("2"):
            raise MshParseError(f"第 {first} 行：僅支援 MSH 2.x ASCII，收到版本 {parts[:1]}")
        if parts[1] != "0":
            raise MshParseError(f"第 {first} 行：不支援 binary MSH")
    for name in ("Nodes", "Elements"):
        if name not in sections:
            raise MshParseError(f"缺少 ${name} 區段")

    physical_names: dict[int, str] = {}
    if "PhysicalNames" in sections:
        first, body = sections["PhysicalNames"]
        for line in body[1:]:
            parts = line.split(maxsplit=2)
            if len(parts) == 3:
                physical_names[int(parts[1])] = parts[2].strip().strip('"')

    first, body = sections["Nodes"]
    try:
        n_nodes = int(body[0])
        node_ids = np.empty(n_nodes, dtype=np.int64)
        coords = np.empty((n_nodes, 2))
        for k in range(n_nodes):
            parts = body[1 + k].split()
            node_ids[k] = int(parts[0])
            coords[k] = float(parts[1]), float(parts[2])
    except (IndexError, ValueError) as exc:
        raise MshParseError(f"$Nodes 區段（約第 {first + len(body)} 行前）格式錯誤：{exc}") from exc

    first, body = sections["Elements"]
    tris, labels = [], []
    try:
        n_elem = int(body[0])
        if len(body) - 1 < n_elem:
            raise MshParseError(f"$Elements 宣告 {n_elem} 個元素，只讀到 {len(body) - 1} 個")
        for k in range(n_elem):
            parts = [int(x) for x in body[1 + k].split()]
            if parts[1] != 2:
                continue
            n_tags = parts[2]
            tag = parts[3] if n_tags > 0 else 0
            key, name = str(tag), physical_names.get(tag)
            if key in lmap:
                labels.append(lmap[key])
            elif name is not None and name in lmap:
                labels.append(lmap[name])
            else:
                raise UnknownLabel(f"第 {first + 1 + k} 行：physical tag {tag} ({name}) 不在 label map 中")
            tris.append(parts[3 + n_tags:6 + n_tags])
    except (IndexError, ValueError) as exc:
        raise MshParseError(f"$Elements 區段格式錯誤：{exc}") from exc
    if not tris:
        raise EmptySubdomain(f"{path.name} 沒有任何三角形元素")

    lookup = {int(nid): k for k, nid in enumerate(node_ids)}
    try:
        tri = np.array([[lookup[n] for n in t] for t in tris], dtype=np.int64)
    except KeyError as exc:
        raise MshParseError(f"元素引用了不存在的節點 {exc}") from exc
    used = np.unique(tri)
    if used.size != n_nodes:
        logger.debug("略過 %d 個未被三角形使用的節點", n_nodes - used.size)
    remap = np.full(n_nodes, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    mesh = LabeledMesh(coords[used], remap[tri], np.array(labels, dtype=np.int8))
    logger.info("讀入 %s：%d 頂點、%d 三角形 (L=%d, NL=%d, EXT=%d)", path.name, mesh.n_vertices,
                mesh.n_triangles, mesh.count(Label.LOCAL), mesh.count(Label.NONLOCAL), mesh.count(Label.EXTERIOR))
    return mesh


def save_msh(mesh: LabeledMesh, path: Union[str, Path], tags: Optional[Mapping[Label, int]] = None) -> Path:
    tags = dict(DEFAULT_PHYSICAL_TAGS if tags is None else tags)
    path = Path(path)
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames", str(len(tags))]
    out += [f'2 {tags[lab]} "{lab.name.lower()}"' for lab in Label if lab in tags]
    out += ["$EndPhysicalNames", "$Nodes", str(mesh.n_vertices)]
    out += [f"{k + 1} {x!r} {y!r} 0" for k, (x, y) in enumerate(mesh.vertices.tolist())]
    out += ["$EndNodes", "$Elements", str(mesh.n_triangles)]
    for k, (tri, lab) in enumerate(zip(mesh.triangles.tolist(), mesh.labels.tolist())):
        tag = tags[Label(lab)]
        out.append(f"{k + 1} 2 2 {tag} {tag} {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}")
    out.append("$EndElements")
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path


# === 介面 Γ ===
@dataclass
class InterfaceCurve:
    """Γ 的有向邊：法向量由 NONLOCAL 指向 LOCAL；loops 是每條封閉曲線的頂點序列。"""
    edges: np.ndarray      # (k, 2) 沿 loop 方向的頂點索引
    points: np.ndarray     # (k, 2, 2)
    normals: np.ndarray    # (k, 2)
    lengths: np.ndarray    # (k,)
    adjacent: np.ndarray   # (k, 2) (NONLOCAL 三角形, LOCAL 三角形)
    loops: tuple

    @property
    def length(self) -> float:
        return float(self.lengths.sum())

    @property
    def vertex_ids(self) -> np.ndarray:
        return np.unique(self.edges)

    @property
    def tangents(self) -> np.ndarray:
        d = self.points[:, 1] - self.points[:, 0]
        return d / self.lengths[:, None]


def derive_interface(mesh: LabeledMesh) -> InterfaceCurve:
    edges, edge_tris, _ = mesh._edge_table
    idx = np.flatnonzero(_is_interface_edge(mesh.labels, edge_tris[:, 0], edge_tris[:, 1]))
    if idx.size == 0:
        raise EmptyInterface("網格中沒有 LOCAL/NONLOCAL 共用邊")

    degree = np.bincount(edges[idx].ravel(), minlength=mesh.n_vertices)
    odd = np.flatnonzero(degree % 2 == 1)
    if odd.size:
        raise InterfaceNotClosed(f"介面不封閉：{odd.size} 個端點（例如頂點 {odd[:4].tolist()}）")

    incident = defaultdict(list)
    for e in idx:
        a, b = edges[e]
        incident[a].append(e)
        incident[b].append(e)
    used = set()
    oriented, loops = [], []
    for e0 in idx:
        if e0 in used:
            continue
        start, cur = edges[e0]
        used.add(e0)
        loop, chain = [start], [(e0, start, cur)]
        while cur != start:
            loop.append(cur)
            nxt = next(e for e in incident[cur] if e not in used)
            used.add(nxt)
            a, b = edges[nxt]
            prev, cur = cur, (b if a == cur else a)
            chain.append((nxt, prev, cur))
        loops.append(np.array(loop, dtype=np.int64))
        oriented.extend(chain)

    eids = np.array([c[0] for c in oriented])
    pq = np.array([[c[1], c[2]] for c in oriented], dtype=np.int64)
    pts = mesh.vertices[pq]
    d = pts[:, 1] - pts[:, 0]
    lengths = np.linalg.norm(d, axis=1)
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]
    ta, tb = edge_tris[eids, 0], edge_tris[eids, 1]
    nl_first = mesh.labels[ta] == Label.NONLOCAL
    adjacent = np.where(nl_first[:, None], np.column_stack([ta, tb]), np.column_stack([tb, ta]))
    toward_local = np.einsum("ij,ij->i", normals, mesh.centroids[adjacent[:, 1]] - mesh.centroids[adjacent[:, 0]])
    normals[toward_local < 0] *= -1.0
    return InterfaceCurve(edges=pq, points=pts, normals=normals, lengths=lengths,
                          adjacent=adjacent, loops=tuple(loops))


def interface_hausdorff(a: InterfaceCurve, b: InterfaceCurve) -> float:
    """兩條折線的 Hausdorff 距離（頂點對線段，雙向取最大）。"""
    def one_way(src: InterfaceCurve, dst: InterfaceCurve) -> float:
        p = src.points.reshape(-1, 2)[:, None, :]
        d = point_segment_distance(p, dst.points[None, :, 0], dst.points[None, :, 1])
        return float(d.min(axis=1).max())
    return max(one_way(a, b), one_way(b, a))


# === 交互作用配對 ===
def interaction_pairs(mesh: LabeledMesh, delta: float) -> np.ndarray:
    """(P, 2)：第一個是 NONLOCAL 三角形，第二個是任何距離 < δ 的三角形（含自身），依字典序排序。"""
    if delta <= 0:
        raise ValueError(f"δ 必須 > 0，收到 {delta}")
    nl = mesh.select(Label.NONLOCAL)
    if nl.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    radius = delta + 2.0 * mesh.max_centroid_radius
    cand = mesh.centroid_tree.query_ball_point(mesh.centroids[nl], radius)
    a = np.repeat(nl, [len(c) for c in cand])
    b = np.fromiter(itertools.chain.from_iterable(cand), dtype=np.int64, count=a.size)
    pts = mesh.vertices[mesh.triangles]
    keep = triangle_distance(pts[a], pts[b]) < delta
    pairs = np.column_stack([a[keep], b[keep]])
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    logger.debug("interaction pairs：%d 候選，保留 %d", a.size, int(keep.sum()))
    return pairs[order]


# === 點定位與內插 ===
@dataclass
class Location:
    triangles: np.ndarray    # (N,)
    barycentric: np.ndarray  # (N, 3)，可能是外插（線性延伸）
    distance: np.ndarray     # (N,) 到所屬三角形的距離，內部為 0


def _locate(mesh, points, subset, reach):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if subset is None:
        tree, ids, radius = mesh.centroid_tree, np.arange(mesh.n_triangles), mesh.max_centroid_radius
    else:
        ids = np.asarray(subset, dtype=np.int64)
        tree = cKDTree(mesh.centroids[ids])
        r = np.linalg.norm(mesh.vertices[mesh.triangles[ids]] - mesh.centroids[ids][:, None, :], axis=2)
        radius = float(r.max())
    n = points.shape[0]
    cand = tree.query_ball_point(points, radius + reach + SNAP_TOLERANCE)
    pid = np.repeat(np.arange(n), [len(c) for c in cand])
    tid = ids[np.fromiter(itertools.chain.from_iterable(cand), dtype=np.int64, count=pid.size)]

    tri = mesh.triangles[tid]
    xi = np.einsum("pij,pj->pi", mesh.jacobian_inverse[tid], points[pid] - mesh.vertices[tri[:, 0]])
    bary = np.column_stack([1.0 - xi.sum(axis=1), xi])
    inside = bary.min(axis=1) >= -SNAP_TOLERANCE
    corners = mesh.vertices[tri]
    edge_d = np.minimum.reduce([point_segment_distance(points[pid], corners[:, i], corners[:, (i + 1) % 3])
                                for i in range(3)])
    dist = np.where(inside, 0.0, edge_d)

    # 距離最小者優先，其次是最「內部」的三角形
    order = np.lexsort((tid, -bary.min(axis=1), dist, pid))
    first_pid, first = np.unique(pid[order], return_index=True)
    best = order[first]
    out_tri = np.full(n, -1, dtype=np.int64)
    out_bary = np.full((n, 3), np.nan)
    out_dist = np.full(n, np.inf)
    out_tri[first_pid] = tid[best]
    out_bary[first_pid] = bary[best]
    out_dist[first_pid] = dist[best]
    return Location(out_tri, out_bary, out_dist)


def locate(mesh: LabeledMesh, points: np.ndarray, subset: Optional[np.ndarray] = None,
           max_distance: float = SNAP_TOLERANCE) -> Location:
    loc = _locate(mesh, points, subset, max_distance)
    far = loc.distance > max_distance
    if far.any():
        k = int(np.flatnonzero(far)[0])
        raise OutOfDomain(f"{int(far.sum())} 個點不在網格內（例如 {np.atleast_2d(points)[k].tolist()}，"
                          f"距離 {loc.distance[k]:.3e} > {max_distance:.3e}）")
    return loc


def interpolate(source: LabeledMesh, values: np.ndarray, target: Union[LabeledMesh, np.ndarray],
                max_distance: float = SNAP_TOLERANCE, with_gradient: bool = False,
                subset: Optional[np.ndarray] = None):
    """把 source 上的連續 P1 節點值搬到 target 的頂點（或任意點）。

    網格外但距離 ≤ max_distance 的點用最近三角形的線性延伸；with_gradient 時另外回傳所在三角形的梯度。
    """
    points = target.vertices if isinstance(target, LabeledMesh) else np.asarray(target, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != source.n_vertices:
        raise ValueError(f"values 長度 {values.shape[0]} 與 source 頂點數 {source.n_vertices} 不符")
    loc = locate(source, points, subset=subset, max_distance=max_distance)
    nodal = values[source.triangles[loc.triangles]]
    out = np.einsum("ni,ni->n", loc.barycentric, nodal)
    if not with_gradient:
        return out
    grad = np.einsum("ni,nij->nj", nodal, source.basis_gradients[loc.triangles])
    return out, grad


# === 變形與品質 ===
def deform(mesh: LabeledMesh, direction: np.ndarray, alpha: float,
           area_ratio_min: float = AREA_RATIO_MIN) -> LabeledMesh:
    """頂點沿 α·direction 移動；三角形面積比 < area_ratio_min 或頂點離開 Ω 時丟 InvalidDeformation。"""
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != mesh.vertices.shape:
        raise ValueError(f"direction 形狀 {direction.shape} 應為 {mesh.vertices.shape}")
    if np.any(direction[mesh.fixed_vertices] != 0.0):
        raise ValueError("direction 在 ∂Ω 或外層頂點上必須為 0")
    moved = mesh.vertices + alpha * direction
    ratio = signed_areas(moved, mesh.triangles) / mesh.areas
    bad_tri = np.flatnonzero(ratio < area_ratio_min)

    active = np.flatnonzero(np.any(direction != 0.0, axis=1))
    bad_vert = np.zeros(0, dtype=np.int64)
    if active.size:
        loc = _locate(mesh, moved[active], mesh.select(Label.LOCAL, Label.NONLOCAL), 0.0)
        scale = 1e-12 * max(1.0, float(np.abs(mesh.vertices).max()))
        bad_vert = active[loc.distance > scale]
    report = InvalidityReport(triangles=bad_tri, vertices=bad_vert,
                              min_area_ratio=float(ratio.min()) if ratio.size else float("nan"))
    if not report.ok:
        raise InvalidDeformation(report)
    return mesh.with_vertices(moved)


@dataclass
class MeshQuality:
    min_angle: float         # degree
    min_area_ratio: float    # 4√3·A / Σl²，正三角形為 1

    def needs_remesh(self, min_angle_threshold: float) -> bool:
        return self.min_angle < min_angle_threshold


def triangle_angles(mesh: LabeledMesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles]
    angles = np.empty((mesh.n_triangles, 3))
    for i in range(3):
        v1 = p[:, (i + 1) % 3] - p[:, i]
        v2 = p[:, (i + 2) % 3] - p[:, i]
        cos_angle = np.einsum("ij,ij->i", v1, v2) / (np.linalg.norm(v1, axis=1) * np.linalg.norm(v2, axis=1))
        angles[:, i] = np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0)))
    return angles


def mesh_quality(mesh: LabeledMesh) -> MeshQuality:
    p = mesh.vertices[mesh.triangles]
    sq = sum(np.sum((p[:, (i + 1) % 3] - p[:, i]) ** 2, axis=1) for i in range(3))
    ratio = 4.0 * np.sqrt(3.0) * mesh.areas / sq
    return MeshQuality(min_angle=float(triangle_angles(mesh).min()), min_area_ratio=float(ratio.min()))


def exterior_layer_width(mesh: LabeledMesh) -> float:
    """∂Ω 到整個網格外邊界的最短距離；沒有外層時為 0。"""
    edges, edge_tris, _ = mesh._edge_table
    if mesh.count(Label.EXTERIOR) == 0:
        return 0.0
    t0, t1 = edge_tris[:, 0], edge_tris[:, 1]
    outer = edges[(t1 < 0) & (mesh.labels[t0] == Label.EXTERIOR)]
    inner = edges[_in_omega(mesh.labels, t0) != _in_omega(mesh.labels, t1)]
    if outer.size == 0 or inner.size == 0:
        return 0.0
    v = mesh.vertices

    def vert_to_edges(vids, segs):
        p = v[np.unique(vids)][:, None, :]
        return float(point_segment_distance(p, v[segs[:, 0]][None], v[segs[:, 1]][None]).min())

    return min(vert_to_edges(inner, outer), vert_to_edges(outer, inner))

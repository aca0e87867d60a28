from __future__ import annotations

from typing import Callable, Optional, Union

import numpy as np
import pytest

from kernels import gamma1, gamma2
from mesh_geometry import Label, LabeledMesh

Predicate = Callable[[np.ndarray], np.ndarray]


def circle_inclusion(center=(0.5, 0.5), radius: float = 0.25) -> Predicate:
    c = np.asarray(center, dtype=float)
    return lambda p: np.linalg.norm(p - c, axis=1) < radius


def square_inclusion(lo: float = 0.25, hi: float = 0.75) -> Predicate:
    return lambda p: np.all((p > lo) & (p < hi), axis=1)


def square_mesh(n: int = 8, layer: int = 1, nonlocal_: Optional[Predicate] = None,
                all_nonlocal: bool = False) -> LabeledMesh:
    """[0,1]² 的結構化網格，外圍 layer 格的 EXTERIOR；每格切成兩個三角形，依重心給標籤。"""
    h = 1.0 / n
    ticks = np.arange(-layer, n + layer + 1) * h
    m = ticks.size
    X, Y = np.meshgrid(ticks, ticks, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    vid = np.arange(m * m).reshape(m, m)
    a, b = vid[:-1, :-1].ravel(), vid[1:, :-1].ravel()
    c, d = vid[1:, 1:].ravel(), vid[:-1, 1:].ravel()
    triangles = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    centroids = vertices[triangles].mean(axis=1)
    inside = np.all((centroids > 0.0) & (centroids < 1.0), axis=1)
    labels = np.full(triangles.shape[0], int(Label.EXTERIOR))
    labels[inside] = int(Label.NONLOCAL) if all_nonlocal else int(Label.LOCAL)
    if nonlocal_ is not None and not all_nonlocal:
        labels[inside & nonlocal_(centroids)] = int(Label.NONLOCAL)
    return LabeledMesh(vertices, triangles, labels)


def polar_mesh(n_theta: int = 32, interface: Union[float, Callable] = 0.25, radius: float = 0.5,
               layer: float = 0.1, n_inner: int = 3, n_outer: int = 3, n_layer: int = 1,
               center=(0.5, 0.5)) -> LabeledMesh:
    """中心扇形 + 同心環：Γ 以內 NONLOCAL，Γ 到 radius 為 LOCAL，再往外是 EXTERIOR。

    interface 可以是常數半徑或 r(θ)。
    """
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    r_gamma = np.full(n_theta, float(interface)) if np.isscalar(interface) else np.asarray(interface(theta), dtype=float)
    rings = [r_gamma * k / n_inner for k in range(1, n_inner + 1)]
    rings += [r_gamma + (radius - r_gamma) * k / n_outer for k in range(1, n_outer + 1)]
    rings += [np.full(n_theta, radius + layer * k / n_layer) for k in range(1, n_layer + 1)]
    direction = np.column_stack([np.cos(theta), np.sin(theta)])
    vertices = [np.zeros((1, 2))] + [r[:, None] * direction for r in rings]
    vertices = np.concatenate(vertices) + np.asarray(center, dtype=float)

    def ring(k):
        return 1 + k * n_theta + np.arange(n_theta)

    j = np.arange(n_theta)
    jn = (j + 1) % n_theta
    first = ring(0)
    triangles = [np.column_stack([np.zeros(n_theta, dtype=int), first[j], first[jn]])]
    labels = [np.full(n_theta, int(Label.NONLOCAL))]
    for k in range(len(rings) - 1):
        a, b = ring(k), ring(k + 1)
        triangles += [np.column_stack([a[j], a[jn], b[jn]]), np.column_stack([a[j], b[jn], b[j]])]
        if k + 1 < n_inner:
            label = Label.NONLOCAL
        elif k + 1 < n_inner + n_outer:
            label = Label.LOCAL
        else:
            label = Label.EXTERIOR
        labels.append(np.full(2 * n_theta, int(label)))
    return LabeledMesh(vertices, np.concatenate(triangles), np.concatenate(labels))


def refine(mesh: LabeledMesh) -> LabeledMesh:
    """每個三角形切成四個（邊中點），標籤沿用。"""
    edges = mesh.edges
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    n = mesh.n_vertices
    te = mesh.triangle_edges + n   # 邊 (0,1), (1,2), (2,0) 的中點
    t = mesh.triangles
    children = [
        np.column_stack([t[:, 0], te[:, 0], te[:, 2]]),
        np.column_stack([te[:, 0], t[:, 1], te[:, 1]]),
        np.column_stack([te[:, 2], te[:, 1], t[:, 2]]),
        np.column_stack([te[:, 0], te[:, 1], te[:, 2]]),
    ]
    return LabeledMesh(np.concatenate([mesh.vertices, mids]), np.concatenate(children), np.tile(mesh.labels, 4))


def linear_data_mesh(lo: float = -1.0, hi: float = 2.0) -> LabeledMesh:
    """兩個三角形蓋住整個計算區域，用來放線性的 ū。"""
    vertices = np.array([[lo, lo], [hi, lo], [hi, hi], [lo, hi]])
    return LabeledMesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]), np.array([0, 0]))


@pytest.fixture
def small_square() -> LabeledMesh:
    return square_mesh(8, 1, square_inclusion())


@pytest.fixture
def circle_mesh() -> LabeledMesh:
    return polar_mesh(n_theta=128, interface=0.25, n_inner=2, n_outer=2)


@pytest.fixture(params=["gamma1", "gamma2"])
def kernel_factory(request):
    return {"gamma1": gamma1, "gamma2": gamma2}[request.param]

"""輸出入：場檔（float64 binary + JSON sidecar）、legacy VTK、CSV 表格。"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
import pandas as pd

from assembly_local import DofMap
from errors import ConfigError
from ltn_solver import BrokenField
from mesh_geometry import InterfaceCurve, Label, LabeledMesh

logger = logging.getLogger(__name__)

FIELD_FORMAT = "ltn-field"
FIELD_VERSION = 1
LAYOUTS = ("continuous", "broken")


def _paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".bin", ".json") else path
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def write_field(path: Union[str, Path], mesh: LabeledMesh, values: np.ndarray, layout: str = "continuous",
                meta: Optional[dict] = None) -> Path:
    """continuous：n 個頂點值；broken：[u_l 頂點值 | u_nl 頂點值]（不存在的一側為 NaN）。"""
    if layout not in LAYOUTS:
        raise ValueError(f"layout 必須是 {LAYOUTS} 之一")
    values = np.ascontiguousarray(values, dtype="<f8")
    expected = mesh.n_vertices * (1 if layout == "continuous" else 2)
    if values.size != expected:
        raise ValueError(f"{layout} 場的長度應為 {expected}，收到 {values.size}")
    bin_path, json_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    values.tofile(bin_path)
    sidecar = {
        "format": FIELD_FORMAT,
        "version": FIELD_VERSION,
        "dtype": "<f8",
        "layout": layout,
        "n_vertices": mesh.n_vertices,
        "count": int(values.size),
        "mesh_hash": mesh.hash,
        **(meta or {}),
    }
    json_path.write_text(json.dumps(sidecar, indent=2, ensure_ascii=False), encoding="utf-8")
    return bin_path


def read_field(path: Union[str, Path], mesh: Optional[LabeledMesh] = None) -> tuple[np.ndarray, dict]:
    bin_path, json_path = _paths(path)
    try:
        meta = json.loads(json_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"找不到場檔的 sidecar {json_path}") from None
    if meta.get("format") != FIELD_FORMAT:
        raise ConfigError(f"{json_path} 不是場檔 sidecar")
    values = np.fromfile(bin_path, dtype=meta.get("dtype", "<f8"))
    if values.size != meta["count"]:
        raise ConfigError(f"{bin_path} 有 {values.size} 個值，sidecar 記錄 {meta['count']}")
    if mesh is not None and meta.get("mesh_hash") != mesh.hash:
        raise ConfigError(f"場檔 {bin_path.name} 與網格不符（mesh hash 不同）")
    return values.astype(np.float64), meta


def write_broken_field(path: Union[str, Path], mesh: LabeledMesh, u: BrokenField, meta: Optional[dict] = None) -> Path:
    values = np.concatenate([u.local_nodal(), u.nonlocal_nodal()])
    return write_field(path, mesh, values, layout="broken", meta=meta)


def read_broken_field(path: Union[str, Path], mesh: LabeledMesh) -> BrokenField:
    values, meta = read_field(path, mesh)
    if meta["layout"] != "broken":
        raise ConfigError(f"{path} 不是 broken 場（layout={meta['layout']}）")
    dofmap = DofMap.from_mesh(mesh)
    n = mesh.n_vertices
    out = np.zeros(dofmap.n_total)
    for index, side in ((dofmap.local_index, values[:n]), (dofmap.nonlocal_index, values[n:])):
        has = index >= 0
        out[index[has]] = side[has]
    return BrokenField(dofmap, out)


# === VTK ===
def _point_layout(mesh):
    """Γ 兩側各一份點：回傳 (點的頂點編號, 點所屬側, 每個三角形的點編號)。"""
    side = np.where(mesh.labels == Label.LOCAL, 0, 1)
    keys = side[:, None] * mesh.n_vertices + mesh.triangles
    unique, inverse = np.unique(keys.ravel(), return_inverse=True)
    return unique % mesh.n_vertices, unique // mesh.n_vertices, inverse.reshape(-1, 3)


def _write_block(fh, array, fmt="%.17g"):
    np.savetxt(fh, array, fmt=fmt)


def write_vtk(path: Union[str, Path], mesh: LabeledMesh, broken: Optional[Mapping[str, BrokenField]] = None,
              nodal: Optional[Mapping[str, np.ndarray]] = None, title: str = "ltn output") -> Path:
    """legacy ASCII UNSTRUCTURED_GRID；broken 場在 Γ 兩側各有自己的點。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vertex, side, cells = _point_layout(mesh)
    n_pts, n_cells = vertex.size, mesh.n_triangles
    coords = np.column_stack([mesh.vertices[vertex], np.zeros(n_pts)])
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title.replace("\n", " ")[:255] + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n_pts} double\n")
        _write_block(fh, coords)
        fh.write(f"CELLS {n_cells} {4 * n_cells}\n")
        _write_block(fh, np.column_stack([np.full(n_cells, 3), cells]), fmt="%d")
        fh.write(f"CELL_TYPES {n_cells}\n")
        _write_block(fh, np.full(n_cells, 5), fmt="%d")
        fh.write(f"CELL_DATA {n_cells}\nSCALARS label int 1\nLOOKUP_TABLE default\n")
        _write_block(fh, mesh.labels.astype(int), fmt="%d")
        fh.write(f"POINT_DATA {n_pts}\n")
        fh.write("SCALARS side int 1\nLOOKUP_TABLE default\n")
        _write_block(fh, side, fmt="%d")
        for name, u in (broken or {}).items():
            index = np.where(side == 0, u.dofmap.local_index[vertex], u.dofmap.nonlocal_index[vertex])
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            _write_block(fh, u.values[index])
        for name, values in (nodal or {}).items():
            values = np.asarray(values, dtype=float)[vertex]
            if values.ndim == 1:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                _write_block(fh, values)
            else:
                fh.write(f"VECTORS {name} double\n")
                _write_block(fh, np.column_stack([values, np.zeros(n_pts)]))
    logger.debug("寫出 %s（%d 點、%d 三角形）", path, n_pts, n_cells)
    return path


# === CSV ===
def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def interface_frame(mesh: LabeledMesh, interface: InterfaceCurve) -> pd.DataFrame:
    rows = []
    for k, loop in enumerate(interface.loops):
        for order, vid in enumerate(loop):
            x, y = mesh.vertices[vid]
            rows.append({"loop": k, "order": order, "vertex": int(vid), "x": x, "y": y})
    return pd.DataFrame(rows, columns=["loop", "order", "vertex", "x", "y"])

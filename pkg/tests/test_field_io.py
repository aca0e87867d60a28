import json

import numpy as np
import pandas as pd
import pytest

from assembly_local import DofMap
from conftest import square_inclusion, square_mesh
from errors import ConfigError
from field_io import (
    interface_frame,
    read_broken_field,
    read_field,
    write_broken_field,
    write_field,
    write_table,
    write_vtk,
)
from ltn_solver import BrokenField
from mesh_geometry import derive_interface


def _broken(mesh) -> BrokenField:
    dm = DofMap.from_mesh(mesh)
    values = mesh.vertices[dm.vertex_of, 0] + np.where(dm.is_local, 0.0, 1.0)
    return BrokenField(dm, values)


def test_continuous_field_round_trip(tmp_path, small_square) -> None:
    values = np.sin(small_square.vertices[:, 0])
    path = write_field(tmp_path / "ubar", small_square, values, meta={"source": "test"})
    assert path.suffix == ".bin"
    assert path.stat().st_size == 8 * small_square.n_vertices
    loaded, meta = read_field(tmp_path / "ubar.json", small_square)
    assert np.array_equal(loaded, values)
    assert meta["layout"] == "continuous"
    assert meta["source"] == "test"
    assert meta["mesh_hash"] == small_square.hash


def test_field_for_another_mesh_is_rejected(tmp_path, small_square) -> None:
    write_field(tmp_path / "u.bin", small_square, np.zeros(small_square.n_vertices))
    other = square_mesh(6, 1, square_inclusion())
    with pytest.raises(ConfigError):
        read_field(tmp_path / "u.bin", other)
    values, _ = read_field(tmp_path / "u.bin")
    assert values.size == small_square.n_vertices


def test_corrupt_field_files(tmp_path, small_square) -> None:
    with pytest.raises(ValueError):
        write_field(tmp_path / "u", small_square, np.zeros(3))
    with pytest.raises(ValueError):
        write_field(tmp_path / "u", small_square, np.zeros(small_square.n_vertices), layout="dense")
    with pytest.raises(ConfigError):
        read_field(tmp_path / "missing.bin")
    write_field(tmp_path / "u", small_square, np.zeros(small_square.n_vertices))
    sidecar = tmp_path / "u.json"
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    sidecar.write_text(json.dumps({**meta, "count": 5}), encoding="utf-8")
    with pytest.raises(ConfigError):
        read_field(tmp_path / "u")
    sidecar.write_text(json.dumps({**meta, "format": "other"}), encoding="utf-8")
    with pytest.raises(ConfigError):
        read_field(tmp_path / "u")


def test_broken_field_round_trip(tmp_path, small_square) -> None:
    u = _broken(small_square)
    write_broken_field(tmp_path / "state", small_square, u)
    loaded = read_broken_field(tmp_path / "state", small_square)
    assert np.array_equal(loaded.values, u.values)
    write_field(tmp_path / "flat", small_square, np.zeros(small_square.n_vertices))
    with pytest.raises(ConfigError):
        read_broken_field(tmp_path / "flat", small_square)


def test_vtk_duplicates_interface_points(tmp_path, small_square) -> None:
    u = _broken(small_square)
    path = write_vtk(tmp_path / "out.vtk", small_square, broken={"u": u},
                     nodal={"x": small_square.vertices[:, 0], "V": small_square.vertices})
    lines = path.read_text(encoding="ascii").splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[3] == "DATASET UNSTRUCTURED_GRID"
    flags = small_square.vertex_flags
    both_sides = (flags.in_local & (flags.in_nonlocal | flags.in_exterior)).sum()
    n_pts = small_square.n_vertices + both_sides
    assert lines[4] == f"POINTS {n_pts} double"
    m = small_square.n_triangles
    assert f"CELLS {m} {4 * m}" in lines
    assert f"CELL_TYPES {m}" in lines
    assert "SCALARS u double 1" in lines
    assert "VECTORS V double" in lines
    start = lines.index("SCALARS u double 1") + 2
    u_values = np.array(lines[start:start + n_pts], dtype=float)
    start = lines.index("SCALARS side int 1") + 2
    side = np.array(lines[start:start + n_pts], dtype=int)
    # nonlocal 側的點都加了 1
    start = lines.index("SCALARS x double 1") + 2
    x = np.array(lines[start:start + n_pts], dtype=float)
    assert np.allclose(u_values - x, side)


def test_tables(tmp_path, small_square) -> None:
    frame = interface_frame(small_square, derive_interface(small_square))
    assert list(frame.columns) == ["loop", "order", "vertex", "x", "y"]
    assert len(frame) == 16
    assert frame["loop"].nunique() == 1
    path = write_table(frame, tmp_path / "tables" / "interface.csv")
    assert pd.read_csv(path).equals(frame)

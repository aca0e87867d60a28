import json

import numpy as np
import pandas as pd
import pytest

from conftest import square_inclusion, square_mesh
from field_io import read_broken_field, read_field
from ltn_cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from mesh_geometry import load_msh, save_msh


@pytest.fixture
def workspace(tmp_path):
    mesh = square_mesh(8, 1, square_inclusion())
    path = save_msh(mesh, tmp_path / "mesh.msh")
    return tmp_path, str(path), mesh


def _run(workspace, *args: str) -> int:
    tmp_path, mesh_path, _ = workspace
    return main([*args, "--mesh", mesh_path, "--output-dir", str(tmp_path / "out")])


def test_info_prints_mesh_summary(workspace, capsys) -> None:
    assert _run(workspace, "info") == EXIT_OK
    printed = capsys.readouterr().out
    assert "triangles: 200" in printed
    assert "delta_fits: True" in printed
    assert "kernel_checks: passed" in printed
    assert "kernel_mass:" in printed


def test_generate_data_writes_field_and_tables(workspace) -> None:
    tmp_path, _, mesh = workspace
    assert _run(workspace, "generate-data") == EXIT_OK
    out = tmp_path / "out"
    loaded = load_msh(tmp_path / "mesh.msh")
    ubar, meta = read_field(out / "ubar.bin", loaded)
    assert ubar.shape == (mesh.n_vertices,)
    assert meta["kernel"] == "gamma1"
    assert np.abs(ubar).max() > 0.0
    assert (out / "data.vtk").is_file()
    assert len(pd.read_csv(out / "data_interface.csv")) == 16


def test_solve_with_schwarz_and_adjoint(workspace) -> None:
    tmp_path, mesh_path, _ = workspace
    code = _run(workspace, "solve", "--method", "schwarz", "--adjoint", "--data-mesh", mesh_path,
                "--set", "solver.schwarz_maxiter=2000")
    assert code == EXIT_OK
    out = tmp_path / "out"
    residuals = pd.read_csv(out / "schwarz_residuals.csv")
    assert list(residuals.columns) == ["iteration", "residual"]
    mesh = load_msh(mesh_path)
    state = read_broken_field(out / "state.bin", mesh)
    adjoint = read_broken_field(out / "adjoint.bin", mesh)
    assert np.isfinite(state.values).all()
    assert np.all(adjoint.constrained == 0.0)
    table = pd.read_csv(out / "state.csv")
    assert list(table.columns) == ["vertex", "x", "y", "u_local", "u_nonlocal"]


def test_optimize_without_iterations(workspace) -> None:
    tmp_path, mesh_path, _ = workspace
    assert _run(workspace, "optimize", "--data-mesh", mesh_path, "--maxiter", "0",
                "--save-config", str(tmp_path / "used.json")) == EXIT_OK
    out = tmp_path / "out"
    history = (out / "history.csv").read_text(encoding="utf-8").splitlines()
    assert len(history) == 1
    assert history[0].startswith("iteration,objective")
    assert (out / "final.msh").is_file()
    assert (out / "checkpoint.json").is_file()
    assert json.loads((tmp_path / "used.json").read_text(encoding="utf-8"))["optimization"]["maxiter"] == 0


def test_check_derivative_writes_report(workspace) -> None:
    tmp_path, mesh_path, _ = workspace
    code = _run(workspace, "check-derivative", "--data-mesh", mesh_path, "--fields", "1", "--steps", "1e-4")
    assert code == EXIT_OK
    report = pd.read_csv(tmp_path / "out" / "fd_report.csv")
    assert list(report.columns) == ["field", "t", "derivative", "quotient", "rel_error"]
    assert len(report) == 1


@pytest.mark.parametrize("extra", [
    ["--set", "kernel.name=gamma9"],
    ["--set", "kernel.delta=0.5"],
    ["--set", "unknown=1"],
])
def test_configuration_problems_exit_with_config_code(workspace, extra) -> None:
    assert _run(workspace, "solve", *extra) == EXIT_CONFIG


def test_missing_mesh_is_a_config_error(tmp_path) -> None:
    assert main(["solve", "--mesh", str(tmp_path / "nope.msh"), "--output-dir", str(tmp_path)]) == EXIT_CONFIG


def test_solver_failure_exits_with_solver_code(workspace) -> None:
    code = _run(workspace, "solve", "--set", "solver.linear_solvers=[\"cg\"]", "--set", "solver.tol=1e-30")
    assert code == EXIT_SOLVER

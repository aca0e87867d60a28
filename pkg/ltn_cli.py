"""LtN 介面辨識的命令列入口：generate-data / solve / optimize / check-derivative / info。

用法：
    python ltn_cli.py generate-data --config run.json
    python ltn_cli.py optimize --config run.json --set optimization.maxiter=10
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from assembly_local import Forcing, make_field
from assembly_nonlocal import kernel_weight
from config import RunConfig, apply_overrides, load_config, load_environment, save_config
from errors import (
    AssemblyError,
    ConfigError,
    InterfaceMismatch,
    KernelError,
    MeshError,
    SolverError,
)
from field_io import interface_frame, read_field, write_broken_field, write_field, write_table, write_vtk
from kernels import get_kernel, validate_kernel
from ltn_solver import (
    assemble_monolithic,
    l2_norm,
    schwarz_additive,
    schwarz_multiplicative,
    solve_adjoint,
    solve_state,
)
from mesh_geometry import (
    Label,
    derive_interface,
    exterior_layer_width,
    interpolate,
    load_msh,
    mesh_quality,
    save_msh,
)
from optimizer import LbfgsMemory, OptState, optimize, restart, save_checkpoint
from shape_calculus import DataField, ShapeProblem, finite_difference_check, random_interface_field

logger = logging.getLogger("ltn_cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_STEP_FAILURE = 4
# 相對容差：δ 剛好等於外層寬度時不應被浮點誤差拒絕
LAYER_SLACK = 1e-9


# === 共用：讀設定、網格、問題資料 ===
def _load_mesh(config, path, kernel):
    if path is None:
        raise ConfigError("缺少網格路徑（mesh / data_mesh）")
    if not Path(path).is_file():
        raise ConfigError(f"網格檔不存在：{path}")
    mesh = load_msh(path, config.label_map)
    width = exterior_layer_width(mesh)
    if kernel.delta > width * (1.0 + LAYER_SLACK):
        raise ConfigError(f"kernel.delta={kernel.delta} 大於 {path} 的外層寬度 {width:.6g}")
    return mesh


def _kernel(config):
    return get_kernel(config.kernel.name, config.kernel.delta)


def _forcing(config):
    return Forcing.from_spec(config.forcing.local, config.forcing.nonlocal_)


def _assemble(config, mesh, kernel, forcing=None):
    return assemble_monolithic(
        mesh, kernel, forcing or _forcing(config),
        volume_constraint=make_field(config.volume_constraint),
        degree=config.quadrature.degree, pair_degree=config.quadrature.pair_degree,
        methods=tuple(config.solver.linear_solvers), tol=config.solver.tol,
    )


def _rng(config):
    return np.random.default_rng(config.seed if config.deterministic else None)


def _output_dir(config):
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _problem(config, kernel, data):
    return ShapeProblem(
        data=data, kernel=kernel, forcing=_forcing(config), nu=config.optimization.nu,
        volume_constraint=make_field(config.volume_constraint),
        degree=config.quadrature.degree, pair_degree=config.quadrature.pair_degree,
        solver_methods=tuple(config.solver.linear_solvers), solver_tol=config.solver.tol,
    )


def _data_field(config, kernel):
    """ū：有 data_field 就讀檔，否則在 data_mesh 上解正問題產生。"""
    data_mesh = _load_mesh(config, config.data_mesh, kernel)
    if config.data_field is not None:
        values, meta = read_field(config.data_field, data_mesh)
        if meta["layout"] != "continuous":
            raise ConfigError(f"data_field 應為連續場，收到 layout={meta['layout']}")
        return DataField(data_mesh, values)
    derive_interface(data_mesh)
    u = solve_state(_assemble(config, data_mesh, kernel))
    return DataField(data_mesh, u.to_continuous())


# === 子命令 ===
def cmd_generate_data(config: RunConfig) -> dict:
    kernel = _kernel(config)
    mesh = _load_mesh(config, config.data_mesh or config.mesh, kernel)
    interface = derive_interface(mesh)
    system = _assemble(config, mesh, kernel)
    u = solve_state(system)
    out = _output_dir(config)
    ubar = u.to_continuous()
    outputs = {
        "ubar": write_field(out / "ubar.bin", mesh, ubar, meta={"kernel": kernel.name, "delta": kernel.delta}),
        "state": write_broken_field(out / "state_data.bin", mesh, u),
        "vtk": write_vtk(out / "data.vtk", mesh, broken={"u": u}, nodal={"ubar": ubar}, title="ltn data"),
        "interface": write_table(interface_frame(mesh, interface), out / "data_interface.csv"),
    }
    logger.info("資料已產生：‖ū‖_L2=%.6e，Γ 長度 %.6f", l2_norm(u, system), interface.length)
    return outputs


def cmd_solve(config: RunConfig, method: Optional[str] = None, adjoint: bool = False) -> dict:
    kernel = _kernel(config)
    mesh = _load_mesh(config, config.mesh, kernel)
    method = method or config.solver.method
    system = _assemble(config, mesh, kernel)
    out = _output_dir(config)
    outputs = {}
    if method == "monolithic":
        u = solve_state(system)
    else:
        runner = schwarz_additive if method == "schwarz-additive" else schwarz_multiplicative
        u, report = runner(system, tol=config.solver.schwarz_tol, maxiter=config.solver.schwarz_maxiter)
        outputs["schwarz"] = write_table(report.to_frame(), out / "schwarz_residuals.csv")
        if not report.converged:
            raise SolverError(f"{method} Schwarz 在 {report.iterations} 次內未收斂")
    broken = {"u": u}
    if adjoint:
        data = _data_field(config, kernel)
        ubar = interpolate(data.mesh, data.values, mesh, max_distance=kernel.delta)
        broken["v"] = solve_adjoint(system, u, ubar)
        outputs["adjoint"] = write_broken_field(out / "adjoint.bin", mesh, broken["v"])
    outputs["state"] = write_broken_field(out / "state.bin", mesh, u)
    outputs["vtk"] = write_vtk(out / "state.vtk", mesh, broken=broken, title=f"ltn state ({method})")
    nodal = pd.DataFrame({
        "vertex": np.arange(mesh.n_vertices),
        "x": mesh.vertices[:, 0],
        "y": mesh.vertices[:, 1],
        "u_local": u.local_nodal(),
        "u_nonlocal": u.nonlocal_nodal(),
    })
    outputs["csv"] = write_table(nodal, out / "state.csv")
    logger.info("state（%s）：‖u‖_L2=%.6e", method, l2_norm(u, system))
    return outputs


def cmd_optimize(config: RunConfig, checkpoint: Optional[str] = None, restart_from: Optional[str] = None) -> tuple[dict, str]:
    kernel = _kernel(config)
    mesh = _load_mesh(config, config.mesh, kernel)
    derive_interface(mesh)
    problem = _problem(config, kernel, _data_field(config, kernel))
    out = _output_dir(config)
    if restart_from is not None:
        state = restart(restart_from, mesh)
    else:
        state = OptState(mesh=mesh, memory=LbfgsMemory(config.optimization.memory), seed=config.seed)
    vtk_dir = out / "iterations"

    def write_iteration(st: OptState, ev, grad):
        if config.vtk_every > 0 and st.iteration % config.vtk_every == 0:
            write_vtk(vtk_dir / f"iter_{st.iteration:03d}.vtk", ev.mesh, broken={"u": ev.state},
                      nodal={"ubar": ev.ubar, "gradient": grad}, title=f"iteration {st.iteration}")

    ckpt = Path(checkpoint) if checkpoint else out / "checkpoint.json"
    result = optimize(state.mesh, problem, config.optimization,
                      state=state, checkpoint_path=ckpt, callback=write_iteration)
    final = result.mesh
    outputs = {
        "history": write_table(result.history.to_frame(), out / "history.csv"),
        "mesh": save_msh(final, out / "final.msh"),
        "interface": write_table(interface_frame(final, derive_interface(final)), out / "interface.csv"),
        "checkpoint": save_checkpoint(result.state, ckpt),
    }
    if result.remesh_recommended:
        logger.warning("建議重新網格化後以 --restart %s 繼續", ckpt)
    return outputs, result.status


def cmd_check_derivative(config: RunConfig) -> dict:
    kernel = _kernel(config)
    mesh = _load_mesh(config, config.mesh, kernel)
    problem = _problem(config, kernel, _data_field(config, kernel))
    rng = _rng(config)
    fields = [random_interface_field(mesh, rng, n_bumps=config.check.bumps) for _ in range(config.check.fields)]
    report = finite_difference_check(problem, mesh, fields, config.check.steps)
    out = _output_dir(config)
    smallest = report[report["t"] == min(config.check.steps)]
    logger.info("最小 t 的最大相對誤差：%.3e", float(smallest["rel_error"].max()))
    return {"report": write_table(report, out / "fd_report.csv")}


def cmd_info(config: RunConfig) -> dict:
    kernel = _kernel(config)
    path = config.mesh or config.data_mesh
    if path is None:
        raise ConfigError("info 需要 --mesh 或 --data-mesh")
    mesh = load_msh(path, config.label_map)
    quality = mesh_quality(mesh)
    width = exterior_layer_width(mesh)
    info = {
        "vertices": mesh.n_vertices,
        "triangles": mesh.n_triangles,
        **{label.name.lower(): mesh.count(label) for label in Label},
        "h_min": mesh.h_min,
        "h_max": mesh.h_max,
        "min_angle": quality.min_angle,
        "min_area_ratio": quality.min_area_ratio,
        "layer_width": width,
        "delta": kernel.delta,
        "delta_fits": kernel.delta <= width * (1.0 + LAYER_SLACK),
    }
    if mesh.count(Label.LOCAL) and mesh.count(Label.NONLOCAL):
        interface = derive_interface(mesh)
        info["interface_length"] = interface.length
        info["interface_loops"] = len(interface.loops)
    if mesh.count(Label.NONLOCAL):
        # ∫ γ(x, y) dy 在 nonlocal 區重心；球整個落在網格內時應等於 4/δ²（γ₁）
        centre = mesh.centroids[mesh.select(Label.NONLOCAL)].mean(axis=0)[None]
        info["kernel_mass"] = sum(float(kernel_weight(mesh, kernel, centre, label)[0]) for label in Label)
    report = validate_kernel(kernel, seed=config.seed)
    info["kernel_checks"] = "passed" if report.passed else "failed: " + ", ".join(report.failures())
    for key, value in info.items():
        print(f"{key:>18}: {value}")
    return info


# === argparse ===
def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="ltn", description="Local-to-Nonlocal 介面辨識")
    parser.add_argument("-v", "--verbose", action="store_true", help="輸出 DEBUG 紀錄")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="JSON 設定檔")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆寫設定，例如 kernel.delta=0.05")
        p.add_argument("--output-dir")
        p.add_argument("--mesh")
        p.add_argument("--data-mesh")
        p.add_argument("--data-field")
        p.add_argument("--save-config", help="把最終設定寫到這個路徑")
        return p

    common(sub.add_parser("generate-data", help="在資料網格上解正問題並輸出 ū"))
    solve = common(sub.add_parser("solve", help="解 state（可選 adjoint）"))
    solve.add_argument("--method", choices=("monolithic", "schwarz", "schwarz-additive"))
    solve.add_argument("--adjoint", action="store_true")
    opt = common(sub.add_parser("optimize", help="形狀最佳化"))
    opt.add_argument("--maxiter", type=int)
    opt.add_argument("--checkpoint")
    opt.add_argument("--restart", help="從 checkpoint 在 --mesh 上繼續")
    check = common(sub.add_parser("check-derivative", help="形狀導數的有限差分檢查"))
    check.add_argument("--steps", type=float, nargs="+")
    check.add_argument("--fields", type=int)
    common(sub.add_parser("info", help="網格與核函數摘要"))
    return parser.parse_args(argv)


FLAG_KEYS = {
    "output_dir": "output_dir",
    "mesh": "mesh",
    "data_mesh": "data_mesh",
    "data_field": "data_field",
    "maxiter": "optimization.maxiter",
    "fields": "check.fields",
    "steps": "check.steps",
}


def _config_from_args(args):
    """設定檔 < 專用旗標 < --set。"""
    config = load_config(args.config)
    overrides = [f"{key}={json.dumps(getattr(args, flag))}" for flag, key in FLAG_KEYS.items()
                 if getattr(args, flag, None) is not None]
    return apply_overrides(config, overrides + list(args.set)).validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        load_environment()
        config = _config_from_args(args)
        if args.save_config:
            save_config(config, args.save_config)
        if args.command == "generate-data":
            cmd_generate_data(config)
        elif args.command == "solve":
            cmd_solve(config, args.method, args.adjoint)
        elif args.command == "optimize":
            _, status = cmd_optimize(config, args.checkpoint, args.restart)
            if status == "step_failure":
                logger.error("line search 失敗，最佳化中止")
                return EXIT_STEP_FAILURE
        elif args.command == "check-derivative":
            cmd_check_derivative(config)
        else:
            cmd_info(config)
    except (ConfigError, MeshError, KernelError, InterfaceMismatch, AssemblyError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONFIG
    except SolverError as exc:
        logger.error("求解失敗：%s", exc)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

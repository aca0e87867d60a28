import numpy as np
import pytest

from assembly_local import Forcing
from conftest import linear_data_mesh, polar_mesh
from errors import AssemblyError, ConfigError, InterfaceMismatch, InvalidDeformation, InvalidityReport, StepFailure
from kernels import gamma1
from ltn_solver import assemble_monolithic, solve_state
from mesh_geometry import deform, derive_interface, exterior_layer_width, interface_hausdorff
from optimizer import (
    LbfgsMemory,
    OptConfig,
    OptHistory,
    OptState,
    backtracking,
    initial_step,
    lbfgs_direction,
    load_checkpoint,
    optimize,
    restart,
    save_checkpoint,
)
from shape_calculus import DataField, ShapeProblem, random_interface_field

FORCING = Forcing.from_spec(-10.0, 10.0)


def _small_problem() -> tuple:
    mesh = polar_mesh(n_theta=12, interface=lambda t: 0.25 * (1.0 + 0.1 * np.cos(t)), n_inner=2, n_outer=2,
                      layer=0.2)
    data_mesh = linear_data_mesh()
    data = DataField(data_mesh, 0.3 * data_mesh.vertices[:, 0] - 0.2 * data_mesh.vertices[:, 1])
    return mesh, ShapeProblem(data, gamma1(0.15), FORCING, nu=1e-2)


# === L-BFGS ===
def test_empty_memory_gives_steepest_descent() -> None:
    g = np.array([[1.0, -2.0], [0.5, 0.0]])
    d, kind = lbfgs_direction(LbfgsMemory(5), g)
    assert kind == "steepest"
    assert np.array_equal(d, -g)


def test_single_pair_inverts_the_secant() -> None:
    memory = LbfgsMemory(3)
    s = np.array([1.0, 2.0, -1.0])
    y = np.array([2.0, 3.0, 0.5])
    assert memory.push(s, y)
    d, kind = lbfgs_direction(memory, y)
    assert kind == "lbfgs"
    assert np.allclose(d, -s)


def test_quadratic_model_is_recovered() -> None:
    A = np.diag([1.0, 4.0, 9.0])
    memory = LbfgsMemory(3)
    for e in np.eye(3):
        memory.push(e, A @ e)
    g = np.array([1.0, 1.0, 1.0])
    d, _ = lbfgs_direction(memory, g)
    assert np.allclose(d, -np.linalg.solve(A, g))


def test_memory_rejects_non_positive_curvature_and_is_bounded() -> None:
    memory = LbfgsMemory(2)
    assert not memory.push(np.ones(2), -np.ones(2))
    assert not memory.push(np.ones(2), np.array([1.0, -1.0]))
    for k in range(1, 5):
        assert memory.push(k * np.ones(2), np.ones(2))
    assert len(memory) == 2
    assert memory.pairs[0][0][0] == 3.0
    disabled = LbfgsMemory(0)
    assert not disabled.push(np.ones(2), np.ones(2))
    assert len(disabled) == 0


# === line search ===
def test_backtracking_accepts_first_armijo_step() -> None:
    result = backtracking(lambda a: ((1.0 - a) ** 2, a), phi0=1.0, slope=-2.0, alpha0=4.0)
    assert result.alpha == 1.0
    assert result.trials == 3
    assert result.value <= 1.0 + 1e-4 * result.alpha * -2.0
    assert result.payload == 1.0


def test_backtracking_treats_invalid_meshes_as_rejections() -> None:
    def phi(alpha):
        if alpha > 0.3:
            raise InvalidDeformation(InvalidityReport(triangles=np.array([0])))
        return 1.0 - alpha, None

    result = backtracking(phi, phi0=1.0, slope=-1.0, alpha0=1.0)
    assert result.alpha == 0.25
    assert result.trials == 3


def test_backtracking_failure_modes() -> None:
    with pytest.raises(StepFailure):
        backtracking(lambda a: (1.0, None), phi0=1.0, slope=-1.0, alpha0=1.0, alpha_min=1e-3)
    with pytest.raises(ValueError):
        backtracking(lambda a: (0.0, None), phi0=1.0, slope=0.0, alpha0=1.0)


def test_initial_step_is_limited_by_mesh_size() -> None:
    mesh, _ = _small_problem()
    config = OptConfig(alpha_max=10.0, alpha_fraction=0.5)
    direction = np.zeros_like(mesh.vertices)
    assert initial_step(mesh, direction, config) == 10.0
    direction[0] = [2.0, 0.0]
    assert initial_step(mesh, direction, config) == pytest.approx(0.25 * mesh.h_min)


def test_history_helpers() -> None:
    history = OptHistory()
    history.append(iteration=0, objective=1.0, slope=-1.0, alpha=0.5, status="accepted")
    history.append(iteration=1, objective=0.9, slope=-0.1, alpha=0.5, status="accepted")
    history.append(iteration=2, objective=0.89, status="maxiter")
    assert history.is_monotone()
    assert history.satisfies_armijo(1e-4)
    assert not history.satisfies_armijo(0.5)
    assert list(history.accepted()["iteration"]) == [0, 1]
    assert list(history.to_frame().columns)[:2] == ["iteration", "objective"]


def test_config_validation() -> None:
    with pytest.raises(ConfigError):
        OptConfig(tau=1.5).validate()
    with pytest.raises(ConfigError):
        OptConfig(mu_min=2.0, mu_max=1.0).validate()
    assert OptConfig().validate().memory == 5


# === 外迴圈 ===
def test_zero_iterations_leave_empty_history() -> None:
    mesh, problem = _small_problem()
    result = optimize(mesh, problem, OptConfig(maxiter=0))
    assert result.status == "maxiter"
    assert len(result.history) == 0
    assert result.mesh is mesh


def test_loose_tolerance_converges_immediately() -> None:
    mesh, problem = _small_problem()
    result = optimize(mesh, problem, OptConfig(tol=1e6))
    assert result.status == "converged"
    assert len(result.history) == 1
    assert result.history.rows[0]["status"] == "converged"
    assert result.gradient.shape == mesh.vertices.shape


def test_two_iterations_decrease_objective_and_write_checkpoint(tmp_path) -> None:
    mesh, problem = _small_problem()
    seen = []
    path = tmp_path / "checkpoint.json"
    result = optimize(mesh, problem, OptConfig(maxiter=2, nu=1e-2), checkpoint_path=path,
                      callback=lambda state, ev, grad: seen.append(state.iteration))
    assert result.status == "maxiter"
    assert seen == [0, 1]
    assert len(result.history) == 3
    assert result.history.is_monotone()
    assert result.history.satisfies_armijo(1e-4)
    assert np.all(result.mesh.vertices[mesh.fixed_vertices] == mesh.vertices[mesh.fixed_vertices])
    state = load_checkpoint(path)
    assert state.iteration == 2
    assert state.mesh.hash == result.mesh.hash


def test_horizon_fits_inside_exterior_layer() -> None:
    mesh, problem = _small_problem()
    assert exterior_layer_width(mesh) >= problem.kernel.delta


def test_assembly_error_during_line_search_propagates(monkeypatch) -> None:
    mesh, problem = _small_problem()
    evaluate = problem.evaluate
    calls = []

    def failing(m, *args, **kwargs):
        calls.append(m)
        if len(calls) > 1:
            raise AssemblyError("配對區塊組裝失敗")
        return evaluate(m, *args, **kwargs)

    monkeypatch.setattr(problem, "evaluate", failing)
    with pytest.raises(AssemblyError):
        optimize(mesh, problem, OptConfig(maxiter=1, nu=1e-2))
    assert len(calls) == 2


# === checkpoint / restart ===
def _state_with_memory(mesh) -> OptState:
    memory = LbfgsMemory(4)
    s = np.ones_like(mesh.vertices)
    memory.push(s, 2.0 * s)
    history = OptHistory()
    history.append(iteration=0, objective=1.5, slope=-0.2, alpha=0.1, status="accepted")
    return OptState(mesh=mesh, iteration=1, memory=memory, history=history, last_step=s, last_gradient=-s, seed=42)


def test_checkpoint_round_trip(tmp_path) -> None:
    mesh, _ = _small_problem()
    state = _state_with_memory(mesh)
    loaded = load_checkpoint(save_checkpoint(state, tmp_path / "ck.json"))
    assert loaded.mesh.hash == mesh.hash
    assert loaded.iteration == 1
    assert loaded.seed == 42
    assert loaded.memory.size == 4
    assert len(loaded.memory) == 1
    assert np.array_equal(loaded.memory.pairs[0][1], 2.0 * np.ones_like(mesh.vertices))
    assert np.array_equal(loaded.last_gradient, -np.ones_like(mesh.vertices))
    assert loaded.history.rows == state.history.rows


def test_bad_checkpoint_is_a_config_error(tmp_path) -> None:
    path = tmp_path / "ck.json"
    path.write_text('{"format": "something-else", "version": 1}', encoding="utf-8")
    with pytest.raises(ConfigError):
        load_checkpoint(path)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.json")


def test_restart_keeps_memory_only_for_the_same_mesh(tmp_path) -> None:
    mesh, _ = _small_problem()
    path = save_checkpoint(_state_with_memory(mesh), tmp_path / "ck.json")
    same = restart(path, mesh)
    assert len(same.memory) == 1
    assert same.last_step is not None

    field = random_interface_field(mesh, np.random.default_rng(0), amplitude=1.0)
    moved = deform(mesh, field, 1e-3)
    other = restart(path, moved)
    assert len(other.memory) == 0
    assert other.last_step is None and other.last_gradient is None
    assert other.mesh is moved
    assert other.iteration == 1


def test_restart_rejects_a_distant_interface(tmp_path) -> None:
    mesh = polar_mesh(n_theta=32, interface=0.25)
    path = save_checkpoint(OptState(mesh=mesh), tmp_path / "ck.json")
    with pytest.raises(InterfaceMismatch):
        restart(path, polar_mesh(n_theta=32, interface=0.1))


@pytest.mark.slow
def test_circle_is_recovered_from_a_perturbed_start() -> None:
    kernel = gamma1(0.09)
    target = polar_mesh(n_theta=32, interface=0.25)
    ubar = solve_state(assemble_monolithic(target, kernel, FORCING)).to_continuous()
    problem = ShapeProblem(DataField(target, ubar), kernel, FORCING, nu=1e-4)
    start = polar_mesh(n_theta=32, interface=lambda t: 0.2 * (1.0 + 0.15 * np.cos(3.0 * t)))
    result = optimize(start, problem, OptConfig(maxiter=15, nu=1e-4))
    assert result.status in ("maxiter", "converged")
    assert result.history.is_monotone()
    assert result.history.satisfies_armijo(1e-4)
    frame = result.history.to_frame()
    assert frame["objective"].iloc[-1] < 0.5 * frame["objective"].iloc[0]
    before = interface_hausdorff(derive_interface(start), derive_interface(target))
    after = interface_hausdorff(derive_interface(result.mesh), derive_interface(target))
    assert after < before

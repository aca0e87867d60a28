import json

import pytest

from config import RunConfig, apply_overrides, load_config, load_environment, save_config
from errors import ConfigError


def test_defaults_validate() -> None:
    config = RunConfig().validate()
    assert config.kernel.name == "gamma1"
    assert config.forcing.local == -10.0
    assert config.solver.linear_solvers == ["direct", "cg"]
    assert config.optimization.memory == 5


def test_save_and_load_round_trip(tmp_path) -> None:
    config = apply_overrides(RunConfig(), ["kernel.name=gamma2", "kernel.delta=0.05", "forcing.nonlocal=x1"])
    path = save_config(config, tmp_path / "run.json")
    doc = json.loads(path.read_text(encoding="utf-8"))
    assert doc["forcing"]["nonlocal"] == "x1"
    assert "nonlocal_" not in doc["forcing"]
    loaded = load_config(path)
    assert loaded == config
    assert loaded.kernel.delta == 0.05


def test_unknown_keys_are_rejected(tmp_path) -> None:
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"kernel": {"name": "gamma1", "width": 3}}), encoding="utf-8")
    with pytest.raises(ConfigError, match="kernel.width"):
        load_config(path)
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["solver.nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["kernel.delta"])


def test_overrides_parse_json_then_fall_back_to_strings() -> None:
    config = apply_overrides(RunConfig(), [
        "optimization.maxiter=3",
        "solver.linear_solvers=[\"cg\"]",
        "volume_constraint=radial2",
        "deterministic=false",
    ])
    assert config.optimization.maxiter == 3
    assert config.solver.linear_solvers == ["cg"]
    assert config.volume_constraint == "radial2"
    assert config.deterministic is False


@pytest.mark.parametrize("override", [
    "kernel.name=gamma9",
    "kernel.delta=-0.1",
    "quadrature.degree=0",
    "solver.method=gmres",
    "solver.linear_solvers=[\"lu\"]",
    "check.steps=[]",
    "forcing.local=cosh",
    "label_map={\"1\": \"interior\"}",
    "optimization.tau=2.0",
])
def test_validation_errors(override: str) -> None:
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), [override]).validate()


def test_type_errors() -> None:
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": "zero"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"deterministic": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"kernel": [1, 2]})


@pytest.mark.parametrize("override", ["solver.tol=abc", "kernel.delta=\"0.1\"", "optimization.nu=small"])
def test_plain_float_fields_reject_strings(override: str) -> None:
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), [override])


def test_named_fields_still_accept_strings() -> None:
    config = apply_overrides(RunConfig(), ["forcing.local=x1", "forcing.nonlocal=0.5"])
    assert config.forcing.local == "x1"
    assert config.forcing.nonlocal_ == 0.5
    assert config.validate() is config


def test_broken_json_is_reported(tmp_path) -> None:
    path = tmp_path / "run.json"
    path.write_text("{\"kernel\": ", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_require_files(tmp_path) -> None:
    mesh = tmp_path / "a.msh"
    mesh.write_text("", encoding="utf-8")
    config = RunConfig(mesh=str(mesh))
    assert config.require_files("mesh") is config
    with pytest.raises(ConfigError):
        config.require_files("data_mesh")


def test_environment_from_dotenv(tmp_path, monkeypatch) -> None:
    monkeypatch.delenv("LTN_NUM_THREADS", raising=False)
    env = tmp_path / ".env"
    env.write_text("LTN_NUM_THREADS=3\n", encoding="utf-8")
    assert load_environment(env) == 3
    monkeypatch.setenv("LTN_NUM_THREADS", "2")
    assert load_environment(env) == 2
    monkeypatch.setenv("LTN_NUM_THREADS", "0")
    with pytest.raises(ConfigError):
        load_environment(env)

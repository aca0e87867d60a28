"""執行設定：JSON 文件 ↔ dataclass，外加 .env 的執行緒數。"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional, Union

from dotenv import load_dotenv

from assembly_local import make_field
from errors import ConfigError
from kernels import KERNELS
from mesh_geometry import normalize_label_map
from optimizer import OptConfig

logger = logging.getLogger(__name__)

SOLVE_METHODS = ("monolithic", "schwarz", "schwarz-additive")
LINEAR_SOLVERS = ("direct", "cg")
# JSON 鍵 → Python 欄位名
ALIASES = {"nonlocal": "nonlocal_"}
REVERSE_ALIASES = {v: k for k, v in ALIASES.items()}


@dataclass
class KernelSpec:
    name: str = "gamma1"
    delta: float = 0.1


@dataclass
class ForcingSpec:
    local: Union[float, str] = -10.0
    nonlocal_: Union[float, str] = 10.0


@dataclass
class QuadratureSpec:
    degree: int = 5
    pair_degree: int = 5


@dataclass
class SolverSpec:
    method: str = "monolithic"
    tol: float = 1e-10
    linear_solvers: list = field(default_factory=lambda: list(LINEAR_SOLVERS))
    schwarz_tol: float = 1e-10
    schwarz_maxiter: int = 200


@dataclass
class CheckSpec:
    steps: list = field(default_factory=lambda: [1e-3, 1e-4, 1e-5])
    fields: int = 5
    bumps: int = 3


@dataclass
class RunConfig:
    mesh: Optional[str] = None
    data_mesh: Optional[str] = None
    data_field: Optional[str] = None
    label_map: dict = field(default_factory=lambda: {"1": "local", "2": "nonlocal", "3": "exterior"})
    kernel: KernelSpec = field(default_factory=KernelSpec)
    forcing: ForcingSpec = field(default_factory=ForcingSpec)
    volume_constraint: Union[float, str] = "zero"
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    optimization: OptConfig = field(default_factory=OptConfig)
    check: CheckSpec = field(default_factory=CheckSpec)
    output_dir: str = "output"
    seed: int = 0
    deterministic: bool = True
    vtk_every: int = 1

    # --- 序列化 ---
    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "")

    def to_dict(self) -> dict:
        return _dump(self)

    def validate(self) -> "RunConfig":
        if self.kernel.name not in KERNELS:
            raise ConfigError(f"kernel.name={self.kernel.name!r} 不在 {sorted(KERNELS)} 中")
        if not self.kernel.delta > 0:
            raise ConfigError(f"kernel.delta 必須 > 0，收到 {self.kernel.delta}")
        for key in ("degree", "pair_degree"):
            if getattr(self.quadrature, key) < 1:
                raise ConfigError(f"quadrature.{key} 必須 >= 1")
        if self.solver.method not in SOLVE_METHODS:
            raise ConfigError(f"solver.method={self.solver.method!r} 不在 {SOLVE_METHODS} 中")
        unknown = set(self.solver.linear_solvers) - set(LINEAR_SOLVERS)
        if unknown or not self.solver.linear_solvers:
            raise ConfigError(f"solver.linear_solvers 含有未知的方法 {sorted(unknown)}")
        if not (self.solver.tol > 0 and self.solver.schwarz_tol > 0 and self.solver.schwarz_maxiter > 0):
            raise ConfigError("solver 的 tol / schwarz_tol / schwarz_maxiter 必須 > 0")
        if not self.check.steps or any(t <= 0 for t in self.check.steps) or self.check.fields < 1:
            raise ConfigError("check.steps 須為正數列表且 check.fields >= 1")
        make_field(self.forcing.local)
        make_field(self.forcing.nonlocal_)
        make_field(self.volume_constraint)
        try:
            normalize_label_map(self.label_map)
        except ValueError as exc:
            raise ConfigError(f"label_map 錯誤：{exc}") from exc
        self.optimization.validate()
        return self

    def require_files(self, *keys: str) -> "RunConfig":
        """確認 keys 指到的檔案都存在。"""
        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise ConfigError(f"缺少必要欄位 {key}")
            if not Path(value).is_file():
                raise ConfigError(f"{key} 指定的檔案不存在：{value}")
        return self


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or '設定'} 應為 JSON object，收到 {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for raw_key, value in data.items():
        key = ALIASES.get(raw_key, raw_key)
        path = f"{where}.{raw_key}" if where else raw_key
        if key not in known:
            raise ConfigError(f"未知的設定鍵 {path!r}")
        f = known[key]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        # 只有 Union[float, str] 的欄位（forcing、volume_constraint）接受具名場字串
        kwargs[key] = _coerce(default, value, path, named_field="str" in str(f.type))
    return cls(**kwargs)


def _coerce(default, value, path, named_field=False):
    if is_dataclass(default):
        return _build(type(default), value, path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} 應為 true/false，收到 {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} 應為整數，收到 {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str) and named_field:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} 應為數字，收到 {value!r}")
        return float(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{path} 應為 list，收到 {value!r}")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"{path} 應為 object，收到 {value!r}")
    return value


def _dump(obj):
    if is_dataclass(obj):
        return {REVERSE_ALIASES.get(f.name, f.name): _dump(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, list):
        return [_dump(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _dump(v) for k, v in obj.items()}
    return obj


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"找不到設定檔 {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"設定檔 {path} 不是合法 JSON：第 {exc.lineno} 行 {exc.msg}") from exc
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")
    return path


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """'section.key=value'；value 先當 JSON 解析，失敗就當字串。"""
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"覆寫格式應為 key=value，收到 {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"未知的設定鍵 {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"未知的設定鍵 {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(data)


def load_environment(dotenv_path: Optional[Union[str, Path]] = None) -> int:
    """讀 .env（不覆蓋既有環境變數），回傳 LTN_NUM_THREADS。"""
    load_dotenv(dotenv_path, override=False)
    raw = os.environ.get("LTN_NUM_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"LTN_NUM_THREADS 應為整數，收到 {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"LTN_NUM_THREADS 必須 >= 1，收到 {threads}")
    logger.debug("nonlocal 組裝執行緒數：%d", threads)
    return threads

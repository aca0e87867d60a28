"""LtN 介面辨識的例外階層。函式庫只丟例外，轉成 exit code 交給 ltn_cli。"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LtNError(Exception):
    """所有本套件例外的共同父類別。"""


class ConfigError(LtNError, ValueError):
    """設定檔欄位缺漏、型別錯誤或數值不合理。"""


# === 網格 ===
class MeshError(LtNError, ValueError):
    pass


class MshParseError(MeshError):
    pass


class UnknownLabel(MeshError):
    pass


class NonConformingMesh(MeshError):
    pass


class DegenerateTriangle(MeshError):
    pass


class EmptySubdomain(MeshError):
    pass


class EmptyInterface(MeshError):
    pass


class InterfaceNotClosed(MeshError):
    pass


class OutOfDomain(MeshError):
    pass


@dataclass
class InvalidityReport:
    """變形失敗時的診斷：被壓扁/翻轉的三角形與跑出 Ω 的頂點。"""
    triangles: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    min_area_ratio: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.triangles.size == 0 and self.vertices.size == 0

    def summary(self) -> str:
        return (f"{self.triangles.size} 個三角形面積比 < 門檻 (最小 {self.min_area_ratio:.3e})，"
                f"{self.vertices.size} 個頂點離開 Ω")


class InvalidDeformation(MeshError):
    def __init__(self, report: InvalidityReport):
        super().__init__(report.summary())
        self.report = report


# === 核函數 / 組裝 / 求解 ===
class KernelError(LtNError, ValueError):
    pass


class AssemblyError(LtNError, ValueError):
    """例如加權質量矩陣的權重出現負值。"""


class SolverError(LtNError, RuntimeError):
    pass


class StepFailure(LtNError, RuntimeError):
    """line search 的步長掉到下限仍無法接受。"""


class InterfaceMismatch(LtNError, ValueError):
    """重新開始時新網格的介面和 checkpoint 的介面距離太遠。"""

"""例外クラス。すべての例外は機械可読な ``kind`` を持ちます。"""

from typing import Any


class GuidedTrajError(Exception):
    """パッケージ共通の基底例外"""

    kind: str = "error"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "message": str(self)}


class ConfigError(GuidedTrajError, ValueError):
    kind = "invalid_config"


class UnknownSystemError(ConfigError):
    kind = "unknown_system"

    def __init__(self, name: str, known: tuple[str, ...]) -> None:
        super().__init__(f"unknown system {name!r}; expected one of {', '.join(known)}")
        self.name = name
        self.known = known

    def to_dict(self) -> dict[str, Any]:
        d = super().to_dict()
        d["name"] = self.name
        d["known"] = list(self.known)
        return d


class DimensionError(GuidedTrajError, ValueError):
    kind = "dimension_mismatch"


class SolveError(GuidedTrajError):
    """収束しなかった求解結果にアクセスしたときの例外"""

    kind = "solve_failed"

    def __init__(self, status: str, feas_residual: float) -> None:
        super().__init__(f"solve ended with status {status} (feasibility residual {feas_residual:.3e})")
        self.status = status
        self.feas_residual = feas_residual


class DivergenceError(GuidedTrajError):
    kind = "divergence"


class CheckpointError(GuidedTrajError):
    kind = "missing_checkpoint"


class StageError(GuidedTrajError):
    """パイプラインの段階名を付けて原因の例外を包みます。"""

    kind = "stage_failed"

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause

    def to_dict(self) -> dict[str, Any]:
        d = super().to_dict()
        d["stage"] = self.stage
        d["cause_kind"] = getattr(self.cause, "kind", type(self.cause).__name__)
        return d


class TrendError(GuidedTrajError):
    """反復後の平均norm-inf誤差が反復0(回帰)の値を上回ったときの例外"""

    kind = "trend_violation"

    def __init__(self, iterations: list[int]) -> None:
        super().__init__(f"mean norm-inf error rose above the regression baseline at iterations {iterations}")
        self.iterations = list(iterations)

    def to_dict(self) -> dict[str, Any]:
        d = super().to_dict()
        d["iterations"] = self.iterations
        return d

from typing import List, Optional, Tuple


class SimulationError(Exception):
    """Base error for every pipeline stage.

    Carries a stage tag and a human readable ``detail``, the same pair the
    CLI prints as ``[stage] detail``.
    """

    stage: str = "simulation"

    def __init__(self, detail: str, stage: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        if stage is not None:
            self.stage = stage

    def __str__(self) -> str:
        return f"[{self.stage}] {self.detail}"


class ConfigError(SimulationError):
    stage = "config"

    def __init__(self, detail: str, key_path: Optional[str] = None):
        if key_path:
            detail = f"{key_path}: {detail}"
        super().__init__(detail)
        self.key_path = key_path


class GeometryError(SimulationError):
    stage = "geometry"


class FlowError(SimulationError):
    stage = "flow"


class FlowConvergenceError(FlowError):
    def __init__(self, detail: str, history: List[Tuple[int, float]]):
        super().__init__(detail)
        self.history = list(history)


class FlowStabilityError(FlowError):
    pass


class TracerError(SimulationError):
    stage = "trace"


class TopologyError(SimulationError):
    stage = "topology"


class TransportError(SimulationError):
    stage = "transport"


class ReportError(SimulationError):
    stage = "report"


class PipelineError(SimulationError):
    stage = "pipeline"

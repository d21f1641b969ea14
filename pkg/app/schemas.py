import math
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import AliasChoices, BaseModel, Field, field_validator, model_validator

from app.utils.units import m3_per_s_to_ul_per_min, um_to_m

# Mixer schemas
class Variant(str, Enum):
    PLAIN = "PLAIN"
    SGM = "SGM"
    CDM = "CDM"


def _um(name: str) -> AliasChoices:
    return AliasChoices(name, f"{name}_um")


class MixerConfig(BaseModel):
    """Parametric mixer description. All lengths in micrometres.

    The frame is x across the width, y along the mixing channel and z up;
    the channel floor is z = 0 and grooves extend below it.
    """

    variant: Variant = Variant.CDM
    channel_length: float = Field(8100.0, gt=0, validation_alias=_um("channel_length"))
    channel_width: float = Field(200.0, gt=0, validation_alias=_um("channel_width"))
    channel_height: float = Field(70.0, gt=0, validation_alias=_um("channel_height"))
    inlet_length: float = Field(500.0, gt=0, validation_alias=_um("inlet_length"))
    inlet_width: Optional[float] = Field(None, gt=0, validation_alias=_um("inlet_width"))
    groove_width: float = Field(50.0, gt=0, validation_alias=_um("groove_width"))
    groove_depth: float = Field(50.0, gt=0, validation_alias=_um("groove_depth"))
    groove_angle: float = Field(45.0, gt=-90.0, lt=90.0, validation_alias=AliasChoices("groove_angle", "groove_angle_deg"))
    groove_pitch: float = Field(100.0, gt=0, validation_alias=_um("groove_pitch"))
    grooves_per_period: int = Field(8, gt=0)
    barrier_width: float = Field(20.0, gt=0, validation_alias=_um("barrier_width"))
    barrier_height: float = Field(40.0, gt=0, validation_alias=_um("barrier_height"))
    barrier_period: float = Field(800.0, gt=0, validation_alias=_um("barrier_period"))
    barrier_amplitude: float = Field(50.0, gt=0, validation_alias=_um("barrier_amplitude"))
    entrance_offset: float = Field(100.0, gt=0, validation_alias=_um("entrance_offset"))
    n_periods: int = Field(10, ge=0)

    class Config:
        frozen = True
        extra = "forbid"
        populate_by_name = True

    @field_validator("variant", mode="before")
    @classmethod
    def normalize_variant(cls, value: Any) -> Any:
        if isinstance(value, str):
            return value.strip().upper()
        return value

    @property
    def has_grooves(self) -> bool:
        return self.variant in (Variant.SGM, Variant.CDM)

    @property
    def has_barrier(self) -> bool:
        return self.variant == Variant.CDM

    @property
    def inlet_arm_width(self) -> float:
        return self.inlet_width if self.inlet_width is not None else self.channel_width / 2.0

    @property
    def patterned_start(self) -> float:
        return self.entrance_offset

    @property
    def patterned_end(self) -> float:
        return self.entrance_offset + self.n_periods * self.barrier_period

    @property
    def floor_z(self) -> float:
        return -self.groove_depth if self.has_grooves else 0.0

    def invariant_violations(self) -> List[Tuple[str, str]]:
        """Cross-field invariants as (key, rule) pairs; empty when consistent."""
        violations = []
        if self.has_barrier and self.barrier_height >= self.channel_height:
            violations.append(("barrier_height", "barrier_height < channel_height"))
        if self.has_grooves and self.grooves_per_period * self.groove_pitch > self.barrier_period:
            violations.append(("grooves_per_period", "grooves_per_period * groove_pitch <= barrier_period"))
        if self.has_barrier and self.barrier_amplitude + self.barrier_width / 2.0 >= self.channel_width / 2.0:
            violations.append(("barrier_amplitude", "barrier_amplitude + barrier_width/2 < channel_width/2"))
        if self.patterned_end > self.channel_length + 1e-9:
            violations.append(("n_periods", "entrance_offset + n_periods * barrier_period <= channel_length"))
        return violations


# Flow schemas
class FlowConditions(BaseModel):
    """Run conditions in SI units; ``flow_rate_per_inlet`` is m^3/s."""

    flow_rate_per_inlet: float = Field(5.0 / 60.0 * 1e-9)
    density: float = Field(1000.0, gt=0)
    dynamic_viscosity: float = Field(1e-3, gt=0)
    stokes_mode: bool = False

    class Config:
        frozen = True
        extra = "forbid"

    @field_validator("flow_rate_per_inlet")
    @classmethod
    def check_flow_rate(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("flow rate must be finite")
        return value

    @model_validator(mode="after")
    def check_reversed_flow(self) -> "FlowConditions":
        # reversed inlets are only meaningful for the linear (Stokes) scheme
        if self.flow_rate_per_inlet < 0 and not self.stokes_mode:
            raise ValueError("flow_rate_per_inlet must be >= 0 unless stokes_mode is set")
        return self

    @property
    def total_flow_rate(self) -> float:
        return 2.0 * self.flow_rate_per_inlet

    @property
    def kinematic_viscosity(self) -> float:
        return self.dynamic_viscosity / self.density

    @property
    def flow_rate_ul_per_min(self) -> float:
        return m3_per_s_to_ul_per_min(self.flow_rate_per_inlet)

    def reversed(self) -> "FlowConditions":
        return self.model_copy(update={"flow_rate_per_inlet": -self.flow_rate_per_inlet})


# Transport schemas
class TransportParams(BaseModel):
    """Reaction-transport parameters.

    ``diffusivity`` and ``rate_constant`` left as None are resolved from the
    flow: cell Peclet 10 at h = 5 um, and Damkohler 100.
    """

    diffusivity: Optional[float] = Field(None, gt=0)
    rate_constant: Optional[float] = Field(None, ge=0)
    inlet_conc_a: float = Field(1.0, gt=0, validation_alias=AliasChoices("inlet_conc_a", "c_a0"))
    inlet_conc_b: float = Field(1.0, gt=0, validation_alias=AliasChoices("inlet_conc_b", "c_b0"))
    reaction_threshold: float = Field(0.1, gt=0, lt=1, validation_alias=AliasChoices("reaction_threshold", "theta"))
    inlet_mode: Literal["split", "premixed"] = "split"
    reference_peclet: float = Field(10.0, gt=0)
    reference_spacing: float = Field(5.0, gt=0, validation_alias=_um("reference_spacing"))
    damkohler: float = Field(100.0, gt=0)

    class Config:
        frozen = True
        extra = "forbid"
        populate_by_name = True

    @property
    def stoichiometric_product(self) -> float:
        return min(self.inlet_conc_a, self.inlet_conc_b) / 2.0

    def resolve(self, mean_velocity: float, channel_width_um: float) -> "TransportParams":
        """Fill the auto fields from the mean velocity (m/s) and channel width."""
        update: Dict[str, float] = {}
        if self.diffusivity is None:
            speed = max(abs(mean_velocity), 1e-12)
            update["diffusivity"] = speed * um_to_m(self.reference_spacing) / self.reference_peclet
        if self.rate_constant is None:
            speed = abs(mean_velocity)
            update["rate_constant"] = self.damkohler * speed / (self.inlet_conc_a * um_to_m(channel_width_um))
        return self.model_copy(update=update)


# Run schemas
class Stage(str, Enum):
    GEOMETRY = "geometry"
    FLOW = "flow"
    TRACE = "trace"
    TOPOLOGY = "topology"
    TRANSPORT = "transport"
    REPORT = "report"


STAGE_ORDER = [Stage.GEOMETRY, Stage.FLOW, Stage.TRACE, Stage.TOPOLOGY, Stage.TRANSPORT, Stage.REPORT]

STAGE_DEPENDENCIES = {
    Stage.GEOMETRY: [],
    Stage.FLOW: [Stage.GEOMETRY],
    Stage.TRACE: [Stage.FLOW],
    Stage.TOPOLOGY: [Stage.FLOW],
    Stage.TRANSPORT: [Stage.FLOW],
    Stage.REPORT: [Stage.TRACE, Stage.TRANSPORT],
}


class NumericControls(BaseModel):
    grid_spacing: float = Field(5.0, gt=0, validation_alias=AliasChoices("grid_spacing", "grid_spacing_um", "h"))
    flow_tol: float = Field(1e-7, gt=0, le=1e-3)
    convergence_window: int = Field(100, gt=0)
    max_flow_iterations: int = Field(200_000, gt=0)
    relaxation_time: float = Field(0.5 + math.sqrt(3.0 / 16.0), ge=0.55, le=1.5)
    max_lattice_speed: float = Field(0.05, gt=0, le=0.1)
    # development length upstream of the inlet face; None uses the inlet arm length
    inlet_buffer: Optional[float] = Field(None, ge=0, validation_alias=_um("inlet_buffer"))
    transport_tol: float = Field(1e-8, gt=0)
    max_transport_iterations: int = Field(100, gt=0)
    cfl: float = Field(0.5, gt=0, le=1.0)
    n_particles: int = Field(14000, gt=0)
    max_tracer_steps: int = Field(1_000_000, gt=0)
    mixing_bins: Tuple[int, int] = (10, 7)
    slices_per_period: int = Field(8, gt=0)
    slice_angle: Optional[float] = Field(None, gt=-90.0, lt=90.0)
    slice_projection: Literal["transverse", "plane"] = "transverse"
    vorticity_threshold: float = Field(0.2, gt=0, lt=1)

    class Config:
        frozen = True
        extra = "forbid"
        populate_by_name = True

    @field_validator("n_particles")
    @classmethod
    def check_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("n_particles must be even")
        return value

    @field_validator("mixing_bins")
    @classmethod
    def check_bins(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if min(value) < 1:
            raise ValueError("mixing_bins must be positive")
        return value


class RunConfig(BaseModel):
    mixer: MixerConfig = Field(default_factory=MixerConfig)
    flow: FlowConditions = Field(default_factory=FlowConditions)
    transport: TransportParams = Field(default_factory=TransportParams)
    numerics: NumericControls = Field(default_factory=NumericControls)
    output_dir: str = "runs/default"
    threads: int = Field(1, ge=1)
    stages: List[Stage] = Field(default_factory=lambda: list(STAGE_ORDER))
    strict: bool = True
    force: bool = False

    class Config:
        frozen = True
        extra = "forbid"

    def resolved_stages(self) -> List[Stage]:
        """Selected stages plus their dependencies, in execution order."""
        wanted = set()
        pending = list(self.stages)
        while pending:
            stage = pending.pop()
            if stage not in wanted:
                wanted.add(stage)
                pending.extend(STAGE_DEPENDENCIES[stage])
        return [stage for stage in STAGE_ORDER if stage in wanted]


# Report schemas
class PeriodRecord(BaseModel):
    period: int = Field(ge=1)
    y_um: float
    mixing_index: float = Field(ge=0.0, le=1.0)
    fret_factor: float = Field(ge=0.0, le=1.0)


class MixingReport(BaseModel):
    variant: str
    conditions: Dict[str, float] = Field(default_factory=dict)
    records: List[PeriodRecord] = Field(default_factory=list)
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("records")
    @classmethod
    def check_sorted(cls, records: List[PeriodRecord]) -> List[PeriodRecord]:
        periods = [record.period for record in records]
        if periods != sorted(periods):
            raise ValueError("records must be sorted by period")
        return records

    def record_for(self, period: int) -> Optional[PeriodRecord]:
        for record in self.records:
            if record.period == period:
                return record
        return None


class PairwiseRecord(BaseModel):
    variant_a: str
    variant_b: str
    period: int
    fret_a: float
    fret_b: float
    fret_difference: float
    fret_ratio: Optional[float] = None
    mixing_difference: float
    mixing_ratio: Optional[float] = None


class ComparisonReport(BaseModel):
    reports: List[MixingReport]
    pairs: List[PairwiseRecord] = Field(default_factory=list)
    crossing_periods: Dict[str, Optional[int]] = Field(default_factory=dict)
    crossing_threshold: float = 0.8
    headline_ratio: Optional[float] = None


class TargetCheck(BaseModel):
    target: str
    required: float
    observed: Optional[float] = None
    met: bool
    depends_on: str

"""Stage driver: runs geometry -> flow -> trace/topology/transport -> report
for one RunConfig and writes the run directory."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import pandas as pd

from app.config import config_defaults_echo
from app.exceptions import PipelineError, ReportError, SimulationError
from app.models import ParticleEnsemble, SpeciesFields, VelocityField, VoxelGrid
from app.schemas import RunConfig, Stage
from app.services import flow_service, geometry_service, report_service, topology_service, tracer_service, transport_service
from app.utils.file_io import cleanup_files, get_file_metadata, write_csv, write_json
from app.utils.vtk_writer import write_vtk

logger = logging.getLogger(__name__)

REYNOLDS_NOTE = (
    "Re uses the hydraulic diameter 2WH/(W+H) of the bare duct with the total "
    "flow rate; a quoted Re of 1.34 at 5 ul/min per inlet is not reproduced by "
    "this or the width-based definition"
)


@dataclass
class RunState:
    """Products handed from one stage to the next."""

    config: RunConfig
    out: Path
    written: List[Path] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)
    grid: Optional[VoxelGrid] = None
    velocity: Optional[VelocityField] = None
    ensemble: Optional[ParticleEnsemble] = None
    species: Optional[SpeciesFields] = None

    def path(self, name: str) -> Path:
        target = self.out / name
        self.written.append(target)
        return target

    @property
    def planes(self) -> List[float]:
        return geometry_service.period_planes(self.config.mixer)


def run_conditions(config: RunConfig) -> Dict[str, float]:
    """Parameters two runs must share to be comparable."""
    mixer, numerics = config.mixer, config.numerics
    transport = config.transport.resolve(flow_service.mean_velocity(config.flow, mixer), mixer.channel_width)
    return {
        "flow_rate_per_inlet_ul_per_min": config.flow.flow_rate_ul_per_min,
        "reynolds": flow_service.reynolds(config.flow, mixer),
        "channel_width_um": mixer.channel_width,
        "channel_height_um": mixer.channel_height,
        "grid_spacing_um": numerics.grid_spacing,
        "flow_tol": numerics.flow_tol,
        "transport_tol": numerics.transport_tol,
        "n_particles": float(numerics.n_particles),
        "diffusivity": transport.diffusivity,
        "rate_constant": transport.rate_constant,
        "reaction_threshold": transport.reaction_threshold,
    }


def _geometry(state: RunState):
    config = state.config
    state.grid = geometry_service.voxelize(config.mixer, config.numerics.grid_spacing)
    write_vtk(state.grid, state.path("grid.vtk"))
    state.meta["geometry"] = {
        "dims": list(state.grid.dims),
        "spacing_um": state.grid.spacing,
        "origin_um": list(state.grid.origin),
        "fluid_cells": state.grid.n_fluid,
        "fluid_volume_um3": geometry_service.fluid_volume(state.grid),
        "period_planes_um": state.planes,
    }


def _flow(state: RunState):
    config = state.config
    field = flow_service.solve_steady(state.grid, config.flow, numerics=config.numerics, threads=config.threads)
    state.velocity = field
    write_vtk(field, state.path("velocity.vtk"))
    history = pd.DataFrame(field.history, columns=["iteration", "residual"])
    write_csv(history, state.path("convergence.csv"))
    state.meta["flow"] = dict(
        field.metadata,
        residual=field.residual,
        reynolds=flow_service.reynolds(config.flow, config.mixer),
        reynolds_note=REYNOLDS_NOTE,
        mean_velocity_m_per_s=flow_service.mean_velocity(config.flow, config.mixer),
        max_speed_m_per_s=field.max_speed,
        max_divergence_per_s=flow_service.max_divergence(field),
        pressure_drop_pa=flow_service.pressure_drop(field),
    )


def _trace(state: RunState):
    numerics = state.config.numerics
    seeded = tracer_service.seed_inlet(state.grid, numerics.n_particles)
    state.ensemble = tracer_service.advect(
        state.velocity, seeded, state.planes, cfl=numerics.cfl, max_steps=numerics.max_tracer_steps, threads=state.config.threads
    )
    for k in range(len(state.planes)):
        frame = tracer_service.snapshot_frame(state.ensemble, k)
        write_csv(frame, state.path(f"particles_period_{k + 1}.csv"))
        write_vtk(frame, state.path(f"particles_period_{k + 1}.vtk"))
    active, exited, stalled = tracer_service.status_counts(state.ensemble)
    mixer = state.config.mixer
    rotation = tracer_service.rotation_summary(state.ensemble, (mixer.channel_width / 2.0, mixer.channel_height / 2.0))
    state.meta["trace"] = dict(state.ensemble.metadata, active=active, exited=exited, stalled=stalled, **rotation)


def _topology(state: RunState):
    config = state.config
    numerics = config.numerics
    plan = topology_service.slice_plan(config.mixer, numerics.slices_per_period, numerics.slice_angle)
    projection = numerics.slice_projection
    analyses = topology_service.analyze_slices(state.velocity, plan, numerics.vorticity_threshold, config.threads, projection)
    write_csv(topology_service.topology_table(analyses), state.path("topology.csv"))
    write_csv(topology_service.saddle_tracking(config.mixer, analyses), state.path("saddles.csv"))
    apex = topology_service.analyze_slices(
        state.velocity, topology_service.apex_plan(config.mixer), numerics.vorticity_threshold, config.threads, projection
    )
    apex_table = topology_service.apex_table(apex)
    write_csv(apex_table, state.path("apex.csv"))
    state.meta["topology"] = {
        "slices": len(analyses),
        "projection": projection,
        "critical_points": sum(len(a.points) for a in analyses),
        "vortices": sum(len(a.vortices) for a in analyses),
        "unresolved_vortices": sum(not v.resolved for a in analyses for v in a.vortices),
        "apex": topology_service.apex_summary(apex_table),
    }


def _transport(state: RunState):
    config = state.config
    species = transport_service.solve_transport(
        state.velocity,
        state.grid,
        config.transport,
        tol=config.numerics.transport_tol,
        max_iterations=config.numerics.max_transport_iterations,
        mean_velocity=flow_service.mean_velocity(config.flow, config.mixer),
    )
    state.species = species
    write_vtk(species, state.path("species.vtk"))
    rows = [
        {
            "period": period,
            "y_um": y,
            "fret_factor": fret,
            "product_yield": transport_service.product_yield(species, state.velocity, y),
        }
        for (period, fret), y in zip(transport_service.fret_profile(species, state.planes), state.planes)
    ]
    write_csv(pd.DataFrame(rows, columns=["period", "y_um", "fret_factor", "product_yield"]), state.path("fret_profile.csv"))
    state.meta["transport"] = dict(species.metadata, **transport_service.transport_summary(species))


def _report(state: RunState):
    config = state.config
    report = report_service.build_report(
        state.ensemble,
        state.species,
        config.mixer,
        state.planes,
        conditions=state.meta["conditions"],
        bins=config.numerics.mixing_bins,
    )
    write_csv(report, state.path("report.csv"))
    state.meta["report"] = {
        "periods": len(report.records),
        "crossing_period": report_service.crossing_period(report),
    }


STAGE_RUNNERS: Dict[Stage, Callable[[RunState], None]] = {
    Stage.GEOMETRY: _geometry,
    Stage.FLOW: _flow,
    Stage.TRACE: _trace,
    Stage.TOPOLOGY: _topology,
    Stage.TRANSPORT: _transport,
    Stage.REPORT: _report,
}


def prepare_output_dir(path: Union[str, Path], force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise PipelineError(f"output path {out} is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise PipelineError(f"output directory {out} is not empty (use --force to overwrite)")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise PipelineError(f"cannot create output directory {out}: {e}") from e
    return out


def _manifest(out: Path, written: Sequence[Path]) -> Dict[str, Any]:
    files = sorted((get_file_metadata(path, out) for path in set(written)), key=lambda entry: entry["path"])
    return {"output_dir": out.as_posix(), "files": files}


def run_pipeline(config: RunConfig) -> Dict[str, Any]:
    """Run the selected stages plus their dependencies and return a manifest
    of every written file with its SHA-256."""
    out = prepare_output_dir(config.output_dir, config.force)
    stages = config.resolved_stages()
    state = RunState(config=config, out=out)
    state.meta = {
        "variant": config.mixer.variant.value,
        "stages": [stage.value for stage in stages],
        "config": config_defaults_echo(config),
        "conditions": run_conditions(config),
        "transport_params": config.transport.resolve(
            flow_service.mean_velocity(config.flow, config.mixer), config.mixer.channel_width
        ).model_dump(mode="json"),
    }

    for stage in stages:
        logger.info("Running stage %s", stage.value)
        try:
            STAGE_RUNNERS[stage](state)
        except SimulationError:
            cleanup_files(state.written)
            raise
        except Exception as e:
            cleanup_files(state.written)
            raise PipelineError(f"{type(e).__name__}: {e}", stage=stage.value) from e

    try:
        write_json(state.meta, state.path("meta.json"))
        manifest = _manifest(out, state.written)
    except OSError as e:
        cleanup_files(state.written)
        raise PipelineError(f"cannot write run metadata: {e}") from e
    logger.info("Wrote %d artifacts to %s", len(manifest["files"]), out)
    return manifest


def run_compare(run_dirs: Sequence[Union[str, Path]], out_dir: Union[str, Path], force: bool = False) -> Dict[str, Any]:
    """Compare finished runs and write comparison.csv (plus targets.csv when a
    CDM run is among them)."""
    reports = [report_service.read_report(run_dir) for run_dir in run_dirs]
    comparison = report_service.compare(reports)
    out = prepare_output_dir(out_dir, force)
    written = [out / "comparison.csv"]
    try:
        write_csv(comparison, written[0])
        if "CDM" in comparison.crossing_periods:
            written.append(out / "targets.csv")
            checks = report_service.target_check(comparison) + report_service.ordering_check(comparison)
            write_csv(report_service.targets_frame(checks), written[-1])
    except (OSError, ReportError):
        cleanup_files(written)
        raise
    manifest = _manifest(out, written)
    manifest["crossing_periods"] = comparison.crossing_periods
    manifest["headline_ratio"] = comparison.headline_ratio
    return manifest

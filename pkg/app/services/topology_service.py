import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numba import njit, prange
from scipy import ndimage

from app.exceptions import TopologyError
from app.models import CriticalPoint, CriticalPointKind, RotationSense, SliceField, VelocityField, Vortex, VoxelGrid
from app.schemas import MixerConfig
from app.services.geometry_service import barrier_centerline
from app.services.tracer_service import VelocityInterpolator
from app.utils.parallel import set_threads

logger = logging.getLogger(__name__)

VELOCITY_TOLERANCE = 1e-6
JACOBIAN_TOLERANCE = 1e-9
NEWTON_ITERATIONS = 50
NEWTON_BAILOUT = 10.0
ROOT_SLACK = 1e-9
SPLIT_RATIO = 1.2
VORTEX_KINDS = (CriticalPointKind.FOCUS_CW, CriticalPointKind.FOCUS_CCW, CriticalPointKind.CENTER)

Projection = Literal["transverse", "plane"]


@dataclass(frozen=True)
class SlicePlane:
    period: int
    index: int
    y: float
    slant: float


@dataclass
class SliceAnalysis:
    plane: SlicePlane
    slice: SliceField
    points: List[CriticalPoint] = field(default_factory=list)
    vortices: List[Vortex] = field(default_factory=list)

    @property
    def saddles(self) -> List[CriticalPoint]:
        return [p for p in self.points if p.kind == CriticalPointKind.SADDLE]


def _plane_points(grid: VoxelGrid, y: float, slant: float) -> Tuple[Tuple[int, int], np.ndarray, np.ndarray]:
    x = grid.centers(0)
    z = grid.centers(2)
    center = grid.config.channel_width / 2.0 if grid.config else 0.5 * (grid.origin[0] + grid.upper[0])
    X, Z = np.meshgrid(x, z, indexing="ij")
    Y = y + (X - center) * math.tan(math.radians(slant))
    points = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    mask = grid.is_fluid_at(points)
    if not mask.any():
        raise TopologyError(f"plane y={y} slant={slant} lies entirely in solid")
    return X.shape, points, mask


def _build_slice(
    grid: VoxelGrid, y: float, slant: float, shape, mask: np.ndarray, sampled: np.ndarray, projection: Projection
) -> SliceField:
    velocity = np.zeros((mask.size, 3))
    velocity[mask] = sampled * 1e-6
    if projection == "plane":
        alpha = math.radians(slant)
        normal = np.array([-math.sin(alpha), math.cos(alpha), 0.0])
        velocity = velocity - (velocity @ normal)[:, None] * normal
    elif projection != "transverse":
        raise TopologyError(f"unknown slice projection {projection!r}")
    return SliceField(
        y=float(y),
        slant=float(slant),
        x=grid.centers(0),
        z=grid.centers(2),
        ux=velocity[:, 0].reshape(shape),
        uz=velocity[:, 2].reshape(shape),
        mask=mask.reshape(shape),
    )


def slice_field(
    field: VelocityField,
    y: float,
    slant: float = 0.0,
    interpolator: Optional[VelocityInterpolator] = None,
    projection: Projection = "transverse",
) -> SliceField:
    """Sample the velocity on the plane through y rotated by ``slant`` degrees
    about z.

    ``transverse`` keeps the cross-channel components (u_x, u_z) of each sample;
    ``plane`` removes the component along the plane normal, which mixes the
    axial velocity into u_x on a slanted plane.
    """
    grid = field.grid
    shape, points, mask = _plane_points(grid, y, slant)
    interpolator = interpolator or VelocityInterpolator(field)
    return _build_slice(grid, y, slant, shape, mask, interpolator(points[mask]), projection)


def classify_critical_point(J) -> CriticalPointKind:
    J = np.asarray(J, dtype=np.float64)
    if J.shape != (2, 2) or not np.all(np.isfinite(J)):
        raise TopologyError("Jacobian must be a finite 2x2 matrix")
    scale = float(np.linalg.norm(J))
    if scale == 0.0:
        return CriticalPointKind.DEGENERATE
    eps_d = JACOBIAN_TOLERANCE * scale**2
    eps_t = JACOBIAN_TOLERANCE * scale
    trace = J[0, 0] + J[1, 1]
    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    if det < -eps_d:
        return CriticalPointKind.SADDLE
    if abs(det) <= eps_d:
        return CriticalPointKind.DEGENERATE
    if trace**2 - 4.0 * det < 0.0:
        if abs(trace) < eps_t:
            return CriticalPointKind.CENTER
        # omega_y > 0 is clockwise viewed toward +y
        return CriticalPointKind.FOCUS_CW if J[0, 1] - J[1, 0] > 0 else CriticalPointKind.FOCUS_CCW
    return CriticalPointKind.NODE_SOURCE if trace > 0 else CriticalPointKind.NODE_SINK


@njit(cache=True, parallel=True)
def _cell_roots(ux, uz, cells, eps_v, out):
    """Newton zero of the bilinear (ux, uz) patch of each candidate cell.

    ``out`` rows hold (s, t, dux/ds, dux/dt, duz/ds, duz/dt), NaN when the
    iteration fails.
    """
    for n in prange(cells.shape[0]):
        i = cells[n, 0]
        k = cells[n, 1]
        a00, a10, a01, a11 = ux[i, k], ux[i + 1, k], ux[i, k + 1], ux[i + 1, k + 1]
        b00, b10, b01, b11 = uz[i, k], uz[i + 1, k], uz[i, k + 1], uz[i + 1, k + 1]
        s = 0.5
        t = 0.5
        for c in range(6):
            out[n, c] = np.nan
        for _ in range(NEWTON_ITERATIONS + 1):
            vx = a00 * (1 - s) * (1 - t) + a10 * s * (1 - t) + a01 * (1 - s) * t + a11 * s * t
            vz = b00 * (1 - s) * (1 - t) + b10 * s * (1 - t) + b01 * (1 - s) * t + b11 * s * t
            j00 = (a10 - a00) * (1 - t) + (a11 - a01) * t
            j01 = (a01 - a00) * (1 - s) + (a11 - a10) * s
            j10 = (b10 - b00) * (1 - t) + (b11 - b01) * t
            j11 = (b01 - b00) * (1 - s) + (b11 - b10) * s
            if math.hypot(vx, vz) < eps_v:
                out[n, 0] = s
                out[n, 1] = t
                out[n, 2] = j00
                out[n, 3] = j01
                out[n, 4] = j10
                out[n, 5] = j11
                break
            det = j00 * j11 - j01 * j10
            if det == 0.0:
                break
            s -= (vx * j11 - j01 * vz) / det
            t -= (j00 * vz - j10 * vx) / det
            if not (math.isfinite(s) and math.isfinite(t)) or abs(s) > NEWTON_BAILOUT or abs(t) > NEWTON_BAILOUT:
                break


def find_critical_points(slice: SliceField) -> List[CriticalPoint]:
    """Zeros of the in-plane velocity, one per location, with Jacobians in 1/s."""
    if len(slice.x) < 2 or len(slice.z) < 2:
        return []
    speed = slice.max_speed
    if speed == 0.0:
        return []
    eps_v = VELOCITY_TOLERANCE * speed
    h = slice.spacing
    ux, uz, mask = slice.ux, slice.uz, slice.mask

    def corners(a):
        return np.stack([a[:-1, :-1], a[1:, :-1], a[:-1, 1:], a[1:, 1:]])

    full = corners(mask).all(axis=0)
    cx, cz = corners(ux), corners(uz)
    candidate = full & (cx.min(axis=0) <= 0) & (cx.max(axis=0) >= 0) & (cz.min(axis=0) <= 0) & (cz.max(axis=0) >= 0)
    cells = np.argwhere(candidate).astype(np.int64)
    if len(cells) == 0:
        return []
    roots = np.empty((len(cells), 6))
    _cell_roots(ux, uz, cells, eps_v, roots)

    points: List[CriticalPoint] = []
    for (i, k), (s, t, *local) in zip(cells, roots):
        if not (-ROOT_SLACK <= s <= 1 + ROOT_SLACK and -ROOT_SLACK <= t <= 1 + ROOT_SLACK):
            continue
        x = slice.x[i] + s * h
        z = slice.z[k] + t * h
        if any(math.hypot(x - p.x, z - p.z) < h / 2.0 for p in points):
            continue
        jacobian = np.asarray(local).reshape(2, 2) / (h * 1e-6)
        points.append(CriticalPoint(x=float(x), z=float(z), jacobian=jacobian, kind=classify_critical_point(jacobian), y=slice.y))
    return points


def _local_region(omega: np.ndarray, mask: np.ndarray, i: int, k: int, threshold: float) -> np.ndarray:
    """Same-sign cells connected to (i, k) with |omega| >= threshold * |omega[i, k]|."""
    center = omega[i, k]
    if center == 0.0 or not mask[i, k]:
        return np.zeros_like(mask)
    region = mask & (np.sign(omega) == np.sign(center)) & (np.abs(omega) >= threshold * abs(center))
    labels, _ = ndimage.label(region)
    return labels == labels[i, k]


def vortex_census(
    slice: SliceField, threshold: float = 0.2, points: Optional[List[CriticalPoint]] = None
) -> List[Vortex]:
    """One vortex per focus/centre, sized by the |omega_y| >= threshold * max
    region holding its centre; largest first.

    A centre too weak for the slice-wide threshold is sized by growing the
    region from its own vorticity instead and is marked unresolved.
    """
    if points is None:
        points = find_critical_points(slice)
    centers = [p for p in points if p.kind in VORTEX_KINDS]
    if not centers:
        return []
    h = slice.spacing
    omega = slice.vorticity()
    peak = float(np.abs(omega[slice.mask]).max(initial=0.0))
    region = slice.mask & (np.abs(omega) >= threshold * peak) & (peak > 0)
    labels, _ = ndimage.label(region)

    vortices = []
    for center in centers:
        i = int(np.clip(round((center.x - slice.x[0]) / h), 0, len(slice.x) - 1))
        k = int(np.clip(round((center.z - slice.z[0]) / h), 0, len(slice.z) - 1))
        resolved = labels[i, k] > 0
        cells = labels == labels[i, k] if resolved else _local_region(omega, slice.mask, i, k, threshold)
        size = float(cells.sum()) * h * h
        values = omega[cells]
        peak_vorticity = float(values[np.argmax(np.abs(values))]) if values.size else 0.0
        if not resolved:
            logger.debug("Vortex at (%.1f, %.1f) below the slice threshold, local size %.3g um^2", center.x, center.z, size)
        sense = RotationSense.CW if center.vorticity > 0 else RotationSense.CCW
        vortices.append(Vortex(center=center, sense=sense, size=size, peak_vorticity=peak_vorticity, resolved=resolved))
    return sorted(vortices, key=lambda v: -v.size)


def slice_plan(config: MixerConfig, slices_per_period: int = 8, slant: Optional[float] = None) -> List[SlicePlane]:
    angle = config.groove_angle if slant is None else slant
    step = config.barrier_period / slices_per_period
    plan = []
    for period in range(1, config.n_periods + 1):
        start = config.entrance_offset + (period - 1) * config.barrier_period
        for j in range(slices_per_period):
            plan.append(SlicePlane(period=period, index=j, y=start + (j + 0.5) * step, slant=angle))
    return plan


def apex_plan(config: MixerConfig) -> List[SlicePlane]:
    """Unslanted planes through the two barrier apexes of every period."""
    plan = []
    for period in range(1, config.n_periods + 1):
        start = config.patterned_start + (period - 1) * config.barrier_period
        for j, phase in enumerate((0.25, 0.75)):
            plan.append(SlicePlane(period=period, index=j, y=start + phase * config.barrier_period, slant=0.0))
    return plan


def _analyze(plane: SlicePlane, sliced: SliceField, threshold: float) -> SliceAnalysis:
    points = find_critical_points(sliced)
    return SliceAnalysis(plane=plane, slice=sliced, points=points, vortices=vortex_census(sliced, threshold, points))


def analyze_slice(
    field: VelocityField,
    plane: SlicePlane,
    threshold: float = 0.2,
    interpolator: Optional[VelocityInterpolator] = None,
    projection: Projection = "transverse",
) -> SliceAnalysis:
    return _analyze(plane, slice_field(field, plane.y, plane.slant, interpolator, projection), threshold)


def analyze_slices(
    field: VelocityField,
    plan: Sequence[SlicePlane],
    threshold: float = 0.2,
    threads: int = 1,
    projection: Projection = "transverse",
) -> List[SliceAnalysis]:
    """Analyse every plane; all planes are sampled in one parallel pass."""
    grid = field.grid
    set_threads(threads)
    sampled = [_plane_points(grid, plane.y, plane.slant) for plane in plan]
    if not sampled:
        return []
    velocity = VelocityInterpolator(field)(np.vstack([points[mask] for _, points, mask in sampled]))
    bounds = np.cumsum([0] + [int(mask.sum()) for _, _, mask in sampled])

    analyses = []
    for n, (plane, (shape, _, mask)) in enumerate(zip(plan, sampled)):
        sliced = _build_slice(grid, plane.y, plane.slant, shape, mask, velocity[bounds[n] : bounds[n + 1]], projection)
        analyses.append(_analyze(plane, sliced, threshold))
    logger.info(
        "Analyzed %d %s slices: %d critical points, %d vortices",
        len(analyses), projection, sum(len(a.points) for a in analyses), sum(len(a.vortices) for a in analyses),
    )
    return analyses


def split_vortex_pair(analysis: SliceAnalysis, min_ratio: float = SPLIT_RATIO) -> Optional[float]:
    """Largest size ratio of two opposite-sense resolved vortices with a saddle
    lying between their centres, None when the slice holds no such pair."""
    vortices = [v for v in analysis.vortices if v.resolved and v.size > 0]
    best = None
    for n, first in enumerate(vortices):
        for second in vortices[n + 1 :]:
            if first.sense == second.sense:
                continue
            low, high = sorted((first.center.x, second.center.x))
            if not any(low < s.x < high for s in analysis.saddles):
                continue
            ratio = max(first.size, second.size) / min(first.size, second.size)
            best = ratio if best is None else max(best, ratio)
    if best is not None and best < min_ratio:
        logger.debug("Split vortex pair at y=%.1f has size ratio %.3f", analysis.plane.y, best)
    return best


def apex_table(analyses: Sequence[SliceAnalysis], min_ratio: float = SPLIT_RATIO) -> pd.DataFrame:
    columns = ["period", "y", "saddles", "cw", "ccw", "size_ratio", "met"]
    rows = []
    for analysis in analyses:
        ratio = split_vortex_pair(analysis, min_ratio)
        rows.append(
            {
                "period": analysis.plane.period,
                "y": analysis.plane.y,
                "saddles": len(analysis.saddles),
                "cw": sum(v.sense == RotationSense.CW for v in analysis.vortices),
                "ccw": sum(v.sense == RotationSense.CCW for v in analysis.vortices),
                "size_ratio": math.nan if ratio is None else ratio,
                "met": ratio is not None and ratio >= min_ratio,
            }
        )
    return pd.DataFrame(rows, columns=columns)


def apex_summary(table: pd.DataFrame) -> Dict[str, Any]:
    ratios = table["size_ratio"].dropna() if len(table) else pd.Series(dtype=float)
    return {
        "slices": int(len(table)),
        "met": int(table["met"].sum()) if len(table) else 0,
        "best_size_ratio": float(ratios.max()) if len(ratios) else None,
    }


def saddle_tracking(config: MixerConfig, analyses: Sequence[SliceAnalysis]) -> pd.DataFrame:
    """Per slice, the saddle nearest the point beneath the barrier centreline."""
    rows = []
    z_target = config.channel_height - config.barrier_height
    for analysis in analyses:
        y = analysis.plane.y
        x_target = float(barrier_centerline(config, y))
        saddles = analysis.saddles
        row = {
            "period": analysis.plane.period,
            "slice": analysis.plane.index,
            "y": y,
            "barrier_x": x_target,
            "saddle_x": math.nan,
            "saddle_z": math.nan,
            "offset_x": math.nan,
        }
        if saddles:
            nearest = min(saddles, key=lambda p: math.hypot(p.x - x_target, p.z - z_target))
            row.update(saddle_x=nearest.x, saddle_z=nearest.z, offset_x=nearest.x - x_target)
        rows.append(row)
    return pd.DataFrame(rows, columns=["period", "slice", "y", "barrier_x", "saddle_x", "saddle_z", "offset_x"])


def topology_table(analyses: Sequence[SliceAnalysis]) -> pd.DataFrame:
    columns = [
        "period", "y", "slant", "x", "z", "kind", "eig1_re", "eig1_im", "eig2_re", "eig2_im", "vortex_size", "sense", "resolved",
    ]
    rows = []
    for analysis in analyses:
        vortices = {id(v.center): v for v in analysis.vortices}
        for point in analysis.points:
            eig = np.sort_complex(point.eigenvalues)
            sense = point.sense
            vortex = vortices.get(id(point))
            rows.append(
                {
                    "period": analysis.plane.period,
                    "y": analysis.plane.y,
                    "slant": analysis.plane.slant,
                    "x": point.x,
                    "z": point.z,
                    "kind": point.kind.value,
                    "eig1_re": float(eig[0].real),
                    "eig1_im": float(eig[0].imag),
                    "eig2_re": float(eig[1].real),
                    "eig2_im": float(eig[1].imag),
                    "vortex_size": vortex.size if vortex else math.nan,
                    "sense": sense.value if sense else "",
                    "resolved": vortex.resolved if vortex else "",
                }
            )
    return pd.DataFrame(rows, columns=columns)

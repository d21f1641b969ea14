import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numba import njit, prange
from tqdm import tqdm

from app.config import settings
from app.exceptions import TracerError
from app.models import CellKind, ParticleEnsemble, ParticleStatus, Species, VelocityField, VoxelGrid
from app.utils.parallel import set_threads

logger = logging.getLogger(__name__)

MIN_AREA_PER_PARTICLE = 0.1  # um^2
STALL_STEPS = 10_000
STALL_FRACTION = 1e-6
RETRACT_ITERATIONS = 30
MIN_BIN_COUNT = 5
SEGREGATED_STD = 0.5
ROTATION_PERIODS = 5


@njit(cache=True)
def _trilinear(values, first, lower, upper, h, x, y, z):
    """Velocity at one point from node values on a uniform grid starting at
    ``first``; the point is clamped to [lower, upper] first."""
    x = min(max(x, lower[0]), upper[0])
    y = min(max(y, lower[1]), upper[1])
    z = min(max(z, lower[2]), upper[2])
    sx = (x - first[0]) / h
    sy = (y - first[1]) / h
    sz = (z - first[2]) / h
    i = min(max(int(math.floor(sx)), 0), values.shape[0] - 2)
    j = min(max(int(math.floor(sy)), 0), values.shape[1] - 2)
    k = min(max(int(math.floor(sz)), 0), values.shape[2] - 2)
    fx = sx - i
    fy = sy - j
    fz = sz - k
    u = 0.0
    v = 0.0
    w = 0.0
    for di in range(2):
        wx = fx if di else 1.0 - fx
        for dj in range(2):
            wy = fy if dj else 1.0 - fy
            for dk in range(2):
                weight = wx * wy * (fz if dk else 1.0 - fz)
                u += weight * values[i + di, j + dj, k + dk, 0]
                v += weight * values[i + di, j + dj, k + dk, 1]
                w += weight * values[i + di, j + dj, k + dk, 2]
    return u, v, w


@njit(cache=True, parallel=True)
def _sample(values, first, lower, upper, h, points, out):
    for p in prange(points.shape[0]):
        u, v, w = _trilinear(values, first, lower, upper, h, points[p, 0], points[p, 1], points[p, 2])
        out[p, 0] = u
        out[p, 1] = v
        out[p, 2] = w


@njit(cache=True, parallel=True)
def _rk4(values, first, lower, upper, h, points, dt, out):
    for p in prange(points.shape[0]):
        x, y, z = points[p, 0], points[p, 1], points[p, 2]
        u1, v1, w1 = _trilinear(values, first, lower, upper, h, x, y, z)
        u2, v2, w2 = _trilinear(values, first, lower, upper, h, x + 0.5 * dt * u1, y + 0.5 * dt * v1, z + 0.5 * dt * w1)
        u3, v3, w3 = _trilinear(values, first, lower, upper, h, x + 0.5 * dt * u2, y + 0.5 * dt * v2, z + 0.5 * dt * w2)
        u4, v4, w4 = _trilinear(values, first, lower, upper, h, x + dt * u3, y + dt * v3, z + dt * w3)
        out[p, 0] = x + dt / 6.0 * (u1 + 2.0 * u2 + 2.0 * u3 + u4)
        out[p, 1] = y + dt / 6.0 * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
        out[p, 2] = z + dt / 6.0 * (w1 + 2.0 * w2 + 2.0 * w3 + w4)


class VelocityInterpolator:
    """Trilinear velocity lookup in um/s over cell centres.

    Ghost layers outside the x and z faces carry zero velocity (walls); ghost
    layers beyond the inlet and outlet repeat the face values.
    """

    def __init__(self, field: VelocityField):
        grid = field.grid
        self.h = float(grid.spacing)
        values = np.zeros(tuple(n + 2 for n in grid.dims) + (3,))
        values[1:-1, 1:-1, 1:-1] = field.stacked() * 1e6
        values[:, 0] = values[:, 1]
        values[:, -1] = values[:, -2]
        self.values = values
        self.first = np.asarray(grid.origin, dtype=np.float64) - 0.5 * self.h
        self.lower = np.asarray(grid.origin, dtype=np.float64)
        self.upper = np.asarray(grid.upper, dtype=np.float64)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.empty_like(points)
        _sample(self.values, self.first, self.lower, self.upper, self.h, points, out)
        return out

    def rk4_step(self, points: np.ndarray, dt: float) -> np.ndarray:
        """Classical RK4 step of every point, one particle per parallel task."""
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.empty_like(points)
        _rk4(self.values, self.first, self.lower, self.upper, self.h, points, float(dt), out)
        return out


def interpolate_velocity(field: VelocityField, p, interpolator: Optional[VelocityInterpolator] = None) -> np.ndarray:
    """Velocity (m/s) at one or more positions (um) inside the grid box."""
    points = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if not np.all(field.grid.contains(points)):
        raise TracerError("position outside the domain bounding box")
    interpolator = interpolator or VelocityInterpolator(field)
    velocity = interpolator(points) * 1e-6
    return velocity[0] if np.ndim(p) == 1 else velocity


def rk4_step(velocity_fn: Callable[[np.ndarray], np.ndarray], positions: np.ndarray, dt: float) -> np.ndarray:
    k1 = velocity_fn(positions)
    k2 = velocity_fn(positions + 0.5 * dt * k1)
    k3 = velocity_fn(positions + 0.5 * dt * k2)
    k4 = velocity_fn(positions + dt * k3)
    return positions + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _half_lattice(x_lo: float, x_hi: float, z_lo: float, z_hi: float, spacing: float) -> np.ndarray:
    nx = max(int(math.ceil((x_hi - x_lo) / spacing)), 1)
    nz = max(int(math.ceil((z_hi - z_lo) / spacing)), 1)
    xs = x_lo + (np.arange(nx) + 0.5) * (x_hi - x_lo) / nx
    zs = z_lo + (np.arange(nz) + 0.5) * (z_hi - z_lo) / nz
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    return np.column_stack([X.ravel(), Z.ravel()])


def seed_inlet(grid: VoxelGrid, n_total: int) -> ParticleEnsemble:
    """Jitter-free lattice of tracers on the inlet face, A left and B right."""
    if n_total <= 0 or n_total % 2:
        raise TracerError(f"n_total must be a positive even number, got {n_total}")
    inlet = np.isin(grid.cells[:, 0, :], [CellKind.INLET_A, CellKind.INLET_B])
    if not inlet.any():
        raise TracerError("inlet face has no fluid cells")
    h = grid.spacing
    area = float(inlet.sum()) * h * h
    if n_total > area / MIN_AREA_PER_PARTICLE:
        raise TracerError(f"{n_total} particles exceed one per {MIN_AREA_PER_PARTICLE} um^2 of inlet area")

    ii, kk = np.nonzero(inlet)
    x_lo = grid.origin[0] + ii.min() * h
    x_hi = grid.origin[0] + (ii.max() + 1) * h
    z_lo = grid.origin[2] + kk.min() * h
    z_hi = grid.origin[2] + (kk.max() + 1) * h
    centerline = grid.config.channel_width / 2.0 if grid.config else 0.5 * (x_lo + x_hi)
    y0 = grid.origin[1]

    n_half = n_total // 2
    spacing = math.sqrt(area / 2.0 / n_half)
    for _ in range(200):
        lattice = _half_lattice(x_lo, centerline, z_lo, z_hi, spacing)
        candidates = np.column_stack([lattice[:, 0], np.full(len(lattice), y0), lattice[:, 1]])
        candidates = candidates[grid.is_fluid_at(candidates)]
        if len(candidates) >= n_half:
            break
        spacing *= 0.95
    else:
        raise TracerError("could not place the requested particles on the inlet face")

    # trim the outermost lattice points until exactly n_half remain
    middle = np.array([0.5 * (x_lo + centerline), 0.5 * (z_lo + z_hi)])
    distance = np.hypot(candidates[:, 0] - middle[0], candidates[:, 2] - middle[1])
    keep = np.sort(np.argsort(distance, kind="stable")[:n_half])
    left = candidates[keep]
    right = left.copy()
    right[:, 0] = 2.0 * centerline - left[:, 0]
    if not np.all(grid.is_fluid_at(right)):
        raise TracerError("inlet face is not symmetric about the channel centreline")

    positions = np.vstack([left, right])
    species = np.concatenate([np.full(n_half, Species.A), np.full(n_half, Species.B)])
    logger.info("Seeded %d particles (lattice spacing %.3g um)", n_total, spacing)
    return ParticleEnsemble(
        positions=positions,
        species=species,
        status=np.full(n_total, ParticleStatus.ACTIVE),
        metadata={"grid_dims": list(grid.dims), "grid_spacing": h, "seed_spacing_um": spacing},
    )


def _retract(grid: VoxelGrid, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Last fluid point on each segment start -> end, found by bisection."""
    low = np.zeros(len(start))
    high = np.ones(len(start))
    step = end - start
    for _ in range(RETRACT_ITERATIONS):
        middle = 0.5 * (low + high)
        fluid = grid.is_fluid_at(start + middle[:, None] * step)
        low = np.where(fluid, middle, low)
        high = np.where(fluid, high, middle)
    return start + low[:, None] * step


def advect(
    field: VelocityField,
    ens: ParticleEnsemble,
    planes: Sequence[float],
    cfl: float = 0.5,
    max_steps: int = 1_000_000,
    threads: int = 1,
) -> ParticleEnsemble:
    """RK4 transport of every particle to the outlet, recording the first
    crossing of each plane. Each particle is stepped by its own parallel task,
    so the result does not depend on ``threads``."""
    if len(ens) == 0:
        raise TracerError("empty particle ensemble")
    grid = field.grid
    dims = ens.metadata.get("grid_dims")
    if dims is not None and tuple(dims) != grid.dims:
        raise TracerError(f"ensemble was seeded on a {tuple(dims)} grid, field is {grid.dims}")
    speed = field.max_speed * 1e6
    if speed <= 0.0:
        raise TracerError("velocity field is identically zero")

    dt = cfl * grid.spacing / speed
    interpolator = VelocityInterpolator(field)
    planes = [float(y) for y in planes]
    used = set_threads(threads)
    logger.info("Tracing %d particles, dt=%.3g s, %d threads", len(ens), dt, used)

    pos = ens.positions.copy()
    n = len(pos)
    status = np.full(n, ParticleStatus.ACTIVE, dtype=np.int8)
    crossings = np.full((len(planes), n, 2), np.nan)
    slow = np.zeros(n, dtype=np.int64)
    y_end = grid.upper[1]
    min_advance = STALL_FRACTION * grid.spacing

    progress = tqdm(total=n, desc="trace", disable=not settings.show_progress)
    for _ in range(max_steps):
        active = np.flatnonzero(status == ParticleStatus.ACTIVE)
        if active.size == 0:
            break
        start = pos[active]
        end = interpolator.rk4_step(start, dt)

        beyond = end[:, 1] >= y_end
        blocked = ~beyond & ~grid.is_fluid_at(end)
        if blocked.any():
            end[blocked] = _retract(grid, start[blocked], end[blocked])

        for k, y_plane in enumerate(planes):
            hit = (start[:, 1] < y_plane) & (end[:, 1] >= y_plane) & np.isnan(crossings[k, active, 0])
            if hit.any():
                t = (y_plane - start[hit, 1]) / (end[hit, 1] - start[hit, 1])
                crossings[k, active[hit], 0] = start[hit, 0] + t * (end[hit, 0] - start[hit, 0])
                crossings[k, active[hit], 1] = start[hit, 2] + t * (end[hit, 2] - start[hit, 2])

        advance = np.linalg.norm(end - start, axis=1)
        slow[active] = np.where(advance < min_advance, slow[active] + 1, 0)
        pos[active] = end
        status[active[beyond]] = ParticleStatus.EXITED
        stalled = active[~beyond & (slow[active] >= STALL_STEPS)]
        status[stalled] = ParticleStatus.STALLED
        progress.update(int(np.count_nonzero(beyond)) + len(stalled))
    progress.close()

    leftover = status == ParticleStatus.ACTIVE
    if leftover.any():
        logger.warning("%d particles still active after %d steps, marked stalled", int(leftover.sum()), max_steps)
        status[leftover] = ParticleStatus.STALLED
    stalled = int(np.count_nonzero(status == ParticleStatus.STALLED))
    if stalled:
        logger.warning("%d of %d particles stalled (%.2f%%)", stalled, n, 100.0 * stalled / n)
    metadata = dict(ens.metadata, time_step_s=dt, cfl=cfl)
    return ParticleEnsemble(positions=pos, species=ens.species.copy(), status=status, planes=planes, crossings=crossings, metadata=metadata)


def mixing_index(
    snapshot: np.ndarray,
    bins: Tuple[int, int] = (10, 7),
    extent: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None,
) -> float:
    """1 - std(species-A fraction)/0.5 over bins holding at least 5 particles.

    Points outside ``extent`` count in the nearest edge bin, so groove
    particles below the floor land in the bottom row.
    """
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if snapshot.size == 0:
        raise TracerError("empty snapshot")
    x, z, species = snapshot[:, 0], snapshot[:, 1], snapshot[:, 2]
    if extent is None:
        extent = ((x.min(), x.max()), (z.min(), z.max()))
    (x0, x1), (z0, z1) = extent
    x1 = x1 if x1 > x0 else x0 + 1.0
    z1 = z1 if z1 > z0 else z0 + 1.0
    x = np.clip(x, x0, x1)
    z = np.clip(z, z0, z1)
    total, _, _ = np.histogram2d(x, z, bins=bins, range=((x0, x1), (z0, z1)))
    of_a, _, _ = np.histogram2d(x[species == Species.A], z[species == Species.A], bins=bins, range=((x0, x1), (z0, z1)))
    counted = total >= MIN_BIN_COUNT
    if not counted.any():
        raise TracerError(f"no bin holds {MIN_BIN_COUNT} particles")
    fractions = of_a[counted] / total[counted]
    return float(np.clip(1.0 - fractions.std() / SEGREGATED_STD, 0.0, 1.0))


def mean_rotation(ens: ParticleEnsemble, first: int, last: int, axis: Tuple[float, float]) -> float:
    """Ensemble-mean angle (rad) swept about the (x, z) axis point between two
    plane indices, accumulated plane by plane."""
    if not 0 <= first < last < len(ens.planes):
        raise TracerError(f"plane range {first}..{last} outside 0..{len(ens.planes) - 1}")
    crossed = ~np.isnan(ens.crossings[first : last + 1, :, 0]).any(axis=0)
    if not crossed.any():
        raise TracerError("no particle crossed every plane in the range")
    points = ens.crossings[first : last + 1, crossed, :]
    angles = np.arctan2(points[..., 1] - axis[1], points[..., 0] - axis[0])
    steps = np.angle(np.exp(1j * np.diff(angles, axis=0)))
    return float(steps.sum(axis=0).mean())


def rotation_summary(ens: ParticleEnsemble, axis: Tuple[float, float], periods: int = ROTATION_PERIODS) -> Dict[str, Any]:
    """Mean swept angle over the first ``periods`` planes and its sense.

    A positive angle turns from +x towards +z, which is CCW in the vorticity
    convention (omega_y > 0 is CW).
    """
    last = min(periods, len(ens.planes)) - 1
    summary: Dict[str, Any] = {"mean_rotation_rad": None, "rotation_sense": None, "rotation_planes": max(last + 1, 0)}
    if last < 1:
        return summary
    try:
        angle = mean_rotation(ens, 0, last, axis)
    except TracerError as e:
        logger.warning("No rotation summary: %s", e.detail)
        return summary
    summary["mean_rotation_rad"] = angle
    summary["rotation_sense"] = "CCW" if angle > 0 else "CW" if angle < 0 else None
    return summary


def snapshot_frame(ens: ParticleEnsemble, k: int) -> pd.DataFrame:
    rows = ens.snapshot(k)
    return pd.DataFrame(
        {
            "x": rows[:, 0],
            "y": np.full(len(rows), ens.planes[k]),
            "z": rows[:, 1],
            "species": rows[:, 2].astype(np.int64),
            "period": np.full(len(rows), k + 1, dtype=np.int64),
        }
    )


def status_counts(ens: ParticleEnsemble) -> List[int]:
    return [ens.count(status) for status in ParticleStatus]

import logging
import math
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from app.exceptions import GeometryError
from app.models import CellKind, VoxelGrid
from app.schemas import MixerConfig

logger = logging.getLogger(__name__)

FLUID = CellKind.FLUID
SOLID = CellKind.SOLID


def bounding_box(config: MixerConfig, include_inlets: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Lower and upper corners (um) of the configured domain."""
    arm = config.inlet_length if include_inlets else 0.0
    lower = np.array([-arm, 0.0, config.floor_z])
    upper = np.array([config.channel_width + arm, config.channel_length, config.channel_height])
    return lower, upper


def triangle_wave(phase: np.ndarray) -> np.ndarray:
    """Unit zigzag: 0 at phase 0, +1 at 1/4, -1 at 3/4, periodic in 1."""
    s = np.mod(phase, 1.0)
    return np.where(s < 0.25, 4.0 * s, np.where(s < 0.75, 2.0 - 4.0 * s, 4.0 * s - 4.0))


def barrier_centerline(config: MixerConfig, y) -> np.ndarray:
    """Lateral position x_b(y) of the zigzag barrier centreline."""
    y = np.asarray(y, dtype=np.float64)
    phase = (y - config.patterned_start) / config.barrier_period
    return config.channel_width / 2.0 + config.barrier_amplitude * triangle_wave(phase)


def groove_centers(config: MixerConfig) -> np.ndarray:
    """y where each groove centreline crosses x = W/2."""
    centers = [
        config.patterned_start + k * config.barrier_period + (j + 0.5) * config.groove_pitch
        for k in range(config.n_periods)
        for j in range(config.grooves_per_period)
    ]
    return np.asarray(centers, dtype=np.float64)


def _in_patterned_band(config: MixerConfig, y: np.ndarray) -> np.ndarray:
    return (y >= config.patterned_start) & (y <= config.patterned_end)


def _groove_mask(config: MixerConfig, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    mask = np.zeros(x.shape, dtype=bool)
    if not config.has_grooves or config.n_periods == 0:
        return mask
    candidate = (z >= -config.groove_depth) & (z < 0.0) & (x >= 0.0) & (x <= config.channel_width)
    candidate &= _in_patterned_band(config, y)
    if not candidate.any():
        return mask
    theta = math.radians(config.groove_angle)
    xs, ys = x[candidate], y[candidate]
    # distance measured along y, then projected onto the groove normal
    shifted = ys - (xs - config.channel_width / 2.0) * math.tan(theta)
    half = config.groove_width / 2.0
    hit = np.zeros(xs.shape, dtype=bool)
    for center in groove_centers(config):
        hit |= np.abs(shifted - center) * math.cos(theta) <= half
    mask[candidate] = hit
    return mask


def _barrier_mask(config: MixerConfig, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    if not config.has_barrier or config.n_periods == 0:
        return np.zeros(x.shape, dtype=bool)
    slope = 4.0 * config.barrier_amplitude / config.barrier_period
    half_span = config.barrier_width / 2.0 * math.sqrt(1.0 + slope**2)
    lateral = np.abs(x - barrier_centerline(config, y))
    return (
        _in_patterned_band(config, y)
        & (z >= config.channel_height - config.barrier_height)
        & (z <= config.channel_height)
        & (lateral <= half_span)
    )


def fluid_mask(config: MixerConfig, points: np.ndarray, include_inlets: bool = True) -> np.ndarray:
    """Vectorised membership: True where a point (um) lies in fluid."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    W, L, H = config.channel_width, config.channel_length, config.channel_height

    in_duct = (x >= 0.0) & (x <= W) & (y >= 0.0) & (y <= L) & (z >= 0.0) & (z <= H)
    fluid = in_duct | _groove_mask(config, x, y, z)
    if include_inlets:
        in_arm_band = (y >= 0.0) & (y <= config.inlet_arm_width) & (z >= 0.0) & (z <= H)
        arm_a = (x >= -config.inlet_length) & (x < 0.0)
        arm_b = (x > W) & (x <= W + config.inlet_length)
        fluid |= in_arm_band & (arm_a | arm_b)
    return fluid & ~_barrier_mask(config, x, y, z)


def classify_point(config: MixerConfig, p) -> CellKind:
    """FLUID or SOLID for one point in um; raises outside the bounding box."""
    point = np.asarray(p, dtype=np.float64).reshape(3)
    lower, upper = bounding_box(config)
    if not np.all(np.isfinite(point)) or np.any(point < lower) or np.any(point > upper):
        raise GeometryError(f"outside domain: {tuple(float(v) for v in point)}")
    return FLUID if fluid_mask(config, point)[0] else SOLID


def _check_divides(length: float, h: float, name: str) -> int:
    ratio = length / h
    n = max(int(round(ratio)), 1)
    if abs(ratio - n) > 0.01 * ratio:
        logger.warning("Grid spacing %.4g um does not divide %s (%.4g um) within 1%%", h, name, length)
    return n


def voxelize(config: MixerConfig, h: float) -> VoxelGrid:
    """Sample the mixing channel at cell centres and flag inlet/outlet faces."""
    if not h > 0:
        raise GeometryError(f"grid spacing must be positive, got {h}")
    if config.has_barrier and config.barrier_height >= config.channel_height:
        raise GeometryError("geometry disconnected: barrier reaches the channel floor and splits the duct")

    nx = _check_divides(config.channel_width, h, "channel_width")
    _check_divides(config.channel_height, h, "channel_height")
    ny = max(int(round(config.channel_length / h)), 1)
    nz = max(int(round((config.channel_height - config.floor_z) / h)), 1)
    origin = (0.0, 0.0, config.floor_z)

    xc = origin[0] + (np.arange(nx) + 0.5) * h
    yc = origin[1] + (np.arange(ny) + 0.5) * h
    zc = origin[2] + (np.arange(nz) + 0.5) * h
    X, Y, Z = np.meshgrid(xc, yc, zc, indexing="ij")
    points = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    fluid = fluid_mask(config, points, include_inlets=False).reshape(nx, ny, nz)

    cells = np.where(fluid, int(FLUID), int(SOLID)).astype(np.int8)
    inlet = fluid[:, 0, :]
    left = (xc < config.channel_width / 2.0)[:, None]
    cells[:, 0, :] = np.where(inlet & left, int(CellKind.INLET_A), np.where(inlet, int(CellKind.INLET_B), cells[:, 0, :]))
    outlet = fluid[:, -1, :]
    cells[:, -1, :] = np.where(outlet, int(CellKind.OUTLET), cells[:, -1, :])

    if not inlet.any() or not outlet.any():
        raise GeometryError("geometry disconnected: inlet or outlet face has no fluid cells")
    _, n_components = ndimage.label(fluid, structure=ndimage.generate_binary_structure(3, 1))
    if n_components != 1:
        raise GeometryError(f"geometry disconnected: fluid region has {n_components} components")

    logger.info(
        "Voxelized %s mixer at h=%.3g um: %d x %d x %d cells, %d fluid",
        config.variant.value, h, nx, ny, nz, int(fluid.sum()),
    )
    return VoxelGrid(spacing=float(h), origin=origin, cells=cells, config=config)


def fluid_volume(grid: VoxelGrid) -> float:
    """Voxel estimate of the fluid volume in um^3."""
    return grid.n_fluid * grid.spacing**3


def period_planes(config: MixerConfig) -> List[float]:
    return [config.entrance_offset + k * config.barrier_period for k in range(1, config.n_periods + 1)]

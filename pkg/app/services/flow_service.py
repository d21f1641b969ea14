import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
from numba import njit, prange
from tqdm import tqdm

from app.config import settings
from app.exceptions import FlowConvergenceError, FlowError, FlowStabilityError
from app.models import CellKind, VelocityField, VoxelGrid
from app.schemas import FlowConditions, MixerConfig, NumericControls
from app.utils.parallel import set_threads
from app.utils.units import UM

logger = logging.getLogger(__name__)

# D3Q19 lattice: rest, 6 faces, 12 edges
LATTICE_VELOCITIES = np.array(
    [
        [0, 0, 0],
        [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
        [1, 1, 0], [-1, -1, 0], [1, -1, 0], [-1, 1, 0],
        [1, 0, 1], [-1, 0, -1], [1, 0, -1], [-1, 0, 1],
        [0, 1, 1], [0, -1, -1], [0, 1, -1], [0, -1, 1],
    ],
    dtype=np.int64,
)
LATTICE_WEIGHTS = np.array([1.0 / 3.0] + [1.0 / 18.0] * 6 + [1.0 / 36.0] * 12)
OPPOSITE_LATTICE_INDICES = np.array([0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15, 18, 17], dtype=np.int64)
N_DIRECTIONS = 19

# streaming link kinds
PULL = 0
BOUNCE = 1
INLET = 2
OUTLET = 3

# peak-to-mean speed ratio used to screen configurations before solving
PEAK_TO_MEAN = 2.1


def analytic_duct_velocity(W: float, H: float, Q: float, x, z, terms: int = 500) -> np.ndarray:
    """Fully developed axial velocity in a W x H rectangular duct.

    Lengths in any consistent unit; the returned velocity is Q divided by the
    area unit (m and m^3/s give m/s). Normalised so the profile integrates to Q.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = 2 * np.arange(terms, dtype=np.float64) + 1.0
    k = n * math.pi / H
    half = W / 2.0
    xs = np.abs(x - half)[..., None]
    # cosh(k xs) / cosh(k W/2) without overflow
    ratio = np.exp(k * (xs - half)) * (1.0 + np.exp(-2.0 * k * xs)) / (1.0 + np.exp(-2.0 * k * half))
    shape = np.sum((1.0 - ratio) * np.sin(k * z[..., None]) / n**3, axis=-1)
    integral = np.sum((2.0 / k) * (W - (2.0 / k) * np.tanh(k * half)) / n**3)
    inside = (x >= 0.0) & (x <= W) & (z >= 0.0) & (z <= H)
    return np.where(inside, Q * shape / integral, 0.0)


def duct_pressure_gradient(W: float, H: float, Q: float, mu: float, terms: int = 500) -> float:
    """Magnitude of dp/dy (Pa/m) driving flow Q through a W x H duct (SI)."""
    n = 2 * np.arange(terms, dtype=np.float64) + 1.0
    k = n * math.pi / H
    integral = np.sum((2.0 / k) * (W - (2.0 / k) * np.tanh(k * W / 2.0)) / n**3)
    return float(Q * mu * math.pi**3 / (4.0 * H**2 * integral))


def reynolds(cond: FlowConditions, config: MixerConfig) -> float:
    W = config.channel_width * UM
    H = config.channel_height * UM
    mean_velocity = cond.total_flow_rate / (W * H)
    hydraulic_diameter = 2.0 * W * H / (W + H)
    return cond.density * mean_velocity * hydraulic_diameter / cond.dynamic_viscosity


def mean_velocity(cond: FlowConditions, config: MixerConfig) -> float:
    return cond.total_flow_rate / (config.channel_width * UM * config.channel_height * UM)


@njit(cache=True, parallel=True)
def _collide(f, rho, omega, linear):
    """BGK relaxation in place; leaves the cell densities in ``rho``."""
    n = f.shape[1]
    for c in prange(n):
        density = 0.0
        jx = 0.0
        jy = 0.0
        jz = 0.0
        for i in range(N_DIRECTIONS):
            density += f[i, c]
            jx += LATTICE_VELOCITIES[i, 0] * f[i, c]
            jy += LATTICE_VELOCITIES[i, 1] * f[i, c]
            jz += LATTICE_VELOCITIES[i, 2] * f[i, c]
        rho[c] = density
        jsq = jx * jx + jy * jy + jz * jz
        for i in range(N_DIRECTIONS):
            cu = LATTICE_VELOCITIES[i, 0] * jx + LATTICE_VELOCITIES[i, 1] * jy + LATTICE_VELOCITIES[i, 2] * jz
            feq = density + 3.0 * cu
            if not linear:
                feq += 4.5 * cu * cu - 1.5 * jsq
            f[i, c] += omega * (LATTICE_WEIGHTS[i] * feq - f[i, c])


@njit(cache=True, parallel=True)
def _stream(f_post, f_next, rho, sources, links, u_inlet):
    n = f_post.shape[1]
    for c in prange(n):
        for i in range(N_DIRECTIONS):
            kind = links[i, c]
            if kind == PULL:
                f_next[i, c] = f_post[i, sources[i, c]]
            elif kind == BOUNCE:
                f_next[i, c] = f_post[OPPOSITE_LATTICE_INDICES[i], c]
            elif kind == INLET:
                injected = 6.0 * LATTICE_WEIGHTS[i] * LATTICE_VELOCITIES[i, 1] * u_inlet
                f_next[i, c] = f_post[OPPOSITE_LATTICE_INDICES[i], c] + injected
            else:
                # zero-gradient copy with the density pinned to the reference value
                upstream = sources[i, c]
                f_next[i, c] = f_post[i, upstream] - LATTICE_WEIGHTS[i] * (rho[upstream] - 1.0)


def inlet_buffer_grid(grid: VoxelGrid, layers: int) -> VoxelGrid:
    """``grid`` extended upstream by ``layers`` copies of its inlet section.

    The inlet flags move to the first buffer layer; the original inlet layer
    becomes ordinary fluid.
    """
    if layers <= 0:
        return grid
    face = grid.cells[:, :1, :]
    developed = np.where(face == CellKind.SOLID, int(CellKind.SOLID), int(CellKind.FLUID)).astype(np.int8)
    body = grid.cells.copy()
    body[:, :1, :] = developed
    cells = np.concatenate([face, np.repeat(developed, layers - 1, axis=1), body], axis=1)
    origin = (grid.origin[0], grid.origin[1] - layers * grid.spacing, grid.origin[2])
    return VoxelGrid(spacing=grid.spacing, origin=origin, cells=cells, config=grid.config)


class LatticeFlowSolver:
    """Single-relaxation-time D3Q19 solver over the fluid cells of a grid.

    Populations are stored only for fluid cells, shape (19, n_fluid); streaming
    pulls through precomputed source indices. The lattice carries a straight
    development buffer upstream of the inlet face; the plug inlet condition
    acts on the buffer's first layer and the buffer is dropped from the
    returned field.
    """

    def __init__(
        self,
        grid: VoxelGrid,
        cond: FlowConditions,
        numerics: Optional[NumericControls] = None,
        threads: int = 1,
        show_progress: Optional[bool] = None,
    ):
        self.field_grid = grid
        self.cond = cond
        self.numerics = numerics or NumericControls()
        self.threads = max(int(threads), 1)
        self.show_progress = settings.show_progress if show_progress is None else show_progress

        self.tau = self.numerics.relaxation_time
        if not 0.55 <= self.tau <= 1.5:
            raise FlowStabilityError(f"relaxation time {self.tau} outside [0.55, 1.5]")
        self.omega = 1.0 / self.tau
        self.nu_lb = (self.tau - 0.5) / 3.0
        self.h = grid.spacing * UM
        self.dt = self.nu_lb * self.h**2 / cond.kinematic_viscosity
        self.velocity_scale = self.h / self.dt

        self.buffer_layers = self._buffer_layers(grid)
        self.grid = inlet_buffer_grid(grid, self.buffer_layers)
        self._index_fluid_cells()
        self._build_streaming_tables()

        self.inlet_area_cells = int(np.count_nonzero(self._inlet_cells))
        q_lb = cond.total_flow_rate * self.dt / self.h**3
        self.u_mean_lb = q_lb / max(self.inlet_area_cells, 1)
        # scale link injection so the inlet carries exactly Q
        self.inlet_link_scale = (
            self.inlet_area_cells / self._inlet_link_weight if self._inlet_link_weight > 0 else 0.0
        )
        self.u_inlet_lb = self.u_mean_lb * self.inlet_link_scale

    # setup

    def _buffer_layers(self, grid: VoxelGrid) -> int:
        length = self.numerics.inlet_buffer
        if length is None:
            length = grid.config.inlet_length if grid.config else 0.0
        return int(round(length / grid.spacing))

    def _index_fluid_cells(self):
        dims = self.grid.dims
        flat_fluid = self.grid.fluid_mask.ravel()
        self.fluid_index = np.flatnonzero(flat_fluid)
        self.n = len(self.fluid_index)
        self.lookup = np.full(flat_fluid.size, -1, dtype=np.int64)
        self.lookup[self.fluid_index] = np.arange(self.n)
        self.ix, self.iy, self.iz = np.unravel_index(self.fluid_index, dims)
        cells = self.grid.cells.ravel()[self.fluid_index]
        self._inlet_cells = (cells == CellKind.INLET_A) | (cells == CellKind.INLET_B)

    def _neighbor(self, sx, sy, sz) -> np.ndarray:
        nx, ny, nz = self.grid.dims
        inside = (sx >= 0) & (sx < nx) & (sy >= 0) & (sy < ny) & (sz >= 0) & (sz < nz)
        source = np.full(sx.shape, -1, dtype=np.int64)
        flat = np.ravel_multi_index(
            (np.clip(sx, 0, nx - 1), np.clip(sy, 0, ny - 1), np.clip(sz, 0, nz - 1)), (nx, ny, nz)
        )
        source[inside] = self.lookup[flat[inside]]
        return source

    def _build_streaming_tables(self):
        """Per direction and cell: the link kind and the cell it reads from
        (the upstream face cell for outlet links)."""
        ny = self.grid.dims[1]
        self.sources = np.zeros((N_DIRECTIONS, self.n), dtype=np.int64)
        self.links = np.full((N_DIRECTIONS, self.n), PULL, dtype=np.int8)
        inlet_weight = 0.0
        for i, (cx, cy, cz) in enumerate(LATTICE_VELOCITIES):
            sx, sy, sz = self.ix - cx, self.iy - cy, self.iz - cz
            source = self._neighbor(sx, sy, sz)
            missing = source < 0
            links = np.where(missing, BOUNCE, PULL).astype(np.int8)
            if cy == 1:
                face = self._neighbor(sx, np.zeros_like(sy), sz)
                inlet = missing & (sy < 0) & (face >= 0)
                links[inlet] = INLET
                inlet_weight += LATTICE_WEIGHTS[i] * 6.0 * np.count_nonzero(inlet)
            elif cy == -1:
                face = self._neighbor(sx, np.full_like(sy, ny - 1), sz)
                outlet = missing & (sy >= ny) & (face >= 0)
                links[outlet] = OUTLET
                source = np.where(outlet, face, source)
            self.sources[i] = np.where(source < 0, 0, source)
            self.links[i] = links
        self._inlet_link_weight = inlet_weight

    # kernels

    def equilibrium(self, rho: np.ndarray, j: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
        if out is None:
            out = np.empty((N_DIRECTIONS, rho.size))
        jsq = j[0] ** 2 + j[1] ** 2 + j[2] ** 2
        for i, (cx, cy, cz) in enumerate(LATTICE_VELOCITIES):
            cu = cx * j[0] + cy * j[1] + cz * j[2]
            if self.cond.stokes_mode:
                out[i] = LATTICE_WEIGHTS[i] * (rho + 3.0 * cu)
            else:
                out[i] = LATTICE_WEIGHTS[i] * (rho + 3.0 * cu + 4.5 * cu**2 - 1.5 * jsq)
        return out

    @staticmethod
    def moments(f: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        rho = f.sum(axis=0)
        c = LATTICE_VELOCITIES
        j = np.stack(
            [
                f[c[:, 0] == 1].sum(axis=0) - f[c[:, 0] == -1].sum(axis=0),
                f[c[:, 1] == 1].sum(axis=0) - f[c[:, 1] == -1].sum(axis=0),
                f[c[:, 2] == 1].sum(axis=0) - f[c[:, 2] == -1].sum(axis=0),
            ]
        )
        return rho, j

    def step(self, f: np.ndarray, f_next: np.ndarray, rho: np.ndarray):
        """One collide-and-stream update from ``f`` into ``f_next``; ``f`` is
        left post-collision."""
        _collide(f, rho, self.omega, self.cond.stokes_mode)
        _stream(f, f_next, rho, self.sources, self.links, self.u_inlet_lb)

    def initial_state(self) -> np.ndarray:
        config = self.grid.config
        W = config.channel_width * UM if config else self.grid.dims[0] * self.h
        H = config.channel_height * UM if config else self.grid.dims[2] * self.h
        xc = self.grid.centers(0)[self.ix] * UM
        yc = self.grid.centers(1)[self.iy] * UM
        zc = self.grid.centers(2)[self.iz] * UM
        q = self.cond.total_flow_rate
        v = analytic_duct_velocity(W, H, q, xc, zc)
        gradient = duct_pressure_gradient(W, H, abs(q), self.cond.dynamic_viscosity) * math.copysign(1.0, q)
        length = self.grid.upper[1] * UM
        pressure = gradient * (length - yc)
        rho = 1.0 + 3.0 * pressure * self.dt**2 / (self.cond.density * self.h**2)
        j = np.zeros((3, self.n))
        j[1] = v * self.dt / self.h
        return self.equilibrium(rho, j)

    def check_stability(self):
        fluid = self.grid.fluid_mask
        section = fluid.sum(axis=(0, 2))
        narrowest = max(int(section.min()), 1)
        peak = PEAK_TO_MEAN * abs(self.u_mean_lb) * self.inlet_area_cells / narrowest
        if peak > self.numerics.max_lattice_speed:
            raise FlowStabilityError(
                f"estimated lattice speed {peak:.3g} exceeds {self.numerics.max_lattice_speed}: reduce flow rate or refine"
            )
        return peak

    def solve(self, tol: Optional[float] = None) -> VelocityField:
        tol = self.numerics.flow_tol if tol is None else tol
        if not 0.0 < tol <= 1e-3:
            raise FlowError(f"tolerance {tol} outside (0, 1e-3]")
        if self.cond.flow_rate_per_inlet == 0.0 or self.n == 0:
            logger.info("Zero flow rate, returning a quiescent field")
            zeros = np.zeros(self.field_grid.dims)
            return VelocityField(self.field_grid, zeros, zeros, zeros, zeros, 0.0, [], self.metadata(0))

        peak = self.check_stability()
        threads = set_threads(self.threads)
        logger.info(
            "LBM solve: %d fluid cells (%d buffer layers), tau=%.4f, dt=%.4g s, u_mean=%.4g (lattice), "
            "peak estimate %.4g, %d threads",
            self.n, self.buffer_layers, self.tau, self.dt, self.u_mean_lb, peak, threads,
        )

        f = self.initial_state()
        f_next = np.empty_like(f)
        rho = np.empty(self.n)
        window = self.numerics.convergence_window
        max_iterations = self.numerics.max_flow_iterations
        history: List[Tuple[int, float]] = []
        _, j_previous = self.moments(f)
        residual = math.inf
        iteration = 0

        progress = tqdm(total=max_iterations, desc="flow", disable=not self.show_progress)
        try:
            while iteration < max_iterations:
                self.step(f, f_next, rho)
                f, f_next = f_next, f
                iteration += 1
                progress.update(1)

                if iteration % window == 0:
                    _, j = self.moments(f)
                    norm = float(np.linalg.norm(j))
                    if not np.all(np.isfinite(j)):
                        raise FlowStabilityError("solution diverged: reduce flow rate or refine")
                    speed = float(np.sqrt((j**2).sum(axis=0)).max())
                    if speed > 2.0 * self.numerics.max_lattice_speed:
                        raise FlowStabilityError(f"lattice speed {speed:.3g} too high: reduce flow rate or refine")
                    residual = float(np.linalg.norm(j - j_previous)) / norm if norm > 0 else 0.0
                    history.append((iteration, residual))
                    j_previous = j
                    logger.debug("iteration %d residual %.3e", iteration, residual)
                    if residual < tol:
                        break
        finally:
            progress.close()

        if residual >= tol:
            raise FlowConvergenceError(
                f"no convergence after {iteration} iterations (residual {residual:.3e} > {tol:.1e})", history
            )
        logger.info("Flow converged after %d iterations (residual %.3e)", iteration, residual)
        return self._to_field(f, residual, history, iteration)

    def metadata(self, iterations: int) -> Dict[str, float]:
        return {
            "relaxation_time": self.tau,
            "lattice_viscosity": self.nu_lb,
            "time_step_s": self.dt,
            "grid_spacing_m": self.h,
            "velocity_scale_m_per_s": self.velocity_scale,
            "pressure_scale_pa": self.cond.density * self.velocity_scale**2,
            "inlet_velocity_lattice": self.u_mean_lb,
            "inlet_cells": self.inlet_area_cells,
            "inlet_buffer_layers": self.buffer_layers,
            "iterations": iterations,
            "stokes_mode": self.cond.stokes_mode,
        }

    def _to_field(self, f: np.ndarray, residual: float, history, iterations: int) -> VelocityField:
        rho, j = self.moments(f)
        dims = self.grid.dims
        keep = slice(self.buffer_layers, None)

        def on_grid(values: np.ndarray) -> np.ndarray:
            full = np.zeros(int(np.prod(dims)))
            full[self.fluid_index] = values
            return full.reshape(dims)[:, keep, :]

        u, v, w = (on_grid(component * self.velocity_scale) for component in j)
        pressure = on_grid((rho - 1.0) / 3.0 * self.cond.density * self.velocity_scale**2)
        return VelocityField(
            grid=self.field_grid,
            u=u,
            v=v,
            w=w,
            p=pressure,
            residual=residual,
            history=history,
            metadata=self.metadata(iterations),
        )


def solve_steady(
    grid: VoxelGrid,
    cond: FlowConditions,
    tol: Optional[float] = None,
    numerics: Optional[NumericControls] = None,
    threads: int = 1,
) -> VelocityField:
    solver = LatticeFlowSolver(grid, cond, numerics=numerics, threads=threads)
    return solver.solve(tol)


def flux_through_plane(field: VelocityField, y: float) -> float:
    """Volumetric flux (m^3/s) through the cell layer holding plane y (um)."""
    grid = field.grid
    if not grid.origin[1] <= y <= grid.upper[1]:
        raise FlowError(f"plane y={y} outside domain")
    layer = grid.layer_index(y)
    area = (grid.spacing * UM) ** 2
    return float(field.v[:, layer, :].sum() * area)


def vorticity_y(field: VelocityField) -> np.ndarray:
    """Axial vorticity du/dz - dw/dx in 1/s."""
    h = field.grid.spacing * UM
    omega = np.gradient(field.u, h, axis=2) - np.gradient(field.w, h, axis=0)
    omega[~field.grid.fluid_mask] = 0.0
    return omega


def max_divergence(field: VelocityField) -> float:
    """Largest central-difference divergence (1/s) over cells whose six
    neighbours are all fluid."""
    fluid = field.grid.fluid_mask
    h = field.grid.spacing * UM
    interior = fluid[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(fluid, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    if not interior.any():
        return 0.0
    divergence = (
        (field.u[2:, 1:-1, 1:-1] - field.u[:-2, 1:-1, 1:-1])
        + (field.v[1:-1, 2:, 1:-1] - field.v[1:-1, :-2, 1:-1])
        + (field.w[1:-1, 1:-1, 2:] - field.w[1:-1, 1:-1, :-2])
    ) / (2.0 * h)
    return float(np.abs(divergence[interior]).max())


def pressure_drop(field: VelocityField) -> float:
    """Mean inlet-layer pressure minus mean outlet-layer pressure (Pa)."""
    fluid = field.grid.fluid_mask
    inlet = field.p[:, 0, :][fluid[:, 0, :]].mean()
    outlet = field.p[:, -1, :][fluid[:, -1, :]].mean()
    return float(inlet - outlet)

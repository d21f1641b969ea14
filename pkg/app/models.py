from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.schemas import MixerConfig, TransportParams


class CellKind(IntEnum):
    FLUID = 0
    SOLID = 1
    INLET_A = 2
    INLET_B = 3
    OUTLET = 4


class Species(IntEnum):
    A = 0
    B = 1


class ParticleStatus(IntEnum):
    ACTIVE = 0
    EXITED = 1
    STALLED = 2


class CriticalPointKind(str, Enum):
    SADDLE = "SADDLE"
    NODE_SOURCE = "NODE_SOURCE"
    NODE_SINK = "NODE_SINK"
    FOCUS_CW = "FOCUS_CW"
    FOCUS_CCW = "FOCUS_CCW"
    CENTER = "CENTER"
    DEGENERATE = "DEGENERATE"


class RotationSense(str, Enum):
    CW = "CW"
    CCW = "CCW"


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class VoxelGrid:
    """Cell-centred Cartesian grid. ``origin`` is the (0,0,0) cell corner in um."""

    spacing: float
    origin: Tuple[float, float, float]
    cells: np.ndarray
    config: Optional[MixerConfig] = None

    def __post_init__(self):
        object.__setattr__(self, "cells", _readonly(self.cells.astype(np.int8)))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.cells.shape)

    @property
    def fluid_mask(self) -> np.ndarray:
        return self.cells != CellKind.SOLID

    @property
    def n_fluid(self) -> int:
        return int(np.count_nonzero(self.fluid_mask))

    @property
    def upper(self) -> Tuple[float, float, float]:
        return tuple(o + n * self.spacing for o, n in zip(self.origin, self.dims))

    def centers(self, axis: int) -> np.ndarray:
        n = self.dims[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.spacing

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        lower = np.asarray(self.origin)
        upper = np.asarray(self.upper)
        return np.all((points >= lower) & (points <= upper), axis=1)

    def cell_index(self, points: np.ndarray) -> np.ndarray:
        """Integer (i, j, k) of the cell holding each point, clamped to the grid."""
        points = np.atleast_2d(points)
        index = np.floor((points - np.asarray(self.origin)) / self.spacing).astype(np.int64)
        return np.clip(index, 0, np.asarray(self.dims) - 1)

    def is_fluid_at(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        inside = self.contains(points)
        index = self.cell_index(points)
        fluid = self.fluid_mask[index[:, 0], index[:, 1], index[:, 2]]
        return inside & fluid

    def layer_index(self, y: float) -> int:
        j = int(np.floor((y - self.origin[1]) / self.spacing))
        return min(max(j, 0), self.dims[1] - 1)

    def same_shape(self, other: "VoxelGrid") -> bool:
        return (
            self.dims == other.dims
            and np.isclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )


@dataclass(frozen=True)
class VelocityField:
    """Steady velocity (m/s) and pressure (Pa, up to a constant) at cell centres."""

    grid: VoxelGrid
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    p: np.ndarray
    residual: float = 0.0
    history: List[Tuple[int, float]] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        solid = ~self.grid.fluid_mask
        for name in ("u", "v", "w", "p"):
            array = np.array(getattr(self, name), dtype=np.float64)
            if array.shape != self.grid.dims:
                raise ValueError(f"{name} has shape {array.shape}, grid is {self.grid.dims}")
            array[solid] = 0.0
            object.__setattr__(self, name, _readonly(array))

    @property
    def max_speed(self) -> float:
        return float(np.sqrt(self.u**2 + self.v**2 + self.w**2).max(initial=0.0))

    def stacked(self) -> np.ndarray:
        return np.stack([self.u, self.v, self.w], axis=-1)


@dataclass
class ParticleEnsemble:
    """Tagged tracers. ``crossings[k, n]`` holds (x, z) where particle n first
    crossed plane k, NaN when it has not."""

    positions: np.ndarray
    species: np.ndarray
    status: np.ndarray
    planes: List[float] = field(default_factory=list)
    crossings: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.species = np.asarray(self.species, dtype=np.int8)
        self.status = np.asarray(self.status, dtype=np.int8)
        if self.crossings is None:
            self.crossings = np.full((len(self.planes), len(self.positions), 2), np.nan)

    def __len__(self) -> int:
        return len(self.positions)

    def count(self, status: ParticleStatus) -> int:
        return int(np.count_nonzero(self.status == status))

    def species_count(self, species: Species) -> int:
        return int(np.count_nonzero(self.species == species))

    def snapshot(self, k: int) -> np.ndarray:
        """(x, z, species) rows for plane k, in particle-index order."""
        crossed = ~np.isnan(self.crossings[k, :, 0])
        return np.column_stack(
            [self.crossings[k, crossed, 0], self.crossings[k, crossed, 1], self.species[crossed].astype(np.float64)]
        )


@dataclass(frozen=True)
class SliceField:
    """In-plane velocity (m/s) sampled on a plane; ``x``/``z`` in um, arrays
    indexed [i_x, i_z]."""

    y: float
    slant: float
    x: np.ndarray
    z: np.ndarray
    ux: np.ndarray
    uz: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        shape = (len(self.x), len(self.z))
        mask = np.asarray(self.mask, dtype=bool)
        for name in ("ux", "uz"):
            array = np.array(getattr(self, name), dtype=np.float64)
            if array.shape != shape:
                raise ValueError(f"{name} has shape {array.shape}, expected {shape}")
            array[~mask] = 0.0
            object.__setattr__(self, name, _readonly(array))
        object.__setattr__(self, "mask", _readonly(mask))
        object.__setattr__(self, "x", _readonly(np.asarray(self.x, dtype=np.float64)))
        object.__setattr__(self, "z", _readonly(np.asarray(self.z, dtype=np.float64)))

    @property
    def spacing(self) -> float:
        return float(self.x[1] - self.x[0]) if len(self.x) > 1 else float(self.z[1] - self.z[0])

    @property
    def max_speed(self) -> float:
        speed = np.hypot(self.ux, self.uz)
        return float(speed[self.mask].max(initial=0.0))

    def vorticity(self) -> np.ndarray:
        """omega_y = d(ux)/dz - d(uz)/dx in 1/s, zero on masked samples."""
        h = self.spacing * 1e-6
        dux_dz = np.gradient(self.ux, h, axis=1) if self.ux.shape[1] > 1 else np.zeros_like(self.ux)
        duz_dx = np.gradient(self.uz, h, axis=0) if self.uz.shape[0] > 1 else np.zeros_like(self.uz)
        omega = dux_dz - duz_dx
        omega[~self.mask] = 0.0
        return omega


@dataclass(frozen=True)
class CriticalPoint:
    x: float
    z: float
    jacobian: np.ndarray
    kind: CriticalPointKind
    y: float = 0.0

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(np.asarray(self.jacobian, dtype=np.float64))

    @property
    def vorticity(self) -> float:
        j = self.jacobian
        return float(j[0][1] - j[1][0])

    @property
    def sense(self) -> Optional[RotationSense]:
        if self.kind not in (CriticalPointKind.FOCUS_CW, CriticalPointKind.FOCUS_CCW, CriticalPointKind.CENTER):
            return None
        return RotationSense.CW if self.vorticity > 0 else RotationSense.CCW


@dataclass(frozen=True)
class Vortex:
    center: CriticalPoint
    sense: RotationSense
    size: float
    peak_vorticity: float
    resolved: bool = True


@dataclass(frozen=True)
class SpeciesFields:
    """Concentrations (mol/m^3) on the full grid, zero in solid cells."""

    grid: VoxelGrid
    cA: np.ndarray
    cB: np.ndarray
    cP: np.ndarray
    params: TransportParams
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        solid = ~self.grid.fluid_mask
        for name in ("cA", "cB", "cP"):
            array = np.array(getattr(self, name), dtype=np.float64)
            array[solid] = 0.0
            object.__setattr__(self, name, _readonly(array))

import inspect
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from app.exceptions import TransportError
from app.models import CellKind, SpeciesFields, VelocityField, VoxelGrid
from app.schemas import TransportParams
from app.utils.units import UM

logger = logging.getLogger(__name__)

PECLET_WARNING = 50.0
DIRECT_SOLVE_LIMIT = 200_000
_RTOL_KEYWORD = "rtol" if "rtol" in inspect.signature(sparse_linalg.bicgstab).parameters else "tol"


class TransportOperator:
    """Steady upwind/central finite-volume operator on the fluid cells.

    Rows are flux balances (outflow positive) in m^3/s times concentration,
    so ``matrix @ c - inlet_coefficient * c_inlet`` is the net outflow per cell.
    """

    def __init__(self, field: VelocityField, diffusivity: float):
        self.field = field
        self.grid = field.grid
        self.diffusivity = diffusivity
        self.h = self.grid.spacing * UM
        self.area = self.h**2
        self.volume = self.h**3

        fluid = self.grid.fluid_mask
        self.lookup = np.full(self.grid.dims, -1, dtype=np.int64)
        self.lookup[fluid] = np.arange(int(fluid.sum()))
        self.n = int(fluid.sum())
        self.faces = self._interior_faces()
        self.matrix, self.inlet_coefficient = self._assemble()

    def _interior_faces(self) -> List[Tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
        faces = []
        velocities = (self.field.u, self.field.v, self.field.w)
        for axis in range(3):
            lower = [slice(None)] * 3
            upper = [slice(None)] * 3
            lower[axis] = slice(None, -1)
            upper[axis] = slice(1, None)
            lower, upper = tuple(lower), tuple(upper)
            pair = (self.lookup[lower] >= 0) & (self.lookup[upper] >= 0)
            owner = self.lookup[lower][pair]
            neighbor = self.lookup[upper][pair]
            flux = 0.5 * (velocities[axis][lower][pair] + velocities[axis][upper][pair]) * self.area
            faces.append((axis, owner, neighbor, flux))
        return faces

    def _assemble(self) -> Tuple[sparse.csr_matrix, np.ndarray]:
        rows, cols, vals = [], [], []
        conductance = self.diffusivity * self.area / self.h
        for _, owner, neighbor, flux in self.faces:
            out = np.maximum(flux, 0.0)
            back = np.minimum(flux, 0.0)
            rows += [owner, owner, neighbor, neighbor]
            cols += [owner, neighbor, owner, neighbor]
            vals += [out + conductance, back - conductance, -out - conductance, -back + conductance]

        diagonal = np.zeros(self.n)
        inlet_coefficient = np.zeros(self.n)
        cells = self.grid.cells
        inlet = np.isin(cells[:, 0, :], [CellKind.INLET_A, CellKind.INLET_B])
        inlet_index = self.lookup[:, 0, :][inlet]
        inlet_velocity = self.field.v[:, 0, :][inlet]
        # Dirichlet face half a cell upstream of the inlet centres
        inlet_coefficient[inlet_index] = np.maximum(inlet_velocity, 0.0) * self.area + 2.0 * conductance
        diagonal[inlet_index] += 2.0 * conductance + np.maximum(-inlet_velocity, 0.0) * self.area

        outlet = cells[:, -1, :] == CellKind.OUTLET
        outlet_index = self.lookup[:, -1, :][outlet]
        diagonal[outlet_index] += np.maximum(self.field.v[:, -1, :][outlet], 0.0) * self.area

        rows.append(np.arange(self.n))
        cols.append(np.arange(self.n))
        vals.append(diagonal)
        matrix = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n, self.n)
        ).tocsr()
        return matrix, inlet_coefficient

    def inlet_values(self, value_a: float, value_b: float) -> np.ndarray:
        """Per-cell inlet concentration: value_a on INLET_A, value_b on INLET_B."""
        cells = self.grid.cells[self.grid.fluid_mask]
        values = np.zeros(self.n)
        values[cells == CellKind.INLET_A] = value_a
        values[cells == CellKind.INLET_B] = value_b
        return values

    def to_grid(self, values: np.ndarray) -> np.ndarray:
        full = np.zeros(self.grid.dims)
        full[self.grid.fluid_mask] = values
        return full


def _solve_linear(matrix: sparse.csr_matrix, rhs: np.ndarray, tol: float, x0: Optional[np.ndarray] = None) -> np.ndarray:
    if matrix.shape[0] <= DIRECT_SOLVE_LIMIT:
        return sparse_linalg.spsolve(matrix.tocsc(), rhs)
    ilu = sparse_linalg.spilu(matrix.tocsc(), drop_tol=1e-5, fill_factor=10)
    preconditioner = sparse_linalg.LinearOperator(matrix.shape, ilu.solve)
    kwargs = {_RTOL_KEYWORD: tol, "atol": 0.0, "maxiter": 5000, "M": preconditioner, "x0": x0}
    solution, info = sparse_linalg.bicgstab(matrix, rhs, **kwargs)
    if info != 0:
        raise TransportError(f"linear solver did not converge (info={info})")
    return solution


def cell_peclet(field: VelocityField, diffusivity: float) -> float:
    return field.max_speed * field.grid.spacing * UM / diffusivity


def damkohler(params: TransportParams, mean_velocity: float, channel_width_um: float) -> float:
    if mean_velocity == 0:
        return float("inf")
    return params.rate_constant * params.inlet_conc_a * channel_width_um * UM / abs(mean_velocity)


def solve_transport(
    field: VelocityField,
    grid: VoxelGrid,
    params: TransportParams,
    tol: float = 1e-8,
    max_iterations: int = 100,
    mean_velocity: Optional[float] = None,
) -> SpeciesFields:
    """Steady A + B -> P on the frozen velocity field.

    phi_A = cA + cP and phi_B = cB + cP are reaction-free and solved
    linearly; cA follows from a projected Newton iteration and the rest from
    the conserved scalars.
    """
    if not grid.same_shape(field.grid):
        raise TransportError("velocity field and grid do not match")
    if params.diffusivity is None or params.rate_constant is None:
        if mean_velocity is None or grid.config is None:
            raise TransportError("diffusivity and rate_constant must be resolved before solving")
        params = params.resolve(mean_velocity, grid.config.channel_width)

    operator = TransportOperator(field, params.diffusivity)
    peclet = cell_peclet(field, params.diffusivity)
    if peclet > PECLET_WARNING:
        logger.warning("Cell Peclet number %.1f exceeds %.0f: upwind false diffusion is significant", peclet, PECLET_WARNING)

    if params.inlet_mode == "premixed":
        inlet_a = operator.inlet_values(params.inlet_conc_a, params.inlet_conc_a)
        inlet_b = operator.inlet_values(params.inlet_conc_b, params.inlet_conc_b)
    else:
        inlet_a = operator.inlet_values(params.inlet_conc_a, 0.0)
        inlet_b = operator.inlet_values(0.0, params.inlet_conc_b)
    rhs_a = operator.inlet_coefficient * inlet_a
    rhs_b = operator.inlet_coefficient * inlet_b

    phi_a = np.maximum(_solve_linear(operator.matrix, rhs_a, tol), 0.0)
    phi_b = np.maximum(_solve_linear(operator.matrix, rhs_b, tol), 0.0)

    iterations = 0
    change = 0.0
    if params.rate_constant == 0.0:
        c_a, c_b, c_p = phi_a, phi_b, np.zeros(operator.n)
    else:
        psi = phi_a - phi_b
        lower = np.maximum(psi, 0.0)
        upper = phi_a
        rate = params.rate_constant * operator.volume
        # fast-reaction limit as starting point
        c_a = lower.copy()
        for iterations in range(1, max_iterations + 1):
            residual = operator.matrix @ c_a + rate * c_a * (c_a - psi) - rhs_a
            jacobian = operator.matrix + sparse.diags(rate * (2.0 * c_a - psi))
            step = _solve_linear(jacobian.tocsr(), residual, tol * 1e-2)
            updated = np.clip(c_a - step, lower, upper)
            change = float(np.linalg.norm(updated - c_a)) / max(float(np.linalg.norm(updated)), 1e-300)
            c_a = updated
            logger.debug("transport Newton iteration %d change %.3e", iterations, change)
            if change < tol:
                break
        else:
            raise TransportError(f"reaction solve did not converge in {max_iterations} iterations (change {change:.3e})")
        c_b = c_a - psi
        c_p = phi_a - c_a

    metadata = {
        "diffusivity": params.diffusivity,
        "rate_constant": params.rate_constant,
        "inlet_mode": params.inlet_mode,
        "cell_peclet": peclet,
        "peclet_warning": bool(peclet > PECLET_WARNING),
        "newton_iterations": iterations,
        "final_change": change,
    }
    if mean_velocity is not None and grid.config is not None:
        metadata["damkohler"] = damkohler(params, mean_velocity, grid.config.channel_width)
    logger.info("Transport solved: Pe_cell=%.2f, %d Newton iterations", peclet, iterations)
    return SpeciesFields(
        grid=grid,
        cA=operator.to_grid(c_a),
        cB=operator.to_grid(c_b),
        cP=operator.to_grid(c_p),
        params=params,
        metadata=metadata,
    )


def _plane_layer(grid: VoxelGrid, y: float) -> int:
    if not grid.origin[1] <= y <= grid.upper[1]:
        raise TransportError(f"plane y={y} outside domain")
    return grid.layer_index(y)


def fret_factor(fields: SpeciesFields, y: float, theta: Optional[float] = None) -> float:
    """Fraction of fluid cells on the plane layer with cP >= theta * stoichiometric product."""
    grid = fields.grid
    layer = _plane_layer(grid, y)
    fluid = grid.fluid_mask[:, layer, :]
    if not fluid.any():
        raise TransportError(f"plane y={y} lies in solid")
    theta = fields.params.reaction_threshold if theta is None else theta
    threshold = theta * fields.params.stoichiometric_product
    reacted = fields.cP[:, layer, :][fluid] >= threshold
    return float(np.count_nonzero(reacted)) / float(np.count_nonzero(fluid))


def fret_profile(fields: SpeciesFields, planes: Sequence[float], theta: Optional[float] = None) -> List[Tuple[int, float]]:
    return [(k, fret_factor(fields, y, theta)) for k, y in enumerate(planes, start=1)]


SCALARS = {
    "A": lambda f: f.cA,
    "B": lambda f: f.cB,
    "P": lambda f: f.cP,
    "phiA": lambda f: f.cA + f.cP,
    "phiB": lambda f: f.cB + f.cP,
}


def plane_flux(fields: SpeciesFields, field: VelocityField, scalar: str, y: float) -> float:
    """Advective plus diffusive flux (mol/s) of a scalar across the cell face
    nearest y, using the same upwind discretisation as the solver."""
    if scalar not in SCALARS:
        raise TransportError(f"unknown scalar {scalar!r}, expected one of {sorted(SCALARS)}")
    grid = fields.grid
    _plane_layer(grid, y)
    c = SCALARS[scalar](fields)
    h = grid.spacing * UM
    area = h * h
    ny = grid.dims[1]
    face = int(np.clip(round((y - grid.origin[1]) / grid.spacing), 1, ny))
    fluid = grid.fluid_mask
    if face == ny:
        outlet = fluid[:, -1, :]
        return float(np.sum(field.v[:, -1, :][outlet] * area * c[:, -1, :][outlet]))
    pair = fluid[:, face - 1, :] & fluid[:, face, :]
    c_lower, c_upper = c[:, face - 1, :][pair], c[:, face, :][pair]
    velocity = 0.5 * (field.v[:, face - 1, :][pair] + field.v[:, face, :][pair])
    advective = np.where(velocity >= 0, velocity * c_lower, velocity * c_upper) * area
    diffusive = -fields.params.diffusivity * (c_upper - c_lower) / h * area
    return float(np.sum(advective + diffusive))


def product_yield(fields: SpeciesFields, field: VelocityField, y: float) -> float:
    """Product flux over the stoichiometric maximum product flux."""
    grid = fields.grid
    inlet = np.isin(grid.cells[:, 0, :], [CellKind.INLET_A, CellKind.INLET_B])
    area = (grid.spacing * UM) ** 2
    total_flow = float(np.sum(np.maximum(field.v[:, 0, :][inlet], 0.0)) * area)
    if total_flow == 0.0:
        return 0.0
    share = 1.0 if fields.params.inlet_mode == "premixed" else 0.5
    maximum = min(fields.params.inlet_conc_a, fields.params.inlet_conc_b) * total_flow * share
    return plane_flux(fields, field, "P", y) / maximum


def transport_summary(fields: SpeciesFields) -> Dict[str, float]:
    fluid = fields.grid.fluid_mask
    return {
        "min_concentration": float(min(fields.cA[fluid].min(), fields.cB[fluid].min(), fields.cP[fluid].min())),
        "max_product": float(fields.cP[fluid].max()),
    }

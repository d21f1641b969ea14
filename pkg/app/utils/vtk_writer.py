"""Legacy ASCII VTK output: structured points for grids and fields, polydata
vertices for particles."""
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.models import SpeciesFields, VelocityField, VoxelGrid

FLOAT_FORMAT = "%.9g"
HEADER = "# vtk DataFile Version 3.0\n{title}\nASCII\n"


def _savetxt(fp, values: np.ndarray, fmt: str):
    if values.size:
        np.savetxt(fp, values, fmt=fmt)


def write_structured_points(
    path: Union[str, Path],
    dims: Sequence[int],
    origin: Sequence[float],
    spacing: float,
    scalars: Optional[Dict[str, np.ndarray]] = None,
    vectors: Optional[Dict[str, np.ndarray]] = None,
    title: str = "cdm-sim",
):
    """Point data given as (nx, ny, nz) arrays (vectors: (nx, ny, nz, 3))."""
    nx, ny, nz = (int(n) for n in dims)
    count = nx * ny * nz
    with open(path, "w", encoding="ascii", newline="\n") as fp:
        fp.write(HEADER.format(title=title))
        fp.write("DATASET STRUCTURED_POINTS\n")
        fp.write(f"DIMENSIONS {nx} {ny} {nz}\n")
        fp.write("ORIGIN " + " ".join(FLOAT_FORMAT % v for v in origin) + "\n")
        fp.write("SPACING " + " ".join(FLOAT_FORMAT % spacing for _ in range(3)) + "\n")
        fp.write(f"POINT_DATA {count}\n")
        for name, values in (scalars or {}).items():
            values = np.asarray(values)
            integer = np.issubdtype(values.dtype, np.integer)
            fp.write(f"SCALARS {name} {'int' if integer else 'double'} 1\nLOOKUP_TABLE default\n")
            _savetxt(fp, values.ravel(order="F"), "%d" if integer else FLOAT_FORMAT)
        for name, values in (vectors or {}).items():
            values = np.asarray(values, dtype=np.float64).reshape(nx, ny, nz, 3)
            flat = np.column_stack([values[..., axis].ravel(order="F") for axis in range(3)])
            fp.write(f"VECTORS {name} double\n")
            _savetxt(fp, flat, FLOAT_FORMAT)


def write_polydata(
    path: Union[str, Path],
    points: np.ndarray,
    scalars: Optional[Dict[str, np.ndarray]] = None,
    title: str = "cdm-sim particles",
):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    with open(path, "w", encoding="ascii", newline="\n") as fp:
        fp.write(HEADER.format(title=title))
        fp.write("DATASET POLYDATA\n")
        fp.write(f"POINTS {n} double\n")
        _savetxt(fp, points, FLOAT_FORMAT)
        fp.write(f"VERTICES {n} {2 * n}\n")
        _savetxt(fp, np.column_stack([np.ones(n, dtype=np.int64), np.arange(n, dtype=np.int64)]), "%d")
        fp.write(f"POINT_DATA {n}\n")
        for name, values in (scalars or {}).items():
            fp.write(f"SCALARS {name} int 1\nLOOKUP_TABLE default\n")
            _savetxt(fp, np.asarray(values, dtype=np.int64), "%d")


def _cell_centre_origin(grid: VoxelGrid):
    return [o + 0.5 * grid.spacing for o in grid.origin]


def write_vtk(data, path: Union[str, Path]):
    """Dispatch on the data kind: grid, velocity field, species fields, particle
    table (columns x, y, z, species)."""
    if isinstance(data, VoxelGrid):
        write_structured_points(
            path, data.dims, _cell_centre_origin(data), data.spacing, scalars={"kind": data.cells.astype(np.int64)}
        )
    elif isinstance(data, VelocityField):
        grid = data.grid
        write_structured_points(
            path,
            grid.dims,
            _cell_centre_origin(grid),
            grid.spacing,
            scalars={"pressure": data.p},
            vectors={"velocity": data.stacked()},
        )
    elif isinstance(data, SpeciesFields):
        grid = data.grid
        write_structured_points(
            path, grid.dims, _cell_centre_origin(grid), grid.spacing, scalars={"cA": data.cA, "cB": data.cB, "cP": data.cP}
        )
    elif isinstance(data, pd.DataFrame):
        write_polydata(path, data[["x", "y", "z"]].to_numpy(), scalars={"species": data["species"].to_numpy()})
    else:
        raise TypeError(f"cannot write {type(data).__name__} as VTK")

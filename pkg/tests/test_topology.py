import math

import numpy as np
import pytest

from app.exceptions import TopologyError
from app.models import CellKind, CriticalPoint, CriticalPointKind, RotationSense, SliceField, VelocityField, VoxelGrid
from app.schemas import MixerConfig
from app.services.topology_service import (
    SliceAnalysis,
    SlicePlane,
    analyze_slices,
    apex_plan,
    apex_summary,
    apex_table,
    classify_critical_point,
    find_critical_points,
    saddle_tracking,
    slice_field,
    slice_plan,
    split_vortex_pair,
    topology_table,
    vortex_census,
)
from tests.conftest import plug_flow


def cellular_slice(x_max: float = 189.0) -> SliceField:
    """psi = sin(pi x/100) sin(pi z/100): centres at (50, 50) and (150, 50),
    a saddle at (100, 100)."""
    x = np.arange(11.0, x_max + 1.0, 2.0)
    z = np.arange(11.0, 134.0, 2.0)
    X, Z = np.meshgrid(x, z, indexing="ij")
    k = math.pi / 100.0
    ux = k * np.sin(k * X) * np.cos(k * Z)
    uz = -k * np.cos(k * X) * np.sin(k * Z)
    return SliceField(y=0.0, slant=0.0, x=x, z=z, ux=ux, uz=uz, mask=np.ones(X.shape, dtype=bool))


@pytest.mark.parametrize(
    "jacobian, kind",
    [
        ([[1.0, 0.0], [0.0, -1.0]], CriticalPointKind.SADDLE),
        ([[0.0, -1.0], [1.0, 0.0]], CriticalPointKind.CENTER),
        ([[-1.0, 0.0], [0.0, -2.0]], CriticalPointKind.NODE_SINK),
        ([[1.0, 0.0], [0.0, 2.0]], CriticalPointKind.NODE_SOURCE),
        ([[-0.1, 1.0], [-1.0, -0.1]], CriticalPointKind.FOCUS_CW),
        ([[-0.1, -1.0], [1.0, -0.1]], CriticalPointKind.FOCUS_CCW),
        ([[1.0, 0.0], [0.0, 0.0]], CriticalPointKind.DEGENERATE),
        ([[0.0, 0.0], [0.0, 0.0]], CriticalPointKind.DEGENERATE),
    ],
)
def test_classification(jacobian, kind):
    assert classify_critical_point(jacobian) == kind


def test_classification_is_scale_free():
    jacobian = np.array([[0.0, -1.0], [1.0, 0.0]])

    assert classify_critical_point(1e6 * jacobian) == classify_critical_point(1e-6 * jacobian) == CriticalPointKind.CENTER


def test_center_sense():
    point = CriticalPoint(x=0.0, z=0.0, jacobian=np.array([[0.0, -1.0], [1.0, 0.0]]), kind=CriticalPointKind.CENTER)

    assert point.vorticity == -2.0
    assert point.sense == RotationSense.CCW


def test_bad_jacobian():
    with pytest.raises(TopologyError):
        classify_critical_point([[np.nan, 0.0], [0.0, 1.0]])


def test_cellular_flow_critical_points():
    points = sorted(find_critical_points(cellular_slice()), key=lambda p: (p.x, p.z))

    assert [p.kind for p in points] == [CriticalPointKind.CENTER, CriticalPointKind.SADDLE, CriticalPointKind.CENTER]
    expected = [(50.0, 50.0), (100.0, 100.0), (150.0, 50.0)]
    for point, (x, z) in zip(points, expected):
        assert point.x == pytest.approx(x, abs=0.05)
        assert point.z == pytest.approx(z, abs=0.05)
    assert points[0].sense == RotationSense.CCW
    assert points[2].sense == RotationSense.CW


def test_quiescent_slice_has_no_critical_points():
    x = np.arange(0.0, 20.0, 2.0)
    zeros = np.zeros((len(x), len(x)))
    sliced = SliceField(y=0.0, slant=0.0, x=x, z=x, ux=zeros, uz=zeros, mask=np.ones_like(zeros, dtype=bool))

    assert find_critical_points(sliced) == []
    assert vortex_census(sliced) == []


def test_vortices_sorted_by_size():
    # window cut at x = 159 truncates the right-hand cell
    vortices = vortex_census(cellular_slice(x_max=159.0))

    assert len(vortices) == 2
    assert vortices[0].center.x == pytest.approx(50.0, abs=0.05)
    assert vortices[0].size > vortices[1].size
    assert {v.sense for v in vortices} == {RotationSense.CW, RotationSense.CCW}


def test_weak_centre_is_grown_locally_and_unresolved():
    sliced = cellular_slice()
    # |omega| here is 0.45 of the peak, below the 0.6 slice threshold
    weak = CriticalPoint(x=15.0, z=50.0, jacobian=np.array([[0.0, -1.0], [1.0, 0.0]]), kind=CriticalPointKind.CENTER)

    (vortex,) = vortex_census(sliced, threshold=0.6, points=[weak])

    assert not vortex.resolved
    assert vortex.size > 100 * sliced.spacing**2
    assert vortex.peak_vorticity < 0.0
    assert abs(vortex.peak_vorticity) == pytest.approx(np.abs(sliced.vorticity()).max())


def test_centre_without_vorticity_has_no_size():
    x = np.arange(0.0, 20.0, 2.0)
    zeros = np.zeros((len(x), len(x)))
    sliced = SliceField(y=0.0, slant=0.0, x=x, z=x, ux=zeros, uz=zeros, mask=np.ones_like(zeros, dtype=bool))
    center = CriticalPoint(x=9.0, z=9.0, jacobian=np.array([[0.0, -1.0], [1.0, 0.0]]), kind=CriticalPointKind.CENTER)

    (vortex,) = vortex_census(sliced, points=[center])

    assert not vortex.resolved
    assert vortex.size == 0.0 and vortex.peak_vorticity == 0.0


def analysis_of(sliced: SliceField, index: int = 0) -> SliceAnalysis:
    points = find_critical_points(sliced)
    plane = SlicePlane(period=1, index=index, y=300.0 + 400.0 * index, slant=0.0)
    return SliceAnalysis(plane=plane, slice=sliced, points=points, vortices=vortex_census(sliced, points=points))


def test_split_vortex_pair():
    truncated = analysis_of(cellular_slice(x_max=159.0))
    symmetric = analysis_of(cellular_slice(x_max=189.0), index=1)

    assert split_vortex_pair(truncated) > 1.2
    assert split_vortex_pair(symmetric) == pytest.approx(1.0, abs=0.01)

    table = apex_table([truncated, symmetric])
    assert list(table["met"]) == [True, False]
    assert list(table["saddles"]) == [1, 1]
    assert list(table["cw"]) == [1, 1] and list(table["ccw"]) == [1, 1]
    summary = apex_summary(table)
    assert summary["slices"] == 2 and summary["met"] == 1
    assert summary["best_size_ratio"] == pytest.approx(split_vortex_pair(truncated))


def test_pair_without_saddle_between_is_not_split():
    analysis = analysis_of(cellular_slice(x_max=159.0))
    analysis.points = [p for p in analysis.points if p.kind != CriticalPointKind.SADDLE]

    assert split_vortex_pair(analysis) is None
    assert apex_summary(apex_table([analysis]))["best_size_ratio"] is None


def test_apex_plan_hits_both_barrier_turns():
    plan = apex_plan(MixerConfig(variant="CDM", n_periods=2))

    assert [plane.y for plane in plan] == [300.0, 700.0, 1100.0, 1500.0]
    assert all(plane.slant == 0.0 for plane in plan)
    assert [(plane.period, plane.index) for plane in plan] == [(1, 0), (1, 1), (2, 0), (2, 1)]


def test_transverse_projection_ignores_axial_flow_on_slanted_planes(tiny_grid):
    field = plug_flow(tiny_grid, speed=1e-3)

    transverse = slice_field(field, 100.0, slant=30.0)
    projected = slice_field(field, 100.0, slant=30.0, projection="plane")

    assert np.all(transverse.ux == 0.0) and np.all(transverse.uz == 0.0)
    np.testing.assert_allclose(projected.ux, 1e-3 * math.sin(math.radians(30.0)) * math.cos(math.radians(30.0)))
    with pytest.raises(TopologyError):
        slice_field(field, 100.0, projection="normal")


def test_uniform_axial_flow_has_no_in_plane_velocity(tiny_grid):
    sliced = slice_field(plug_flow(tiny_grid), 100.0)

    assert sliced.mask.all()
    assert np.all(sliced.ux == 0.0) and np.all(sliced.uz == 0.0)
    np.testing.assert_allclose(sliced.x, tiny_grid.centers(0))


def test_slice_through_solid_is_refused():
    cells = np.zeros((4, 10, 4), dtype=np.int8)
    cells[:, 5, :] = CellKind.SOLID
    grid = VoxelGrid(spacing=10.0, origin=(0.0, 0.0, 0.0), cells=cells)
    zeros = np.zeros(grid.dims)
    field = VelocityField(grid=grid, u=zeros, v=zeros, w=zeros, p=zeros)

    with pytest.raises(TopologyError):
        slice_field(field, 55.0)


def test_slice_plan_follows_the_grooves():
    plan = slice_plan(MixerConfig(variant="CDM"))

    assert len(plan) == 80
    assert plan[0] == SlicePlane(period=1, index=0, y=150.0, slant=45.0)
    assert plan[-1].period == 10 and plan[-1].y == pytest.approx(8050.0)
    assert slice_plan(MixerConfig(variant="CDM", n_periods=1), 4, slant=0.0)[1].y == 400.0


def test_saddle_tracking_and_table():
    config = MixerConfig(variant="CDM")
    sliced = cellular_slice()
    saddle = CriticalPoint(x=160.0, z=30.0, jacobian=np.array([[1.0, 0.0], [0.0, -1.0]]), kind=CriticalPointKind.SADDLE, y=300.0)
    center = CriticalPoint(x=60.0, z=10.0, jacobian=np.array([[0.0, -1.0], [1.0, 0.0]]), kind=CriticalPointKind.CENTER, y=300.0)
    analyses = [
        SliceAnalysis(plane=SlicePlane(period=1, index=2, y=300.0, slant=45.0), slice=sliced, points=[saddle, center]),
        SliceAnalysis(plane=SlicePlane(period=1, index=3, y=400.0, slant=45.0), slice=sliced),
    ]

    tracking = saddle_tracking(config, analyses)
    assert tracking.loc[0, "barrier_x"] == pytest.approx(150.0)
    assert tracking.loc[0, "offset_x"] == pytest.approx(10.0)
    assert np.isnan(tracking.loc[1, "saddle_x"])

    table = topology_table(analyses)
    assert list(table["kind"]) == ["SADDLE", "CENTER"]
    assert list(table["sense"]) == ["", "CCW"]
    assert table.loc[1, "eig1_im"] == pytest.approx(-1.0)


def test_parallel_analysis_matches_serial(tiny_grid):
    x, _, z = np.meshgrid(tiny_grid.centers(0), tiny_grid.centers(1), tiny_grid.centers(2), indexing="ij")
    rate = 1e-3
    field = VelocityField(
        grid=tiny_grid, u=-rate * (z - 17.0), v=np.full(tiny_grid.dims, 1e-3), w=rate * (x - 32.0), p=np.zeros(tiny_grid.dims)
    )
    plan = [SlicePlane(period=1, index=j, y=y, slant=0.0) for j, y in enumerate((80.0, 120.0))]

    serial = analyze_slices(field, plan)
    parallel = analyze_slices(field, plan, threads=2)

    assert [a.plane for a in parallel] == plan
    for one, other in zip(serial, parallel):
        assert len(one.points) == len(other.points) == 1
        assert one.points[0].x == pytest.approx(32.0) and one.points[0].z == pytest.approx(17.0)
        assert one.points[0].kind == CriticalPointKind.CENTER
        assert (other.points[0].x, other.points[0].z) == (one.points[0].x, one.points[0].z)
        assert len(other.vortices) == 1

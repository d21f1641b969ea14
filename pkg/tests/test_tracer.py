import math

import numpy as np
import pytest

from app.exceptions import TracerError
from app.models import ParticleEnsemble, ParticleStatus, Species, VelocityField, VoxelGrid
from app.schemas import MixerConfig
from app.services.geometry_service import voxelize
from app.services.tracer_service import (
    VelocityInterpolator,
    advect,
    interpolate_velocity,
    mean_rotation,
    mixing_index,
    rk4_step,
    rotation_summary,
    seed_inlet,
    snapshot_frame,
    status_counts,
)
from tests.conftest import plug_flow


def binned_snapshot(counts):
    """counts: {(x, z): (n_a, n_b)} with every point placed at (x, z)."""
    rows = []
    for (x, z), (n_a, n_b) in counts.items():
        rows += [[x, z, Species.A]] * n_a + [[x, z, Species.B]] * n_b
    return np.asarray(rows, dtype=np.float64)


def test_seeding_is_balanced_and_mirrored(tiny_grid):
    ensemble = seed_inlet(tiny_grid, 1000)

    assert len(ensemble) == 1000
    assert ensemble.species_count(Species.A) == ensemble.species_count(Species.B) == 500
    left, right = ensemble.positions[:500], ensemble.positions[500:]
    assert np.all(left[:, 0] < 30.0)
    np.testing.assert_allclose(right[:, 0], 60.0 - left[:, 0])
    np.testing.assert_allclose(right[:, 2], left[:, 2])
    assert np.all(ensemble.positions[:, 1] == 0.0)
    assert np.all(tiny_grid.is_fluid_at(ensemble.positions))
    assert ensemble.count(ParticleStatus.ACTIVE) == 1000


@pytest.mark.parametrize("n_total", [0, 999, 20_000])
def test_bad_particle_counts(tiny_grid, n_total):
    with pytest.raises(TracerError):
        seed_inlet(tiny_grid, n_total)


def test_rk4_is_exact_to_fourth_order():
    start = np.array([[1.0, 2.0, 3.0]])
    dt = 0.1

    end = rk4_step(lambda p: p, start, dt)

    np.testing.assert_allclose(end, start * (1 + dt + dt**2 / 2 + dt**3 / 6 + dt**4 / 24), rtol=1e-14)


def test_interpolation_inside_and_outside(tiny_grid):
    field = plug_flow(tiny_grid, 1e-3)

    np.testing.assert_allclose(interpolate_velocity(field, (25.0, 100.0, 15.0)), [0.0, 1e-3, 0.0], atol=1e-15)
    # half-way between the wall and the first cell centre
    assert interpolate_velocity(field, (2.5, 100.0, 15.0))[1] == pytest.approx(0.75e-3)
    with pytest.raises(TracerError):
        interpolate_velocity(field, (25.0, 300.0, 15.0))


def test_straight_duct_keeps_species_apart(tiny_grid):
    field = plug_flow(tiny_grid, 1e-3)
    seeded = seed_inlet(tiny_grid, 1000)

    ensemble = advect(field, seeded, [100.0, 200.0])

    assert status_counts(ensemble) == [0, 1000, 0]
    snapshot = ensemble.snapshot(1)
    assert len(snapshot) == 1000
    np.testing.assert_allclose(snapshot[:, 0], seeded.positions[:, 0], atol=1e-9)
    assert np.all(snapshot[snapshot[:, 2] == Species.A, 0] < 30.0)
    extent = ((0.0, 60.0), (0.0, 30.0))
    assert mixing_index(snapshot, (10, 7), extent) == pytest.approx(0.0, abs=1e-12)


def test_advect_refuses_a_foreign_ensemble(tiny_grid):
    other = voxelize(MixerConfig(variant="PLAIN", channel_length=300, entrance_offset=50, barrier_period=150, n_periods=1), 10.0)
    seeded = seed_inlet(other, 100)

    with pytest.raises(TracerError, match="seeded on"):
        advect(plug_flow(tiny_grid), seeded, [100.0])


def test_mixing_index_of_partially_mixed_bins():
    snapshot = binned_snapshot(
        {(0.5, 0.5): (10, 0), (1.5, 0.5): (5, 5), (0.5, 1.5): (5, 5), (1.5, 1.5): (0, 10)}
    )

    index = mixing_index(snapshot, (2, 2), ((0.0, 2.0), (0.0, 2.0)))

    assert index == pytest.approx(1.0 - math.sqrt(0.125) / 0.5, abs=1e-12)
    assert index == pytest.approx(0.2929, abs=1e-4)


def test_sparse_bins_are_ignored():
    snapshot = binned_snapshot({(0.5, 0.5): (5, 5), (1.5, 0.5): (6, 6), (1.5, 1.5): (3, 0)})

    assert mixing_index(snapshot, (2, 2), ((0.0, 2.0), (0.0, 2.0))) == pytest.approx(1.0)


def test_mixing_index_needs_populated_bins():
    with pytest.raises(TracerError):
        mixing_index(np.empty((0, 3)))
    with pytest.raises(TracerError):
        mixing_index(binned_snapshot({(0.5, 0.5): (2, 2)}), (2, 2), ((0.0, 2.0), (0.0, 2.0)))


def test_mean_rotation_accumulates_across_planes():
    n = 4
    angles = np.array([0.0, math.pi / 4, math.pi / 2])
    radius = np.array([1.0, 2.0, 3.0, 4.0])
    crossings = np.empty((3, n, 2))
    crossings[..., 0] = 10.0 + radius[None, :] * np.cos(angles)[:, None]
    crossings[..., 1] = 5.0 + radius[None, :] * np.sin(angles)[:, None]
    ensemble = ParticleEnsemble(
        positions=np.zeros((n, 3)),
        species=np.zeros(n),
        status=np.full(n, ParticleStatus.EXITED),
        planes=[100.0, 200.0, 300.0],
        crossings=crossings,
    )

    assert mean_rotation(ensemble, 0, 2, (10.0, 5.0)) == pytest.approx(math.pi / 2)
    with pytest.raises(TracerError):
        mean_rotation(ensemble, 1, 3, (10.0, 5.0))


def test_snapshot_frame_columns(tiny_grid):
    ensemble = advect(plug_flow(tiny_grid), seed_inlet(tiny_grid, 200), [150.0])

    frame = snapshot_frame(ensemble, 0)

    assert list(frame.columns) == ["x", "y", "z", "species", "period"]
    assert len(frame) == 200
    assert set(frame["period"]) == {1}
    assert np.all(frame["y"] == 150.0)


def swirl_field(omega: float = 5.0, speed: float = 1e-3) -> VelocityField:
    """Solid-body rotation at omega rad/s about (x, z) = (30, 15) um plus a
    uniform axial speed, on a 60 x 100 x 30 um box at h = 5 um."""
    grid = VoxelGrid(spacing=5.0, origin=(0.0, 0.0, 0.0), cells=np.zeros((12, 20, 6), dtype=np.int8))
    x, _, z = np.meshgrid(grid.centers(0), grid.centers(1), grid.centers(2), indexing="ij")
    zeros = np.zeros(grid.dims)
    return VelocityField(
        grid=grid, u=-omega * (z - 15.0) * 1e-6, v=np.full(grid.dims, speed), w=omega * (x - 30.0) * 1e-6, p=zeros
    )


def disk_ensemble(n: int = 4000, radius: float = 10.0) -> ParticleEnsemble:
    rng = np.random.default_rng(3)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    positions = np.column_stack([30.0 + r * np.cos(theta), np.zeros(n), 15.0 + r * np.sin(theta)])
    species = np.where(positions[:, 0] < 30.0, Species.A, Species.B)
    return ParticleEnsemble(positions=positions, species=species, status=np.full(n, ParticleStatus.ACTIVE))


def test_rk4_orbit_drift_per_revolution():
    omega = 5.0
    center = np.array([30.0, 0.0, 15.0])

    def rotation(p):
        offset = p - center
        return omega * np.column_stack([-offset[:, 2], np.zeros(len(p)), offset[:, 0]])

    start = np.array([[40.0, 0.0, 15.0], [30.0, 0.0, 22.0]])
    dt = 2.0 * math.pi / omega / 1000
    position = start.copy()
    for _ in range(1000):
        position = rk4_step(rotation, position, dt)

    radius = np.linalg.norm(start - center, axis=1)
    assert np.all(np.linalg.norm(position - start, axis=1) < 1e-6 * radius)


def test_kernel_step_matches_generic_step():
    interpolator = VelocityInterpolator(swirl_field())
    rng = np.random.default_rng(11)
    points = np.column_stack([rng.uniform(10.0, 50.0, 50), rng.uniform(5.0, 90.0, 50), rng.uniform(5.0, 25.0, 50)])

    np.testing.assert_allclose(interpolator.rk4_step(points, 2e-3), rk4_step(interpolator, points, 2e-3), rtol=1e-12)


def test_halving_the_time_step_keeps_the_mixing_index():
    field = swirl_field()
    extent = ((0.0, 60.0), (0.0, 30.0))
    indices = []
    for cfl in (0.5, 0.25):
        ensemble = advect(field, disk_ensemble(), [90.0], cfl=cfl)
        assert status_counts(ensemble) == [0, 4000, 0]
        indices.append(mixing_index(ensemble.snapshot(0), (10, 7), extent))

    assert indices[0] > 0.0
    assert abs(indices[0] - indices[1]) < 1e-3


def test_rotation_sense_is_reproducible():
    planes = [15.0, 30.0, 45.0, 60.0, 75.0]
    first = rotation_summary(advect(swirl_field(), disk_ensemble(400), planes), (30.0, 15.0))
    again = rotation_summary(advect(swirl_field(), disk_ensemble(400), planes, threads=2), (30.0, 15.0))
    mirrored = rotation_summary(advect(swirl_field(omega=-5.0), disk_ensemble(400), planes), (30.0, 15.0))

    assert first == again
    assert first["rotation_sense"] == "CCW"
    assert first["rotation_planes"] == 5
    # 60 um at 1 mm/s is 0.06 s of turning at 5 rad/s
    assert first["mean_rotation_rad"] == pytest.approx(0.3, rel=1e-3)
    assert mirrored["rotation_sense"] == "CW"


def test_rotation_needs_two_planes(tiny_grid):
    ensemble = advect(plug_flow(tiny_grid), seed_inlet(tiny_grid, 200), [150.0])

    assert rotation_summary(ensemble, (30.0, 15.0)) == {
        "mean_rotation_rad": None,
        "rotation_sense": None,
        "rotation_planes": 1,
    }


def test_points_below_the_extent_count_in_the_bottom_row():
    # groove particles below the floor share the bin above them
    snapshot = binned_snapshot({(0.5, -20.0): (10, 0), (0.5, 0.5): (0, 10), (1.5, 1.5): (5, 5)})

    assert mixing_index(snapshot, (2, 2), ((0.0, 2.0), (0.0, 2.0))) == pytest.approx(1.0)

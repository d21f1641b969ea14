import numpy as np
import pytest

from app.models import VelocityField
from app.schemas import MixerConfig
from app.services.geometry_service import voxelize

TINY_CONFIG = """
variant: PLAIN
channel_length_um: 200
channel_width_um: 60
channel_height_um: 30
entrance_offset_um: 50
barrier_period_um: 150
n_periods: 1
grid_spacing_um: 10
inlet_buffer_um: 50
flow_rate_per_inlet_ul_per_min: 0.5
flow_tol: 1.0e-3
n_particles: 400
mixing_bins: [2, 2]
slices_per_period: 2
"""


@pytest.fixture
def tiny_mixer() -> MixerConfig:
    """Straight 60 x 30 um duct, 200 um long, one 150 um period."""
    return MixerConfig(
        variant="PLAIN",
        channel_length=200,
        channel_width=60,
        channel_height=30,
        entrance_offset=50,
        barrier_period=150,
        n_periods=1,
    )


@pytest.fixture
def tiny_grid(tiny_mixer):
    return voxelize(tiny_mixer, 10.0)


def plug_flow(grid, speed: float = 1e-3) -> VelocityField:
    zeros = np.zeros(grid.dims)
    return VelocityField(grid=grid, u=zeros, v=np.full(grid.dims, speed), w=zeros, p=zeros)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path

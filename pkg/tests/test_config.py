import logging

import pytest

from app.config import config_defaults_echo, load_config, parse_config
from app.exceptions import ConfigError
from app.schemas import Stage, Variant


def test_minimal_document_gets_reference_geometry():
    config = parse_config('{variant: "CDM", flow_rate_per_inlet: 5.0}')

    mixer = config.mixer
    assert mixer.variant == Variant.CDM
    assert (mixer.channel_length, mixer.channel_width, mixer.channel_height) == (8100.0, 200.0, 70.0)
    assert mixer.barrier_period == 800.0
    assert mixer.n_periods == 10
    assert config.flow.flow_rate_per_inlet == pytest.approx(5.0e-9 / 60.0)
    assert config.flow.flow_rate_ul_per_min == pytest.approx(5.0)


def test_unknown_variant_names_key_and_choices():
    with pytest.raises(ConfigError) as excinfo:
        parse_config("variant: XGM")

    message = str(excinfo.value)
    assert excinfo.value.key_path == "variant"
    assert "CDM" in message and "SGM" in message
    assert message.startswith("[config]")


def test_barrier_as_tall_as_channel_is_rejected():
    with pytest.raises(ConfigError) as excinfo:
        parse_config("variant: CDM\nbarrier_height: 70\nchannel_height: 70")

    assert excinfo.value.key_path == "barrier_height"
    assert "barrier_height < channel_height" in str(excinfo.value)


def test_unknown_key_strict_and_lenient(caplog):
    with pytest.raises(ConfigError, match="groove_angel"):
        parse_config("groove_angel: 30", strict=True)

    with caplog.at_level(logging.WARNING, logger="app.config"):
        config = parse_config("groove_angel: 30", strict=False)
    assert config.mixer.groove_angle == 45.0
    assert "groove_angel" in caplog.text


def test_unit_suffixed_aliases():
    config = parse_config("variant: plain\nchannel_width_um: 100\nflow_rate_per_inlet_ul_per_min: 10\nh: 4")

    assert config.mixer.variant == Variant.PLAIN
    assert config.mixer.channel_width == 100.0
    assert config.flow.flow_rate_ul_per_min == pytest.approx(10.0)
    assert config.numerics.grid_spacing == 4.0


def test_negative_flow_needs_stokes_mode():
    with pytest.raises(ConfigError):
        parse_config("flow_rate_per_inlet: -5")

    config = parse_config("flow_rate_per_inlet: -5\nstokes_mode: true")
    assert config.flow.flow_rate_per_inlet < 0


def test_odd_particle_count_is_rejected():
    with pytest.raises(ConfigError) as excinfo:
        parse_config("n_particles: 13")
    assert excinfo.value.key_path == "n_particles"


@pytest.mark.parametrize("text", ["[1, 2", "- a\n- b"])
def test_malformed_documents(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_stage_selection_pulls_in_dependencies():
    config = parse_config("stages: [report]")

    assert config.resolved_stages() == [Stage.GEOMETRY, Stage.FLOW, Stage.TRACE, Stage.TRANSPORT, Stage.REPORT]


def test_defaults_are_echoed():
    echo = config_defaults_echo(parse_config("variant: SGM"))

    assert echo["variant"] == "SGM"
    assert echo["groove_angle"] == 45.0
    assert echo["flow_tol"] == 1e-7
    assert echo["flow_rate_per_inlet_ul_per_min"] == pytest.approx(5.0)
    assert echo["reaction_threshold"] == 0.1
    assert echo["stages"] == [stage.value for stage in Stage]


def test_load_config_applies_overrides(tiny_config_file, tmp_path):
    out = tmp_path / "run"
    config = load_config(tiny_config_file, output_dir=str(out), threads=2, force=None)

    assert config.output_dir == str(out)
    assert config.threads == 2
    assert config.force is False
    assert config.numerics.mixing_bins == (2, 2)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Type, Union

import yaml
from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings

from app.exceptions import ConfigError
from app.schemas import FlowConditions, MixerConfig, NumericControls, RunConfig, TransportParams
from app.utils.units import ul_per_min_to_m3_per_s

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    log_level: str = "INFO"
    threads: int = 1
    output_dir: str = "./runs"
    strict_config: bool = True
    show_progress: bool = False

    class Config:
        env_prefix = "CDM_"
        env_file = ".env"
        extra = "ignore"

settings = Settings()


FLOW_RATE_KEYS = ("flow_rate_per_inlet", "flow_rate_per_inlet_ul_per_min")
FLOW_KEYS = ("density", "dynamic_viscosity", "stokes_mode")
RUN_KEYS = ("output_dir", "threads", "stages", "strict", "force")


def _accepted_keys(model: Type[BaseModel]) -> Dict[str, str]:
    """Map every accepted document key (field names and aliases) to its field."""
    keys = {}
    for name, info in model.model_fields.items():
        keys[name] = name
        alias = info.validation_alias
        if alias is not None and hasattr(alias, "choices"):
            for choice in alias.choices:
                keys[str(choice)] = name
    return keys


def _format_validation(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    path = ".".join(str(part) for part in first["loc"]) or None
    return ConfigError(first["msg"], key_path=path)


def _build(model: Type[BaseModel], values: Dict[str, Any]) -> BaseModel:
    try:
        return model.model_validate(values)
    except ValidationError as e:
        raise _format_validation(e) from e


def load_document(text: str) -> Dict[str, Any]:
    try:
        document = yaml.safe_load(text) if text and text.strip() else {}
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config document: {e}") from e
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError("config document must be a mapping of keys to values")
    return document


def parse_config(text: str, strict: Optional[bool] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Parse a flat YAML/JSON run document into a validated RunConfig.

    Lengths stay in micrometres; the flow rate is given in ul/min and is
    converted to m^3/s here.
    """
    document = load_document(text)
    if overrides:
        document.update({key: value for key, value in overrides.items() if value is not None})
    if strict is None:
        strict = bool(document.get("strict", settings.strict_config))

    mixer_keys = _accepted_keys(MixerConfig)
    transport_keys = _accepted_keys(TransportParams)
    numeric_keys = _accepted_keys(NumericControls)

    sections: Dict[str, Dict[str, Any]] = {"mixer": {}, "flow": {}, "transport": {}, "numerics": {}, "run": {}}
    unknown = []
    for key, value in document.items():
        if key in mixer_keys:
            sections["mixer"][key] = value
        elif key in FLOW_RATE_KEYS:
            sections["flow"]["flow_rate_per_inlet"] = value
        elif key in FLOW_KEYS:
            sections["flow"][key] = value
        elif key in transport_keys:
            sections["transport"][key] = value
        elif key in numeric_keys:
            sections["numerics"][key] = value
        elif key in RUN_KEYS:
            sections["run"][key] = value
        else:
            unknown.append(key)

    if unknown:
        if strict:
            raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}", key_path=sorted(unknown)[0])
        logger.warning("Ignoring unknown config keys: %s", ", ".join(sorted(unknown)))

    flow_values = sections["flow"]
    if "flow_rate_per_inlet" in flow_values:
        rate = flow_values["flow_rate_per_inlet"]
        if not isinstance(rate, (int, float)) or isinstance(rate, bool):
            raise ConfigError("flow rate must be a number in ul/min", key_path="flow_rate_per_inlet")
        flow_values["flow_rate_per_inlet"] = ul_per_min_to_m3_per_s(float(rate))

    mixer = _build(MixerConfig, sections["mixer"])
    for key, rule in mixer.invariant_violations():
        raise ConfigError(f"invariant violated: {rule}", key_path=key)

    run_values = dict(sections["run"])
    run_values.setdefault("output_dir", str(Path(settings.output_dir) / mixer.variant.value.lower()))
    run_values.setdefault("threads", settings.threads)
    run_values.setdefault("strict", strict)
    try:
        return RunConfig(
            mixer=mixer,
            flow=_build(FlowConditions, flow_values),
            transport=_build(TransportParams, sections["transport"]),
            numerics=_build(NumericControls, sections["numerics"]),
            **run_values,
        )
    except ValidationError as e:
        raise _format_validation(e) from e


def load_config(path: Optional[Union[str, Path]], **overrides: Any) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config(text, overrides=overrides)


def config_defaults_echo(config: RunConfig) -> Dict[str, Any]:
    """Every applied value, defaults included, in document-key form."""
    echo: Dict[str, Any] = {}
    for section in (config.mixer, config.transport, config.numerics):
        for key, value in section.model_dump(mode="json").items():
            echo[key] = value
    echo["flow_rate_per_inlet_ul_per_min"] = config.flow.flow_rate_ul_per_min
    for key in FLOW_KEYS:
        echo[key] = getattr(config.flow, key)
    echo["threads"] = config.threads
    echo["stages"] = [stage.value for stage in config.resolved_stages()]
    echo["strict"] = config.strict
    return echo


"""Configuration loading: config.yaml, dotted overrides, schema checks, env seed."""
from __future__ import annotations

import copy
import json
import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import yaml
from dotenv import load_dotenv
from jsonschema import Draft202012Validator, ValidationError

from wenets.errors import ConfigError

ROOT_DIR = Path(__file__).resolve().parents[1]
SCHEMAS_DIR = ROOT_DIR / "schemas"
CONFIG_PATH = ROOT_DIR / "config.yaml"
SEED_ENV_VAR = "WENETS_SEED"

logger = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def load_schema(filename: str) -> dict:
    schema_path = SCHEMAS_DIR / filename
    return json.loads(schema_path.read_text(encoding="utf-8"))


@lru_cache(maxsize=None)
def schema_validator(filename: str) -> Draft202012Validator:
    return Draft202012Validator(load_schema(filename))


def check_against_schema(instance: dict, filename: str, error_type: type[Exception] = ConfigError) -> None:
    """Validate `instance` and re-raise schema failures as `error_type`."""
    try:
        schema_validator(filename).validate(instance)
    except ValidationError as exc:
        location = ".".join(str(part) for part in exc.absolute_path) or "<root>"
        raise error_type(f"{filename}: {location}: {exc.message}") from exc


def load_config(path: Path | str | None = None, overrides: Iterable[str] = ()) -> dict:
    config_path = Path(path) if path is not None else CONFIG_PATH
    try:
        config = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {config_path}: {exc}") from exc

    config = apply_overrides(config, overrides)
    check_against_schema(config, "config.schema.json")
    return config


def apply_overrides(config: dict, overrides: Iterable[str]) -> dict:
    """Apply `dotted.key=value` strings; values are parsed as YAML scalars."""
    merged = copy.deepcopy(config)
    for item in overrides:
        key, sep, raw_value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value: {item!r}")
        node = merged
        parts = key.strip().split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override path crosses a scalar: {key}")
            node = child
        node[parts[-1]] = yaml.safe_load(raw_value)
    return merged


def training_section(config: dict, tiny: bool = False) -> dict:
    """Training settings, with the tiny-run overrides layered on top when asked."""
    section = dict(config["training"])
    if tiny:
        section.update(config.get("tiny_training", {}))
    return section


def resolve_seed(explicit: int | None, config: dict) -> int:
    if explicit is not None:
        return explicit

    load_dotenv()
    env_seed = os.getenv(SEED_ENV_VAR)
    if env_seed:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} is not an integer: {env_seed!r}") from exc
        logger.info("Using seed %d from %s.", seed, SEED_ENV_VAR)
        return seed

    return int(config["seed"])


def outputs_dir(config: dict) -> Path:
    path = Path(config["paths"]["outputs_dir"])
    if not path.is_absolute():
        path = ROOT_DIR / path
    return path

"""
Run configuration

Precedence, lowest first: built-in defaults, TOML config file, environment
(``.env`` or process: BMLP_THREADS, BMLP_SEED, BMLP_LOG_LEVEL), command-line
flags. The file has sections [data], [model], [train], [eval], [sweep],
[bench] and [run]; [model] and [train] together fill HyperParams.
"""

from __future__ import annotations

import os
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .core.model import HyperParams
from .data.ingest import COLUMNS, DATASET_PRESETS
from .errors import ConfigurationError

ENV_PREFIX = "BMLP_"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    input: Optional[Path] = None
    format: Literal["tsv", "csv"] = "tsv"
    columns: List[str] = Field(default_factory=lambda: list(COLUMNS))
    has_header: bool = True
    behaviors: Optional[List[str]] = None
    target_behavior: str = "buy"
    preset: Optional[str] = None
    min_item_purchases: int = Field(5, ge=1)
    min_user_purchases: int = Field(5, ge=1)
    # rating-log transform: rating >= threshold is the target behavior
    ratings_threshold: Optional[int] = None
    auxiliary_behavior: str = "click"
    exclude_start: Optional[int] = None
    exclude_end: Optional[int] = None
    split_dir: Optional[Path] = None

    @model_validator(mode="after")
    def _apply_preset(self) -> "DataConfig":
        if self.preset is None:
            return self
        key = self.preset.lower()
        if key not in DATASET_PRESETS:
            raise ConfigurationError(f"unknown preset '{self.preset}' (known: {sorted(DATASET_PRESETS)})")
        items, users = DATASET_PRESETS[key]
        if "min_item_purchases" not in self.model_fields_set:
            self.min_item_purchases = items
        if "min_user_purchases" not in self.model_fields_set:
            self.min_user_purchases = users
        return self

    @model_validator(mode="after")
    def _exclusion_pair(self) -> "DataConfig":
        if (self.exclude_start is None) != (self.exclude_end is None):
            raise ConfigurationError("exclude_start and exclude_end must be given together")
        return self


class EvalConfig(_Section):
    ks: List[int] = Field(default_factory=lambda: [10, 20])
    examined: bool = True
    intent: bool = False
    checkpoint: Optional[Path] = None


class SweepConfig(_Section):
    grid: Dict[str, List[Any]] = Field(
        default_factory=lambda: {"heads": [1, 2, 4], "aux_len": [3, 5, 7]}
    )
    ablations: List[str] = Field(default_factory=lambda: ["full", "no_scb", "no_fcb", "no_pip", "no_hip"])
    variants: List[str] = Field(default_factory=lambda: ["S", "B", "T", "BT"])


class BenchConfig(_Section):
    lengths: List[int] = Field(default_factory=lambda: [64, 128, 256, 512])
    repetitions: int = Field(100, ge=1)
    warmup: int = Field(10, ge=0)
    control: Literal["none", "constant", "quadratic"] = "none"
    d: int = Field(256, ge=1)
    width: int = Field(512, ge=1)


class RunSection(_Section):
    out: Path = Path("runs/latest")
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    log_level: str = "INFO"


class RunConfig(_Section):
    data: DataConfig = Field(default_factory=DataConfig)
    model: HyperParams = Field(default_factory=HyperParams)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    run: RunSection = Field(default_factory=RunSection)

    @property
    def seed(self) -> int:
        return self.model.seed

    def manifest(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        elif value is not None:
            out[key] = value
    return out


def env_overrides(env: Optional[Mapping[str, str]] = None) -> Dict[str, Dict[str, Any]]:
    env = os.environ if env is None else env
    out: Dict[str, Dict[str, Any]] = {}
    if env.get(f"{ENV_PREFIX}THREADS"):
        out.setdefault("run", {})["threads"] = int(env[f"{ENV_PREFIX}THREADS"])
    if env.get(f"{ENV_PREFIX}LOG_LEVEL"):
        out.setdefault("run", {})["log_level"] = env[f"{ENV_PREFIX}LOG_LEVEL"]
    if env.get(f"{ENV_PREFIX}SEED"):
        out.setdefault("model", {})["seed"] = int(env[f"{ENV_PREFIX}SEED"])
    return out


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
    dotenv: bool = True,
) -> RunConfig:
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        with path.open("rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc
    train = raw.pop("train", {})
    raw["model"] = _merge(raw.get("model", {}), train)

    if dotenv and env is None:
        load_dotenv()
    raw = _merge(raw, env_overrides(env))
    raw = _merge(raw, overrides or {})
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc

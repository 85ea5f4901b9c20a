"""Loading, merging and validating run configurations.

A configuration is a nested dict with one section per concern (``theory``,
``backbone``, ``pretrain``, ``corpus``, ``train``, ``randk``, ``corrupt``,
``cost`` and ``run``). The bundled defaults are deep-merged with an optional
user file (JSON, or flat ``section.key=value`` lines) and then with the
``--set`` overrides, validated against the JSON schema and converted into the
typed dataclasses of each package.
"""

import os
import json
import copy
import logging
from dataclasses import dataclass
from typing import Any, Iterable, Optional

import jsonschema

from neural_diversity.costmodel import CostConfig
from neural_diversity.errors import ConfigError
from neural_diversity.intervention.corruption import CorruptionConfig
from neural_diversity.model.config import BackboneConfig
from neural_diversity.theory.bounds import RhoSchedule
from neural_diversity.training.config import TrainConfig, apply_arm
from neural_diversity.training.corpus import CorpusSpec
from neural_diversity.utils import load_pkg_json, validate_against_schema

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "config/ndlab_config.default.json"
CONFIG_SCHEMA = "schemas/json/config.schema.json"


def _reject(msg: str) -> None:
    logger.error(msg)
    raise ConfigError(msg)


def parse_value(raw: str) -> Any:
    """JSON literal when possible (numbers, booleans, null, lists), else the string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_assignment(line: str) -> tuple[str, str, Any]:
    """Split ``section.key=value`` into its section, key and parsed value.

    Raises:
        ConfigError: The line is not of that form.
    """
    if "=" not in line:
        _reject(f"Expected 'section.key=value', got '{line}'.")
    lhs, raw = line.split("=", 1)
    parts = lhs.strip().split(".")
    if len(parts) != 2 or not all(parts):
        _reject(f"Expected 'section.key=value', got '{line}'.")
    return parts[0], parts[1], parse_value(raw.strip())


def parse_flat(text: str) -> dict[str, dict[str, Any]]:
    """Parse flat ``section.key=value`` lines; blank lines and '#' comments are skipped."""
    config: dict[str, dict[str, Any]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        section, key, value = parse_assignment(line)
        config.setdefault(section, {})[key] = value
    return config


def read_config_file(path: str) -> dict[str, Any]:
    """Read a JSON or flat-text configuration file.

    Raises:
        ConfigError: The file is missing or is not valid JSON.
    """
    if not os.path.isfile(path):
        _reject(f"Configuration file {path} does not exist.")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if path.endswith(".json"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            _reject(f"Invalid JSON in {path}: {e}")
    return parse_flat(text)


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge `override` into a copy of `base`."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(
    path: Optional[str] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    threads: Optional[int] = None,
) -> dict[str, Any]:
    """Resolve the configuration of a run.

    Precedence, lowest first: bundled defaults, the file at `path`, the
    `overrides`, then the explicit `seed`, `out_dir` and `threads`.

    Args:
        path (str | None, optional): User configuration file.
        overrides (Iterable[str], optional): ``section.key=value`` strings.
        seed (int | None, optional): Root seed.
        out_dir (str | None, optional): Output directory.
        threads (int | None, optional): Worker threads.

    Raises:
        ConfigError: Unreadable file, malformed override or a config that
            does not follow the schema.

    Returns:
        dict[str, Any]: The validated configuration.
    """
    config = load_pkg_json(DEFAULT_CONFIG)
    if path is not None:
        logger.info("Reading the configuration in %s.", path)
        config = deep_merge(config, read_config_file(path))
    config = deep_merge(config, parse_flat("\n".join(overrides)))
    run = {"seed": seed, "out_dir": out_dir, "threads": threads}
    config["run"].update({k: v for k, v in run.items() if v is not None})

    try:
        validate_against_schema(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e.message}") from e
    return config


@dataclass(frozen=True)
class TheoryConfig:
    """The ``theory`` section: bound curve and Monte Carlo certification."""

    sigma2: float
    mu: float
    schedule: RhoSchedule
    p_min: int
    p_max: int
    mc_samples: int
    mc_shards: int
    n_sigmas: float
    grid: dict

    @property
    def p_range(self) -> range:
        return range(self.p_min, self.p_max + 1)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 16


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs/default"
    progress: bool = True


@dataclass(frozen=True)
class LabConfig:
    """Typed view of a resolved configuration; one root seed feeds every section."""

    theory: TheoryConfig
    backbone: BackboneConfig
    pretrain: PretrainConfig
    corpus: CorpusSpec
    train: TrainConfig
    corrupt: CorruptionConfig
    cost: CostConfig
    run: RunConfig


def _train_config(section: dict[str, Any], randk: dict[str, Any], seed: int) -> TrainConfig:
    section = dict(section)
    arm = section.pop("arm", None)
    weights = randk.get("weights")
    cfg = TrainConfig(
        **section,
        randk_k=randk.get("K", 2),
        randk_weights=None if weights is None else tuple(weights),
        seed=seed,
    )
    return cfg if arm is None else apply_arm(cfg, arm)


def build_lab_config(config: dict[str, Any], arm: Optional[str] = None) -> LabConfig:
    """Convert a validated configuration into typed sections.

    Args:
        config (dict[str, Any]): Output of :func:`load_config`.
        arm (str | None, optional): Ablation arm overriding ``train.arm``.

    Raises:
        ConfigError: A section violates the invariants of its dataclass.

    Returns:
        LabConfig: The typed configuration.
    """
    run = RunConfig(**config["run"])
    seed = run.seed
    theory = dict(config["theory"])
    schedule = RhoSchedule(theory.pop("rho0"), theory.pop("beta"), theory.pop("gamma"))
    if theory["p_min"] > theory["p_max"]:
        _reject(f"p_min={theory['p_min']} exceeds p_max={theory['p_max']}.")

    train_section = dict(config["train"])
    if arm is not None:
        train_section["arm"] = arm
    return LabConfig(
        theory=TheoryConfig(schedule=schedule, **theory),
        backbone=BackboneConfig(**config["backbone"], seed=seed),
        pretrain=PretrainConfig(**config["pretrain"]),
        corpus=CorpusSpec(**config["corpus"], seed=seed),
        train=_train_config(train_section, config["randk"], seed),
        corrupt=CorruptionConfig(**config["corrupt"], seed=seed),
        cost=CostConfig(**config["cost"]),
        run=run,
    )

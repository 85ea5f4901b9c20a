#!/usr/bin/env python
# coding: utf-8
"""General helpers shared by every part of the laboratory."""

import sys
import json
import logging
import pathlib
import time
import zlib
from typing import Any, Optional
from datetime import timedelta
from contextlib import ExitStack
import jsonschema
import importlib_resources
import numpy as np

if sys.version < "3.11":
    # python 3.10
    from strenum import StrEnum  # noqa: F401  pylint: disable=unused-import
else:
    from enum import StrEnum  # noqa: F401  pylint: disable=unused-import

logger = logging.getLogger(__name__)

# names of the independent random streams derived from one root seed
SEED_STREAMS = [
    "data",
    "init",
    "randk",
    "corruption",
    "bootstrap",
    "dropout",
    "mc",
    "compare",
    "null",
]


def timestamp(ts_format: str = "%Y-%m-%dT%H:%M:%SZ", with_space: bool = False) -> str:
    """Return an iso-formatted timestamp.

    Args:
        ts_format (str, optional): Timestamp format to use for the returned timestamp.
            Defaults to "%Y-%m-%dT%H:%M:%SZ".
        with_space (bool, optional): Format the timestamp with spaces. If True, the
            format used will be "%Y-%m-%d %H:%M:%S". Defaults to False.

    Returns:
        str: Timestamp formatted according to a provided format.
    """
    if with_space:
        ts_format = "%Y-%m-%d %H:%M:%S"
    return time.strftime(ts_format, time.gmtime())


class Timer:
    """Basic timer"""

    def __init__(self):
        self.start = time.time()

    def stop(self) -> str:
        """Stop the timer.

        Returns:
            str: Elapsed time since the start tick in seconds.
        """
        elapsed_time = time.time() - self.start
        return str(timedelta(seconds=elapsed_time))


def get_pkg_resource(
    file_manager: ExitStack, path: str, package: str = "neural_diversity"
) -> pathlib.PosixPath:
    """Return the resource at `path` in `package`, using a context manager.

    Note:
        The context manager `file_manager` needs to be instantiated prior to
        calling this function and should be closed once the package resource
        is no longer of use.

    Args:
        file_manager (contextlib.ExitStack): Context manager.
        path (str): Path to the desired resource in given package.
        package (str, optional): Package name. Defaults to "neural_diversity".

    Returns:
        pathlib.PosixPath: Path to desired managed resource.
    """
    ref = importlib_resources.files(package) / path
    return file_manager.enter_context(importlib_resources.as_file(ref))


def load_pkg_json(path: str) -> dict[str, Any]:
    """Read a JSON file shipped as package data.

    Args:
        path (str): Path of the resource within the package.

    Returns:
        dict[str, Any]: The parsed JSON contents.
    """
    with ExitStack() as file_manager:
        res_path = get_pkg_resource(file_manager, path)
        with open(res_path, "r", encoding="utf-8") as f:
            return json.load(f)


def init_logger(
    _logger: logging.Logger, level: int = logging.INFO, file: Optional[str] = None
) -> logging.Logger:
    """Initialises the given logger.

    Args:
        _logger (logging.Logger): Logger instance to initialise.
        level (int, optional): desired level of logging. Defaults to logging.INFO.
        file (str | None, optional): Log file to write to instead of stderr.
            Defaults to None.

    Returns:
        logging.Logger: the initialised logger
    """
    _logger.setLevel(level)

    if file is not None:
        handler = logging.FileHandler(filename=file, mode="w")
    else:
        handler = logging.StreamHandler()

    formatter = logging.Formatter("%(asctime)s %(name)-12s %(levelname)-8s %(message)s")
    handler.setFormatter(formatter)
    _logger.addHandler(handler)
    _logger.info("Logger successfully initialised")

    return _logger


def validate_against_schema(
    json_to_validate: dict[str, Any],
    path_to_schema: str = "schemas/json/config.schema.json",
) -> None:
    """Validate a dict corresponding to a JSON against a provided JSON schema.

    Args:
        json_to_validate (dict[str, Any]): JSON data to validate against a schema.
        path_to_schema (str, optional): Path to the JSON schema to validate against.
            Defaults to "schemas/json/config.schema.json".

    Raises:
        jsonschema.ValidationError: The provided JSON does not follow the schema.
    """
    json_schema = load_pkg_json(path_to_schema)

    try:
        jsonschema.validate(json_to_validate, json_schema)
    except jsonschema.ValidationError as e:
        logger.error(
            "The provided JSON could not be validated against its schema %s: %s",
            path_to_schema,
            e.message,
        )
        raise e


class SeedStreams:
    """Named, independent random generators expanded from one root seed.

    Each name maps to a fixed spawn key so that adding a new stream never
    shifts the others. Keyed streams (`name`, `*keys`) are used wherever a
    computation must be reproducible from an index alone, e.g. a training
    step after a resume.

    Args:
        seed (int): Root seed of the run.
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ValueError(f"Seeds must be non-negative, got {seed}.")
        self.seed = int(seed)

    @staticmethod
    def _name_key(name: str) -> int:
        if name not in SEED_STREAMS:
            raise KeyError(f"Unknown seed stream '{name}', expected one of {SEED_STREAMS}.")
        return zlib.crc32(name.encode("utf-8"))

    def sequence(self, name: str, *keys: int) -> np.random.SeedSequence:
        """Return the seed sequence of stream `name`, optionally sub-keyed.

        Args:
            name (str): Name of the stream, one of `SEED_STREAMS`.
            *keys (int): Extra integer keys (step, shard, sub-experiment...).

        Returns:
            np.random.SeedSequence: Deterministic seed sequence.
        """
        return np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self._name_key(name), *map(int, keys))
        )

    def rng(self, name: str, *keys: int) -> np.random.Generator:
        """Return a fresh generator for stream `name` (and optional keys).

        Args:
            name (str): Name of the stream, one of `SEED_STREAMS`.
            *keys (int): Extra integer keys.

        Returns:
            np.random.Generator: Generator seeded deterministically.
        """
        return np.random.default_rng(self.sequence(name, *keys))

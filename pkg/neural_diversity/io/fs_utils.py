"""Reading and writing run artifacts on the local filesystem."""

import os
import csv
import json
import hashlib
import logging
from typing import Any, Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)


def parse_json(filename: str) -> Optional[dict[str, Any]]:
    """Load the contents of a JSON file.

    Args:
        filename (str): Path to the json file.

    Returns:
        dict[str, Any] | None: Resulting json, or None if the file is missing.
    """
    if os.path.isfile(filename):
        with open(filename, "r", encoding="utf-8") as f:
            return json.load(f)
    logger.info("File %s does not exist.", filename)
    return None


def format_value(value: Any) -> str:
    """Render one CSV cell; floats use `repr` so re-runs are byte-identical."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: str, header: list[str], rows: Iterable[list]) -> str:
    """Write `rows` under `header` to the CSV file at `path`.

    Args:
        path (str): Output file; parent directories are created.
        header (list[str]): Column names.
        rows (Iterable[list]): Rows with one value per column.

    Raises:
        ValueError: A row does not have one value per column.

    Returns:
        str: The path written.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                msg = f"Row {row} has {len(row)} values for {len(header)} columns in {path}."
                logger.error(msg)
                raise ValueError(msg)
            writer.writerow([format_value(v) for v in row])
    logger.debug("Wrote %s.", path)
    return path


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    """Header and raw string rows of a CSV file written by `write_csv`."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader]


def _to_jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def dump_json(contents: Any) -> str:
    return json.dumps(contents, indent=4, sort_keys=True, default=_to_jsonable)


def write_json(path: str, contents: Any) -> str:
    """Write `contents` as indented JSON with sorted keys and return `path`."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_json(contents))
        f.write("\n")
    logger.debug("Wrote %s.", path)
    return path


def sha256_file(path: str, block_size: int = 1 << 16) -> str:
    """SHA-256 hex digest of the file at `path`."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(block_size), b""):
            digest.update(block)
    return digest.hexdigest()

"""Save and load :class:`NdModel` checkpoints.

A checkpoint is a single ``.npz`` archive. The entry ``__header__`` holds a
JSON document (format version, configs, backbone SHA-256, step and free
metadata); every other entry is a named array block: ``backbone/...``,
``stream{i}/...`` or ``shared/...`` for adapters, ``prefix{i}``,
``aggregator/...`` and ``optim/...`` for optimizer moments.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Any, Optional

import numpy as np

from neural_diversity.errors import CheckpointError
from neural_diversity.model.config import BackboneConfig, StreamConfig
from neural_diversity.model.layers import Backbone
from neural_diversity.model.transformer import NdModel, build_model

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_KEY = "__header__"


@dataclass
class Checkpoint:
    """Content of a loaded checkpoint.

    Attributes:
        model (NdModel): Rebuilt model, backbone frozen.
        header (dict[str, Any]): Decoded JSON header.
        extra_arrays (dict[str, np.ndarray]): Blocks outside the model,
            optimizer moments included, keyed without their ``optim/`` prefix.
    """

    model: NdModel
    header: dict[str, Any]
    extra_arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))

    @property
    def metadata(self) -> dict[str, Any]:
        return self.header.get("metadata", {})


def config_to_dict(cfg: Any) -> dict[str, Any]:
    """Init fields of a config dataclass, as JSON-friendly values."""
    out = {}
    for f in fields(cfg):
        if not f.init:
            continue
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def save_checkpoint(
    path: str,
    model: NdModel,
    extra_arrays: Optional[dict[str, np.ndarray]] = None,
    metadata: Optional[dict[str, Any]] = None,
) -> str:
    """Write `model` (and optional extra blocks) to `path`.

    Args:
        path (str): Target file; ``.npz`` is appended by numpy when missing.
        model (NdModel): Model to save.
        extra_arrays (dict[str, np.ndarray] | None, optional): Optimizer
            moments or other state, stored under ``optim/``.
        metadata (dict[str, Any] | None, optional): JSON-serializable
            information stored in the header (train config, arm...).

    Returns:
        str: Path of the written file.
    """
    if not path.endswith(".npz"):
        path = f"{path}.npz"
    header = {
        "format_version": FORMAT_VERSION,
        "backbone_config": config_to_dict(model.backbone.config),
        "stream_config": config_to_dict(model.config),
        "backbone_sha256": model.backbone.checksum(),
        "step": model.step,
        "metadata": metadata or {},
    }
    blocks = {HEADER_KEY: np.array(json.dumps(header, sort_keys=True))}
    for name, tensor in model.backbone.named_parameters():
        blocks[f"backbone/{name}"] = tensor.data
    for name, tensor in model.named_trainable():
        blocks[name] = tensor.data
    for name, arr in (extra_arrays or {}).items():
        blocks[f"optim/{name}"] = np.asarray(arr)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.savez(path, **blocks)
    logger.info("Wrote checkpoint %s (step %s, %s blocks).", path, model.step, len(blocks) - 1)
    return path


def read_header(path: str) -> dict[str, Any]:
    """Decode only the JSON header of a checkpoint."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            return json.loads(str(archive[HEADER_KEY]))
    except (OSError, KeyError, ValueError) as e:
        msg = f"Cannot read checkpoint header of {path}: {e}"
        logger.error(msg)
        raise CheckpointError(msg) from e


def load_checkpoint(path: str, expected_backbone_sha: Optional[str] = None) -> Checkpoint:
    """Rebuild a model from `path` and verify its backbone hash.

    Args:
        path (str): Checkpoint file.
        expected_backbone_sha (str | None, optional): Hash the backbone must
            have, e.g. the one of the backbone a run started from.

    Raises:
        CheckpointError: Unreadable file, unknown format version, missing
            block, or a backbone whose hash differs from the recorded one
            (or from `expected_backbone_sha`).

    Returns:
        Checkpoint: Model, header and extra arrays.
    """
    header = read_header(path)
    if header.get("format_version") != FORMAT_VERSION:
        msg = f"Checkpoint {path} has format {header.get('format_version')}, expected {FORMAT_VERSION}."
        logger.error(msg)
        raise CheckpointError(msg)

    with np.load(path, allow_pickle=False) as archive:
        blocks = {key: archive[key] for key in archive.files if key != HEADER_KEY}

    bcfg = BackboneConfig(**header["backbone_config"])
    scfg = StreamConfig(**header["stream_config"])

    backbone = Backbone.init(bcfg)
    _fill(path, blocks, backbone.named_parameters(), prefix="backbone/")
    digest = backbone.checksum()
    for expected in (header["backbone_sha256"], expected_backbone_sha):
        if expected is not None and digest != expected:
            msg = f"Backbone hash mismatch in {path}: {digest[:12]} != {expected[:12]}."
            logger.error(msg)
            raise CheckpointError(msg)

    model = build_model(backbone, scfg)
    _fill(path, blocks, model.named_trainable())
    model.step = int(header.get("step", 0))

    extra = {key[len("optim/") :]: arr for key, arr in blocks.items() if key.startswith("optim/")}
    logger.info("Loaded checkpoint %s (P=%s, step %s).", path, scfg.P, model.step)
    return Checkpoint(model, header, extra)


def _fill(path: str, blocks: dict[str, np.ndarray], named, prefix: str = "") -> None:
    for name, tensor in named:
        key = prefix + name
        if key not in blocks:
            msg = f"Checkpoint {path} misses block '{key}'."
            logger.error(msg)
            raise CheckpointError(msg)
        if blocks[key].shape != tensor.shape:
            msg = f"Block '{key}' of {path} has shape {blocks[key].shape}, expected {tensor.shape}."
            logger.error(msg)
            raise CheckpointError(msg)
        tensor.data = blocks[key].astype(tensor.dtype, copy=True)

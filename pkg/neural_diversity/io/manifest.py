"""Run manifests: what was run, with which config, and what it produced.

A manifest is written as ``manifest.json`` next to the artifacts of a run and
validated against ``schemas/json/manifest.schema.json``. The ``replay``
subcommand re-runs a manifest and compares the artifact digests.
"""

import os
import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import git

from neural_diversity import __version__
from neural_diversity.errors import CheckpointError
from neural_diversity.io.fs_utils import parse_json, sha256_file, write_json
from neural_diversity.utils import timestamp, validate_against_schema

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.json"
MANIFEST_SCHEMA = "schemas/json/manifest.schema.json"


def get_head_commit(path: str = ".") -> Optional[str]:
    """Hash of the HEAD commit of the repository containing `path`, if any.

    Args:
        path (str, optional): Directory inside the working tree. Defaults to ".".

    Returns:
        str | None: The commit hash, or None outside a git repository.
    """
    try:
        repo = git.Repo(path, search_parent_directories=True)
        return str(repo.head.commit)
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, ValueError) as e:
        # ValueError: repository without any commit
        logger.debug("No git commit recorded for %s: %s", path, e)
        return None


@dataclass
class RunManifest:
    """Record of one CLI run.

    Attributes:
        subcommand (str): The subcommand that ran.
        config (dict[str, Any]): Resolved configuration snapshot.
        seed (int): Root seed.
        argv (list[str]): Extra arguments needed to replay the run.
        artifacts (dict[str, dict[str, str]]): Artifact name to relative
            ``path`` and ``sha256``.
        started (str): Start timestamp.
        finished (str | None): End timestamp, set by `finish`.
        version (str): Package version.
        git_commit (str | None): HEAD commit of the working directory.
    """

    subcommand: str
    config: dict[str, Any]
    seed: int
    argv: list[str] = field(default_factory=list)
    artifacts: dict[str, dict[str, str]] = field(default_factory=dict)
    started: str = field(default_factory=timestamp)
    finished: Optional[str] = None
    version: str = __version__
    git_commit: Optional[str] = field(default_factory=get_head_commit)

    def add_artifact(self, path: str, out_dir: str) -> None:
        """Record the file at `path` (inside `out_dir`) with its digest."""
        rel = os.path.relpath(path, out_dir)
        self.artifacts[os.path.basename(path)] = {"path": rel, "sha256": sha256_file(path)}

    def finish(self) -> None:
        self.finished = timestamp()

    def as_dict(self) -> dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "argv": self.argv,
            "artifacts": self.artifacts,
            "started": self.started,
            "finished": self.finished,
            "version": self.version,
            "git_commit": self.git_commit,
        }

    def write(self, out_dir: str) -> str:
        """Validate the manifest and write it to ``out_dir/manifest.json``.

        Raises:
            jsonschema.ValidationError: The manifest does not follow its schema.
        """
        data = self.as_dict()
        validate_against_schema(data, MANIFEST_SCHEMA)
        path = write_json(os.path.join(out_dir, MANIFEST_FILENAME), data)
        logger.info("Wrote the run manifest to %s.", path)
        return path

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        """Read and validate a manifest file.

        Raises:
            CheckpointError: The file is missing.
            jsonschema.ValidationError: The file does not follow the schema.
        """
        data = parse_json(path)
        if data is None:
            msg = f"No manifest found at {path}."
            logger.error(msg)
            raise CheckpointError(msg)
        validate_against_schema(data, MANIFEST_SCHEMA)
        return cls(**data)


def compare_artifacts(recorded: RunManifest, replayed: RunManifest) -> list[str]:
    """Names of artifacts whose digests differ or that are missing in a replay."""
    mismatches = []
    for name, entry in sorted(recorded.artifacts.items()):
        other = replayed.artifacts.get(name)
        if other is None or other["sha256"] != entry["sha256"]:
            logger.warning("Artifact %s differs from the recorded run.", name)
            mismatches.append(name)
    return mismatches

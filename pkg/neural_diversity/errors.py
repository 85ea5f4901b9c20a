"""Exceptions raised across the laboratory and the exit codes they map to."""

from enum import IntEnum
from typing import Optional


class ExitCode(IntEnum):
    """Process exit codes of the `ndlab` command."""

    OK = 0
    USAGE = 2
    NUMERICAL = 3
    CERTIFICATION = 4
    CHECKPOINT = 5


class NdLabError(Exception):
    """Base class of every error raised on purpose by this package."""

    exit_code = ExitCode.USAGE


class ConfigError(NdLabError, ValueError):
    """A configuration value violates its documented range or type."""

    exit_code = ExitCode.USAGE


class ShapeError(NdLabError, ValueError):
    """Operand shapes are incompatible for the requested operation.

    Args:
        msg (str): Description of the mismatch.
        node_id (int | None, optional): Id of the graph node that failed.
    """

    exit_code = ExitCode.USAGE

    def __init__(self, msg: str, node_id: Optional[int] = None) -> None:
        self.node_id = node_id
        if node_id is not None:
            msg = f"[node {node_id}] {msg}"
        super().__init__(msg)


class NumericalError(NdLabError, ArithmeticError):
    """A loss, gradient or statistic became non-finite."""

    exit_code = ExitCode.NUMERICAL


class RankDeficientError(NumericalError):
    """A covariance cannot be whitened because it is (numerically) singular.

    Args:
        msg (str): Description of the failure.
        rank (int): Numerical rank found.
        dim (int): Full dimension expected.
    """

    def __init__(self, msg: str, rank: int, dim: int) -> None:
        self.rank = rank
        self.dim = dim
        super().__init__(f"{msg} (rank {rank} < {dim})")


class FrozenParameterError(NdLabError, RuntimeError):
    """An update was attempted on a frozen parameter."""

    exit_code = ExitCode.USAGE


class CheckpointError(NdLabError, ValueError):
    """A checkpoint is unreadable, of the wrong version or of another backbone."""

    exit_code = ExitCode.CHECKPOINT


class CertificationError(NdLabError, AssertionError):
    """A Monte Carlo certification or a replay comparison failed."""

    exit_code = ExitCode.CERTIFICATION

"""Central finite-difference verification of recorded gradients."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from neural_diversity.autodiff.tensor import Graph, Tensor

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference check on one tensor.

    Attributes:
        max_rel_error (float): Largest relative error over checked coordinates.
        passed (bool): Whether every coordinate is within tolerance and the
            loss path is differentiable.
        n_coords (int): Number of perturbed coordinates.
        worst_index (tuple | None): Coordinate with the largest error.
        reason (str): Empty on success, otherwise why the check failed.
    """

    max_rel_error: float
    passed: bool
    n_coords: int
    worst_index: Optional[tuple] = None
    reason: str = ""


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    graph: Graph,
    inputs: dict[str, Tensor],
    tensor: Tensor,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    loss_key: str = "loss",
    max_coords: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare the recorded gradient of `tensor` with central differences.

    Each selected coordinate is perturbed independently by ``±step`` and the
    builder is re-run without recording.

    Args:
        graph (Graph): Graph whose builder returns the scalar under `loss_key`.
        inputs (dict[str, Tensor]): Named builder inputs.
        tensor (Tensor): Tensor to verify; must be float64 and require grad.
        tolerance (float, optional): Max relative error. Defaults to 1e-4.
        step (float, optional): Finite-difference step. Defaults to 1e-5.
        loss_key (str, optional): Output holding the loss. Defaults to "loss".
        max_coords (int | None, optional): Check a seeded random subset of this
            many coordinates instead of all. Defaults to None.
        seed (int, optional): Seed of the coordinate subset. Defaults to 0.
        floor (float, optional): Denominator floor of the relative error.

    Raises:
        ValueError: `tensor` is not double precision.

    Returns:
        GradCheckReport: The deterministic report.
    """
    if tensor.dtype != np.float64:
        raise ValueError(f"Finite-difference checks need float64, got {tensor.dtype}.")

    outputs = graph.eval(inputs)
    graph.backward(outputs[loss_key], params=[tensor])
    analytic = np.array(tensor.grad, copy=True)

    if graph.nondifferentiable_hits:
        ops = sorted({graph.nodes[i].op for i in graph.nondifferentiable_hits})
        reason = f"non-differentiable op(s) {ops} on the loss path"
        logger.warning("Gradient check failed: %s.", reason)
        return GradCheckReport(float("inf"), False, 0, None, reason)

    coords = list(np.ndindex(*tensor.shape))
    if max_coords is not None and max_coords < len(coords):
        picked = np.random.default_rng(seed).choice(len(coords), max_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    numeric = np.zeros(len(coords))
    for k, idx in enumerate(coords):
        original = tensor.data[idx]
        tensor.data[idx] = original + step
        f_plus = graph.builder(**inputs)[loss_key].item()
        tensor.data[idx] = original - step
        f_minus = graph.builder(**inputs)[loss_key].item()
        tensor.data[idx] = original
        numeric[k] = (f_plus - f_minus) / (2.0 * step)

    picked_analytic = np.array([analytic[idx] for idx in coords])
    errors = relative_error(picked_analytic, numeric, floor)
    if not np.all(np.isfinite(errors)):
        return GradCheckReport(float("inf"), False, len(coords), None, "non-finite gradient")

    worst = int(np.argmax(errors)) if len(errors) else 0
    max_err = float(errors[worst]) if len(errors) else 0.0
    passed = max_err <= tolerance
    reason = "" if passed else f"relative error {max_err:.3e} above {tolerance:.1e}"
    logger.debug("Gradient check on %s: max relative error %.3e.", tensor, max_err)
    return GradCheckReport(
        max_err, passed, len(coords), coords[worst] if coords else None, reason
    )

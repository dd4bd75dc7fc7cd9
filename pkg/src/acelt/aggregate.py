"""Inference-time fusion of expert logits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from .errors import ConfigurationError, ContractError
from .graphcore import softmax
from .planner import membership_matrix

if TYPE_CHECKING:
    from .acemodel import LogitBundle


@dataclass(frozen=True)
class Prediction:
    fused_logits: np.ndarray
    confidences: np.ndarray
    predicted_label: np.ndarray  # 1-based category ids

    @classmethod
    def from_logits(cls, fused: np.ndarray) -> "Prediction":
        # np.argmax returns the first maximum, i.e. ties go to the lowest category
        return cls(fused, softmax(fused), np.argmax(fused, axis=1) + 1)


def rescale(bundle: "LogitBundle") -> list[np.ndarray]:
    """Scale each expert's logits by ``|w_i|^2 / |w_1|^2``."""
    norms = bundle.weight_sq_norms
    if not norms[0] > 0:
        raise ContractError("first expert's classifier weight norm must be positive")
    return [z * (n / norms[0]) for z, n in zip(bundle.raw, norms)]


def _stack_seen(logits: list[np.ndarray], bundle: "LogitBundle", fill: float):
    member = membership_matrix(bundle.assignments)[:, None, :]
    return member, np.where(member, np.stack(logits), fill)


def _average(logits: list[np.ndarray], bundle: "LogitBundle") -> Prediction:
    member, z = _stack_seen(logits, bundle, 0.0)
    return Prediction.from_logits(z.sum(axis=0) / member.sum(axis=0))


def group_average(bundle: "LogitBundle") -> Prediction:
    """Per-category mean of the rescaled logits over the experts trained on it."""
    return _average(bundle.scaled, bundle)


def group_average_unscaled(bundle: "LogitBundle") -> Prediction:
    return _average(bundle.raw, bundle)


def group_max(bundle: "LogitBundle") -> Prediction:
    """Per-category maximum of the rescaled logits over the experts trained on it."""
    _, z = _stack_seen(bundle.scaled, bundle, -np.inf)
    return Prediction.from_logits(z.max(axis=0))


def group_concat(bundle: "LogitBundle") -> Prediction:
    """Stitch frequency slices: slice j is read from expert j's raw logits.

    Slice j spans the categories that expert j adds to its successors'
    targets, i.e. ``start_j <= c < start_{j+1}``.
    """
    starts = [a.start - 1 for a in bundle.assignments] + [bundle.assignments[0].num_classes]
    fused = np.empty_like(bundle.raw[0])
    for j, z in enumerate(bundle.raw):
        fused[:, starts[j] : starts[j + 1]] = z[:, starts[j] : starts[j + 1]]
    return Prediction.from_logits(fused)


def solo_prediction(bundle: "LogitBundle", expert: int) -> Prediction:
    """Predict with one expert's raw logits, restricted to its target categories."""
    a = bundle.assignments[expert - 1]
    z = np.where(a.target_mask()[None, :], bundle.raw[expert - 1], -np.inf)
    return Prediction.from_logits(z)


AGGREGATORS: dict[str, Callable[["LogitBundle"], Prediction]] = {
    "avg_scaled": group_average,
    "max": group_max,
    "concat": group_concat,
    "avg_raw": group_average_unscaled,
}


def get_aggregator(name: str) -> Callable[["LogitBundle"], Prediction]:
    try:
        return AGGREGATORS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown aggregator {name!r}; choose from {', '.join(AGGREGATORS)}"
        ) from None

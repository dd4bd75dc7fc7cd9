"""Distribution-aware assignment of nested category splits to experts.

Categories are identified by 1-based ids ordered by descending training
count, so category 1 is the most frequent.  Expert ``i`` targets the suffix
``{s_i, ..., C}`` and treats the prefix ``{1, ..., s_i - 1}`` as interfering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, TypeVar

import numpy as np

from .errors import ConfigurationError, ContractError

T = TypeVar("T")


@dataclass(frozen=True)
class ClassProfile:
    """Per-category training counts, sorted descending."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(n) for n in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts:
            raise ConfigurationError("a class profile needs at least one category")
        if min(counts) < 1:
            raise ConfigurationError("every category needs at least one sample")
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise ConfigurationError("class counts must be in descending order")

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def count(self, c: int) -> int:
        """Count of 1-based category ``c``."""
        return self.counts[c - 1]


@dataclass(frozen=True)
class ExpertAssignment:
    expert_index: int
    target: tuple[int, ...]
    interfering: tuple[int, ...]

    @property
    def start(self) -> int:
        """First (most frequent) target category."""
        return self.target[0]

    @property
    def num_classes(self) -> int:
        return len(self.target) + len(self.interfering)

    def target_mask(self) -> np.ndarray:
        """Boolean mask over 0-based category columns."""
        mask = np.zeros(self.num_classes, dtype=bool)
        mask[self.start - 1 :] = True
        return mask

    def contains(self, labels) -> np.ndarray:
        return np.asarray(labels) >= self.start


def slice_starts(num_classes: int, num_experts: int) -> list[int]:
    """1-based first target category of each expert (floor rule)."""
    if not 1 <= num_experts <= num_classes:
        raise ConfigurationError(
            f"need 1 <= K <= C, got K={num_experts}, C={num_classes}"
        )
    return [(i * num_classes) // num_experts + 1 for i in range(num_experts)]


def assign(num_classes: int, num_experts: int) -> list[ExpertAssignment]:
    """Nested target / interfering splits for ``num_experts`` experts.

    >>> [a.target for a in assign(6, 3)]
    [(1, 2, 3, 4, 5, 6), (3, 4, 5, 6), (5, 6)]
    """
    return [
        ExpertAssignment(
            expert_index=i + 1,
            target=tuple(range(s, num_classes + 1)),
            interfering=tuple(range(1, s)),
        )
        for i, s in enumerate(slice_starts(num_classes, num_experts))
    ]


def _check_label(label: int, num_classes: int) -> None:
    if not 1 <= label <= num_classes:
        raise ContractError(f"label {label} outside 1..{num_classes}")


def sub_batch(
    batch: Iterable[tuple[T, int]], assignment: ExpertAssignment
) -> list[tuple[T, int]]:
    """Keep the (sample, label) pairs whose label the expert targets, in order."""
    out = []
    for sample, label in batch:
        _check_label(label, assignment.num_classes)
        if label >= assignment.start:
            out.append((sample, label))
    return out


def sub_batch_rows(
    labels_a, assignment: ExpertAssignment, labels_b=None
) -> np.ndarray:
    """Row indices of a label array routed to ``assignment``'s expert.

    With mixed samples, a row is kept only when both source labels are
    target categories, so interfering labels never reach the expert's
    classification loss.
    """
    labels_a = np.asarray(labels_a)
    if labels_a.size and (labels_a.min() < 1 or labels_a.max() > assignment.num_classes):
        raise ContractError(f"labels must lie in 1..{assignment.num_classes}")
    keep = labels_a >= assignment.start
    if labels_b is not None:
        keep &= np.asarray(labels_b) >= assignment.start
    return np.flatnonzero(keep)


def expert_set_for_class(c: int, assignments: Sequence[ExpertAssignment]) -> tuple[int, ...]:
    """Indices of the experts whose target set contains category ``c``."""
    _check_label(c, assignments[0].num_classes)
    return tuple(a.expert_index for a in assignments if c >= a.start)


def membership_matrix(assignments: Sequence[ExpertAssignment]) -> np.ndarray:
    """K x C boolean matrix; entry (i, c) is True when expert i targets c."""
    return np.stack([a.target_mask() for a in assignments])

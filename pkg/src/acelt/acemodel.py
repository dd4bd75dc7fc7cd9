"""The multi-expert network: shared trunk, expert branches and their losses."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import graphcore as gc
from .aggregate import rescale
from .errors import ConfigurationError, ContractError, DimensionError
from .graphcore import Parameter, Tensor
from .planner import ExpertAssignment, assign

CHECKPOINT_VERSION = 1


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Branch:
    """One expert: a hidden layer, an unbiased classifier and per-category scales."""

    weight: Parameter
    bias: Parameter
    classifier: Parameter
    scale: Parameter
    columns: np.ndarray  # 0-based category column of each output

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias, self.classifier, self.scale]

    def weight_sq_norm(self) -> float:
        w = self.classifier.value
        return float(np.sum(w * w))


@dataclass
class LogitBundle:
    """Per-expert logits for one batch.

    ``raw`` holds dense ``B x C`` arrays.  In split-specific mode an expert
    only produces its target columns; the others are NaN.  ``nodes`` keeps
    the graph outputs (``B x n_out``) that the losses differentiate.
    """

    raw: list[np.ndarray]
    weight_sq_norms: np.ndarray
    assignments: Sequence[ExpertAssignment]
    nodes: Optional[list[Tensor]] = None
    columns: Optional[list[np.ndarray]] = None

    def __post_init__(self):
        self.raw = [np.asarray(z, dtype=np.float64) for z in self.raw]
        self.weight_sq_norms = np.asarray(self.weight_sq_norms, dtype=np.float64)
        if len(self.raw) != len(self.assignments) or len(self.weight_sq_norms) != len(self.raw):
            raise DimensionError("bundle needs one logit array and one norm per expert")
        if self.columns is None:
            self.columns = [np.arange(z.shape[1]) for z in self.raw]

    @classmethod
    def from_nodes(cls, nodes, weight_sq_norms, assignments, columns=None) -> "LogitBundle":
        nodes = [gc.as_tensor(n) for n in nodes]
        num_classes = assignments[0].num_classes
        if columns is None:
            columns = [np.arange(num_classes) for _ in nodes]
        raw = []
        for node, cols in zip(nodes, columns):
            dense = np.full((node.shape[0], num_classes), np.nan)
            dense[:, cols] = node.value
            raw.append(dense)
        return cls(raw, weight_sq_norms, assignments, nodes=nodes, columns=list(columns))

    @property
    def num_experts(self) -> int:
        return len(self.raw)

    @cached_property
    def scaled(self) -> list[np.ndarray]:
        return rescale(self)


class AceModel:
    """Shared two-layer trunk followed by ``K`` expert branches.

    Branch 1 reads the trunk features directly; every other branch reads
    them through a stop-gradient barrier, so only expert 1's loss reaches
    the trunk.
    """

    def __init__(
        self,
        input_dim: int,
        num_classes: int,
        num_experts: int,
        hidden: int = 32,
        ssc_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        if input_dim < 1 or hidden < 1:
            raise ConfigurationError("input_dim and hidden must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.ssc_mode = ssc_mode
        self.assignments = assign(num_classes, num_experts)

        self.trunk = [
            Parameter(_uniform(rng, input_dim, (input_dim, hidden)), "trunk.0.weight"),
            Parameter(_uniform(rng, input_dim, (hidden,)), "trunk.0.bias"),
            Parameter(_uniform(rng, hidden, (hidden, hidden)), "trunk.1.weight"),
            Parameter(_uniform(rng, hidden, (hidden,)), "trunk.1.bias"),
        ]
        self.branches: list[Branch] = []
        for a in self.assignments:
            cols = np.arange(a.start - 1, num_classes) if ssc_mode else np.arange(num_classes)
            i = a.expert_index
            self.branches.append(
                Branch(
                    weight=Parameter(_uniform(rng, hidden, (hidden, hidden)), f"branch.{i}.weight"),
                    bias=Parameter(_uniform(rng, hidden, (hidden,)), f"branch.{i}.bias"),
                    classifier=Parameter(
                        _uniform(rng, hidden, (hidden, cols.size)), f"branch.{i}.classifier"
                    ),
                    scale=Parameter(np.ones(cols.size), f"branch.{i}.scale"),
                    columns=cols,
                )
            )

    @property
    def num_experts(self) -> int:
        return len(self.branches)

    def parameters(self) -> list[Parameter]:
        params = list(self.trunk)
        for b in self.branches:
            params.extend(b.parameters())
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def features(self, x) -> Tensor:
        x = gc.as_tensor(x)
        if x.value.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected inputs of width {self.input_dim}, got {x.shape}")
        w0, b0, w1, b1 = self.trunk
        h = gc.relu(gc.add(gc.matmul(x, w0), b0))
        return gc.relu(gc.add(gc.matmul(h, w1), b1))

    def forward(self, x) -> LogitBundle:
        h = self.features(x)
        detached = gc.stop_gradient(h) if self.num_experts > 1 else None
        nodes = []
        for i, br in enumerate(self.branches):
            inp = h if i == 0 else detached
            hb = gc.relu(gc.add(gc.matmul(inp, br.weight), br.bias))
            nodes.append(gc.mul(gc.matmul(hb, br.classifier), br.scale))
        norms = [br.weight_sq_norm() for br in self.branches]
        return LogitBundle.from_nodes(
            nodes, norms, self.assignments, columns=[br.columns for br in self.branches]
        )

    __call__ = forward

    # ------------------------------------------------------------ state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = {p.name for p in params} - set(state)
        if missing:
            raise ConfigurationError(f"checkpoint lacks {sorted(missing)}")
        for p in params:
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{p.name}: checkpoint shape {arr.shape} != {p.shape}")
            p.value[...] = arr


# ------------------------------------------------------------------ losses


def _expert_columns(bundle: LogitBundle, assignment: ExpertAssignment) -> np.ndarray:
    return bundle.columns[assignment.expert_index - 1]


def cls_loss(
    bundle: LogitBundle, assignment: ExpertAssignment, rows, targets
) -> Optional[Tensor]:
    """Cross-entropy of one expert on its sub-batch rows.

    ``targets`` are dense ``len(rows) x C`` probability rows (one-hot or a
    mixup pair).  Returns ``None`` for an empty sub-batch so the caller can
    skip the expert for this step.
    """
    rows = np.asarray(rows, dtype=np.intp)
    if rows.size == 0:
        return None
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (rows.size, assignment.num_classes):
        raise DimensionError(f"targets shape {targets.shape} does not match sub-batch")
    if np.any(targets[:, ~assignment.target_mask()] != 0):
        raise ContractError(f"expert {assignment.expert_index} got interfering-category targets")
    z = gc.take(bundle.nodes[assignment.expert_index - 1], rows, axis=0)
    cols = _expert_columns(bundle, assignment)
    return gc.softmax_cross_entropy(z, targets[:, cols])


def com_loss(bundle: LogitBundle, assignment: ExpertAssignment, rows) -> Tensor:
    """Mean over rows of the squared interfering-category logits."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = _expert_columns(bundle, assignment)
    ic = np.flatnonzero(cols < assignment.start - 1)
    if rows.size == 0 or ic.size == 0:
        return Tensor(0.0)
    z = gc.take(bundle.nodes[assignment.expert_index - 1], rows, axis=0)
    z_ic = gc.take(z, ic, axis=1)
    return gc.scale(gc.sum_of_squares(z_ic), 1.0 / rows.size)


def expert_loss(
    bundle: LogitBundle,
    assignment: ExpertAssignment,
    rows,
    targets,
    lambda_com: float = 1.0,
) -> Optional[Tensor]:
    """Classification loss plus ``lambda_com`` times the complement loss."""
    if lambda_com < 0:
        raise ConfigurationError("lambda_com must be non-negative")
    cls = cls_loss(bundle, assignment, rows, targets)
    if cls is None or lambda_com == 0:
        return cls
    return gc.add(cls, gc.scale(com_loss(bundle, assignment, rows), lambda_com))


# -------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: AceModel, config: dict, config_hash: str) -> Path:
    """Write every parameter array plus a JSON header into an ``.npz`` file."""
    path = Path(path)
    meta = {
        "format": "acelt-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "config": config,
        "shapes": {name: list(arr.shape) for name, arr in model.state_dict().items()},
    }
    header = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=header, **model.state_dict())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns ``(state, meta)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != "acelt-checkpoint":
            raise ConfigurationError(f"{path} is not an acelt checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k: data[k] for k in data.files if k != "__meta__"}
    for name, shape in meta["shapes"].items():
        if list(state[name].shape) != shape:
            raise DimensionError(f"{name}: stored shape {state[name].shape} != header {shape}")
    return state, meta

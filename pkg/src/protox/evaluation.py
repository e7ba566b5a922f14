"""Fidelity, flip-point sensitivity and complexity of an explainer policy.

Any object with ``action_set`` and ``predict_batch(states) -> actions`` can be
evaluated; ProtoX models take a faster path that encodes each distinct state
once.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from .demonstrations import DemonstrationDataset, FlipPointIndex
from .errors import ConfigurationError, EvaluationError
from .model import ProtoXModel

ZERO_THRESHOLD = 1e-8


class Policy(Protocol):
    action_set: Sequence[str]

    def predict_batch(self, states: np.ndarray) -> np.ndarray: ...


@dataclass
class EvalReport:
    fidelity: float
    sensitivity: float
    n_test: int
    n_flip: int
    prototype_count: int
    nonzero_weights: int
    per_action_confusion: list[list[int]]
    action_set: list[str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        lines = [
            f"{'fidelity':<18}{self.fidelity:.4f}",
            f"{'sensitivity':<18}{self.sensitivity:.4f}",
            f"{'test states':<18}{self.n_test}",
            f"{'flip points':<18}{self.n_flip}",
            f"{'prototypes':<18}{self.prototype_count}",
            f"{'nonzero weights':<18}{self.nonzero_weights}",
            "confusion (rows = expert, cols = explainer):",
        ]
        width = max(len(a) for a in self.action_set) + 2
        lines.append(" " * width + "".join(f"{a:>{width}}" for a in self.action_set))
        for name, row in zip(self.action_set, self.per_action_confusion):
            lines.append(f"{name:<{width}}" + "".join(f"{v:>{width}}" for v in row))
        return "\n".join(lines)


def _check_actions(policy, dataset: DemonstrationDataset) -> None:
    if tuple(policy.action_set) != tuple(dataset.action_set):
        raise ConfigurationError(
            f"policy action set {tuple(policy.action_set)} != dataset action set {tuple(dataset.action_set)}"
        )


def predict_dataset(policy, dataset: DemonstrationDataset, rows=None, batch_size: int = 512) -> np.ndarray:
    """Predicted action for each requested row (all rows by default)."""
    if rows is None:
        rows = np.arange(len(dataset))
    rows = np.asarray(rows, dtype=np.int64)
    if isinstance(policy, ProtoXModel) and policy.encoder is not None:
        first, inverse = dataset.unique_states()
        needed = np.unique(inverse[rows])
        lat = policy.encoder.encode_batch(dataset.states(first[needed])).reshape(len(needed), -1)
        pred = policy.predict_latents(lat)
        return pred[np.searchsorted(needed, inverse[rows])]
    out = [policy.predict_batch(dataset.states(rows[i : i + batch_size])) for i in range(0, len(rows), batch_size)]
    return np.concatenate(out).astype(np.int64) if out else np.zeros(0, dtype=np.int64)


def fidelity(policy, test_dataset: DemonstrationDataset, predictions: np.ndarray | None = None) -> float:
    if not len(test_dataset):
        raise EvaluationError("empty test set")
    _check_actions(policy, test_dataset)
    pred = predict_dataset(policy, test_dataset) if predictions is None else predictions
    return float(np.mean(pred == test_dataset.actions))


def _flip_rows(dataset: DemonstrationDataset, flips: FlipPointIndex) -> np.ndarray:
    lookup = {(int(e), int(t)): r for r, (e, t) in enumerate(dataset.index)}
    try:
        return np.array([lookup[(int(e), int(t))] for e, t in flips], dtype=np.int64)
    except KeyError as exc:
        raise EvaluationError(f"flip point {exc.args[0]} is not in the test dataset") from None


def sensitivity(
    policy,
    test_dataset: DemonstrationDataset,
    flips: FlipPointIndex,
    predictions: np.ndarray | None = None,
) -> float:
    if not len(flips):
        raise EvaluationError("no flip points to evaluate")
    _check_actions(policy, test_dataset)
    rows = _flip_rows(test_dataset, flips)
    pred = predict_dataset(policy, test_dataset, rows) if predictions is None else predictions[rows]
    return float(np.mean(pred == test_dataset.actions[rows]))


def complexity(model: ProtoXModel) -> tuple[int, int]:
    """(number of prototypes, number of head weights with |w| > 1e-8)."""
    W = model.W.detach().numpy()
    return model.n_prototypes, int((np.abs(W) > ZERO_THRESHOLD).sum())


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, n_actions: int) -> np.ndarray:
    cm = np.zeros((n_actions, n_actions), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def evaluate(policy, test_dataset: DemonstrationDataset) -> EvalReport:
    _check_actions(policy, test_dataset)
    pred = predict_dataset(policy, test_dataset)
    flips = test_dataset.flip_points()
    cm = confusion_matrix(test_dataset.actions, pred, len(test_dataset.action_set))
    if isinstance(policy, ProtoXModel):
        n_protos, n_weights = complexity(policy)
    else:
        n_protos, n_weights = 0, 0
    return EvalReport(
        fidelity=fidelity(policy, test_dataset, pred),
        sensitivity=sensitivity(policy, test_dataset, flips, pred) if len(flips) else float("nan"),
        n_test=len(test_dataset),
        n_flip=len(flips),
        prototype_count=n_protos,
        nonzero_weights=n_weights,
        per_action_confusion=cm.tolist(),
        action_set=list(test_dataset.action_set),
    )

from __future__ import annotations

import json

import numpy as np
import pytest

from protox import demonstrations as D
from protox.errors import ConfigurationError, EvaluationError
from protox.evaluation import (
    EvalReport,
    complexity,
    confusion_matrix,
    evaluate,
    fidelity,
    predict_dataset,
    sensitivity,
)
from protox.model import init_model
from protox.pretrain import encode_dataset
from protox.training import ObjectiveWeights, TrainConfig, merge_prototypes, train_bc

ACTIONS = ("RIGHT", "JUMP", "RIGHT+JUMP", "NOOP")


def _coded_dataset(action_lists):
    """Each observation stores (episode, t) in its first two pixels so stub policies can look states up."""
    trajs = []
    for e, acts in enumerate(action_lists):
        T = len(acts)
        obs = np.zeros((T, 2, 2, 3), np.uint8)
        obs[:, 0, 0, 0] = e
        obs[:, 0, 1, 0] = np.arange(T)
        trajs.append(D.Trajectory(obs, np.asarray(acts), e))
    return D.DemonstrationDataset(trajs, ACTIONS, stack_depth=1)


class TablePolicy:
    action_set = ACTIONS

    def __init__(self, fn):
        self.fn = fn

    def predict_batch(self, states):
        return np.array([self.fn(int(s[0, 0, 0, 0]), int(s[0, 0, 1, 0])) for s in states])


def test_memorizing_and_constant_policies():
    ds = _coded_dataset([[0, 1, 2, 3, 0, 1, 2, 3]])
    acts = ds.trajectory(0).actions
    assert fidelity(TablePolicy(lambda e, t: acts[t]), ds) == 1.0
    assert fidelity(TablePolicy(lambda e, t: 2), ds) == 0.25


def test_sensitivity_perfect_and_lagged():
    eps = [[0, 0, 1, 1, 1, 0, 0, 2], [3, 3, 0, 1]]
    ds = _coded_dataset(eps)
    flips = ds.flip_points()
    assert sensitivity(TablePolicy(lambda e, t: eps[e][t]), ds, flips) == 1.0
    lagged = TablePolicy(lambda e, t: eps[e][max(t - 1, 0)])
    assert sensitivity(lagged, ds, flips) == 0.0
    with pytest.raises(EvaluationError):
        sensitivity(lagged, ds, D.FlipPointIndex())


def test_sensitivity_equals_fidelity_on_flip_subset():
    rng = np.random.default_rng(0)
    eps = [rng.integers(0, 4, size=30).tolist() for _ in range(3)]
    ds = _coded_dataset(eps)
    pol = TablePolicy(lambda e, t: (eps[e][t] + (t % 3 == 0)) % 4)
    rows = ds.flip_rows()
    pred = predict_dataset(pol, ds, rows)
    assert sensitivity(pol, ds, ds.flip_points()) == float(np.mean(pred == ds.actions[rows]))


def test_metrics_invariant_to_order():
    rng = np.random.default_rng(1)
    eps = [rng.integers(0, 4, size=20).tolist() for _ in range(4)]
    ds = _coded_dataset(eps)
    rev = D.DemonstrationDataset(ds.trajectories[::-1], ACTIONS, stack_depth=1)
    pol = TablePolicy(lambda e, t: (t * 7 + e) % 4)
    assert fidelity(pol, ds) == fidelity(pol, rev)
    assert sensitivity(pol, ds, ds.flip_points()) == sensitivity(pol, rev, rev.flip_points())


def test_errors():
    ds = _coded_dataset([[0, 1]])

    class Other(TablePolicy):
        action_set = ("LEFT", "RIGHT")

    with pytest.raises(ConfigurationError):
        fidelity(Other(lambda e, t: 0), ds)
    empty = D.DemonstrationDataset([], ACTIONS, stack_depth=1)
    with pytest.raises(EvaluationError):
        fidelity(TablePolicy(lambda e, t: 0), empty)


def test_confusion_trace_identity():
    rng = np.random.default_rng(2)
    truth, pred = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    cm = confusion_matrix(truth, pred, 4)
    assert cm.sum() == 200 and (cm >= 0).all()
    assert np.trace(cm) / cm.sum() == np.mean(truth == pred)


@pytest.fixture(scope="module")
def small_model(tiny_encoder, tiny_dataset):
    lat = encode_dataset(tiny_encoder, tiny_dataset)
    m = init_model(lat, tiny_dataset.actions, ACTIONS, K=3, seed=0, encoder=tiny_encoder)
    m, _ = train_bc(m, lat, tiny_dataset.actions, tiny_dataset.index, ObjectiveWeights(), TrainConfig(epochs=3))
    return m


def test_batched_equals_one_at_a_time(small_model, tiny_dataset):
    batched = predict_dataset(small_model, tiny_dataset)
    single = np.array([small_model.predict_batch(tiny_dataset.states([r]))[0] for r in range(len(tiny_dataset))])
    assert np.array_equal(batched, single)


def test_evaluate_report_and_complexity(small_model, tiny_dataset):
    merged, rep = merge_prototypes(small_model)
    n_protos, n_weights = complexity(merged)
    assert n_protos == len({tuple(s) for s in merged.source_index.tolist()}) == rep.after < 12
    assert n_weights == int((np.abs(merged.W.detach().numpy()) > 1e-8).sum())
    report = evaluate(merged, tiny_dataset)
    cm = np.array(report.per_action_confusion)
    assert report.fidelity == pytest.approx(np.trace(cm) / cm.sum())
    assert report.n_test == len(tiny_dataset) and report.n_flip == len(tiny_dataset.flip_points())
    assert EvalReport(**json.loads(report.to_json())) == report
    table = report.table()
    assert table.splitlines()[0].startswith("fidelity")

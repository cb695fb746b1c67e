import json

import numpy as np
import pytest

from eul.data import DeletionRequest, resolve_request
from eul.errors import ContractError, InsufficientDataError
from eul.metrics import (MetricsReport, accuracy, fit_probe, format_table, full_report,
                         mia_attack, mlm_loss_on_forgot)


def test_probe_separates_blobs():
    rng = np.random.default_rng(0)
    pos = rng.normal(2.0, 1.0, (200, 5))
    neg = rng.normal(-2.0, 1.0, (200, 5))
    assert fit_probe(pos, neg, 0).accuracy >= 0.95


def test_probe_chance_on_identical_distributions():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        accs.append(fit_probe(rng.normal(size=(300, 4)), rng.normal(size=(300, 4)), seed).accuracy)
    assert abs(np.mean(accs) - 0.5) < 0.05


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    pos, neg = rng.normal(2.0, 1.0, (300, 5)), rng.normal(-2.0, 1.0, (300, 5))
    assert abs(fit_probe(pos, neg, 0, shuffle_labels=True).accuracy - 0.5) < 0.1


def test_probe_balanced_split():
    p = fit_probe(np.ones((50, 2)), np.zeros((20, 2)), 0)
    assert len(p.train_idx) + len(p.test_idx) == 40
    assert len(p.train_idx) == 28
    assert p.predict(np.array([[1.0, 1.0], [0.0, 0.0]])).tolist() == [1, 0]


def test_probe_constant_feature_safe():
    p = fit_probe(np.c_[np.ones(30), np.arange(30.0)], np.c_[np.ones(30), -np.arange(30.0)], 0)
    assert np.isfinite(p.weights).all()


def test_probe_needs_data():
    with pytest.raises(InsufficientDataError):
        fit_probe(np.zeros((5, 2)), np.zeros((50, 2)))


def test_probe_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(40, 3)) + 0.5
    assert fit_probe(a, b, 7).accuracy == fit_probe(a, b, 7).accuracy


def test_accuracy_empty(tiny_model):
    with pytest.raises(ContractError):
        accuracy(tiny_model, [])


def test_report_round_trip():
    rep = MetricsReport("eul", 0.9, 0.99, 0.6, 12.5, 3.2, 0.51, {"probe": 0}, {"alpha": 0.8})
    back = MetricsReport.from_json(json.loads(rep.dumps()))
    assert back == rep


@pytest.mark.parametrize("field,value", [("test_accuracy", 1.2), ("mia_accuracy", -0.1),
                                         ("mlm_loss_forgot", float("nan"))])
def test_report_validation(field, value):
    kwargs = dict(strategy="x", test_accuracy=0.5, retained_accuracy=0.5, forgot_accuracy=0.5,
                  mlm_loss_forgot=1.0, update_time_s=0.0, mia_accuracy=0.5)
    kwargs[field] = value
    with pytest.raises(ContractError):
        MetricsReport(**kwargs)


def test_format_table():
    reps = [MetricsReport("eul", 0.9, 0.99, 0.6, 12.5, 3.2, 0.51),
            MetricsReport("finetune", 0.91, 0.995, 0.95, 8.0, 4.0, 0.5)]
    lines = format_table(reps).splitlines()
    assert lines[0].split() == ["strategy", "test", "retained", "forgot", "mlm_forgot", "time_s",
                                "mia"]
    assert lines[2].split()[0] == "finetune" and "0.950" in lines[2]


def test_full_report_on_trained_model(small_trained, small_corpus):
    model, history = small_trained
    assert history[-1] < history[0]
    split = resolve_request(small_corpus, DeletionRequest("r", {"entity01"}))
    rep = full_report(model, split, small_corpus.test, table=small_corpus.table,
                      seeds={"probe": 1, "mask": 0})
    assert rep.strategy == "original" and 0 <= rep.mia_accuracy <= 1
    assert rep.mlm_loss_forgot == mlm_loss_on_forgot(model, split.forget)
    assert rep.mia_accuracy == mia_attack(model, split, 1, small_corpus.table)

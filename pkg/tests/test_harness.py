import threading
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from src.config import HarnessConfig, LinearProbeConfig
from src.errors import DomainError, LeakageError
from src.models import ProbeRun
from src.services.harness import (
    ProbeData, cv_folds, cv_harness, patient_majority, patient_split, run_timestamp, support_set_harness,
    view_probe_trainer,
)


def patient_data(n_patients=50, per_patient=4, classes=("a", "b", "c", "d", "e")):
    labels, pids = [], []
    for p in range(n_patients):
        for _ in range(per_patient):
            labels.append(classes[p % len(classes)])
            pids.append(f"p{p:03d}")
    return ProbeData(labels, pids)


class Recorder:
    """Trainer stub that remembers which patients each run saw."""

    def __init__(self, data: ProbeData):
        self.pids = np.asarray(data.patient_ids)
        self.calls = []
        self.lock = threading.Lock()

    def __call__(self, fit_idx, val_idx, test_idx, seed) -> float:
        with self.lock:
            self.calls.append((set(self.pids[fit_idx]), set(self.pids[val_idx]), set(self.pids[test_idx]), seed))
        return 0.5


def test_cv_harness_runs_and_leakage():
    data = patient_data()
    trainer = Recorder(data)
    runs = cv_harness(data, "view", trainer, HarnessConfig(jobs=3))
    assert len(runs) == 25
    assert sorted((r.fold, r.seed_index) for r in runs) == [(f, s) for f in range(5) for s in range(5)]
    assert all(r.mode == "cv" and r.value == 0.5 for r in runs)
    for fit, val, test, _ in trainer.calls:
        assert fit and val and test
        assert not fit & val and not (fit | val) & test
    assert len({seed for *_, seed in trainer.calls}) == 25


def test_cv_folds_cover_training_patients():
    data = patient_data()
    train, test = patient_split(data, 0.2, seed=0)
    assert len(test) == 10 and not set(train) & set(test)
    folds = cv_folds(train, patient_majority(data.labels, data.patient_ids), 5, seed=0)
    vals = [set(v) for _, v in folds]
    assert set().union(*vals) == set(train)
    assert max(map(len, vals)) - min(map(len, vals)) <= 1


def test_cv_folds_too_few_patients():
    with pytest.raises(DomainError):
        cv_folds(["p0", "p1"], {"p0": "a", "p1": "b"}, 5, seed=0)


def test_fixed_test_mask_is_respected():
    data = patient_data(20)
    data.test_mask = np.array([pid in ("p000", "p001", "p002", "p003") for pid in data.patient_ids])
    trainer = Recorder(data)
    cv_harness(data, "view", trainer, HarnessConfig(n_seeds=1))
    assert all(test == {"p000", "p001", "p002", "p003"} for *_, test, _ in trainer.calls)


def test_test_mask_leak_is_caught():
    data = ProbeData(["a", "a", "b", "b"], ["p0", "p0", "p1", "p1"], test_mask=np.array([True, False, False, False]))
    with pytest.raises(LeakageError):
        patient_split(data, 0.2, seed=0)


def test_support_sets_have_distinct_patients():
    data = patient_data(10, classes=("a", "b"))
    trainer = Recorder(data)
    runs = support_set_harness(data, 2, "view", trainer, HarnessConfig(n_seeds=1))
    assert len(runs) == 5
    assert all(r.mode == "support-2" for r in runs)
    for fit, val, test, _ in trainer.calls:
        assert len(fit) == 2 and len(val) == 2
        assert len(fit | val) == 4
        assert not (fit | val) & test


def test_support_sets_need_enough_patients():
    data = patient_data(10, classes=("a", "b"))
    with pytest.raises(DomainError):
        support_set_harness(data, 8, "view", Recorder(data))


def test_view_probe_on_separable_features():
    rng = np.random.default_rng(0)
    data = patient_data(40)
    classes = sorted(set(data.labels))
    centers = {c: rng.normal(0, 3, size=8) for c in classes}
    features = np.stack([centers[y] + rng.normal(0, 0.3, size=8) for y in data.labels])
    trainer = view_probe_trainer(features, data.labels, classes, LinearProbeConfig(lr=0.5, epochs=100))
    runs = cv_harness(data, "view", trainer, HarnessConfig(n_seeds=2))
    assert np.mean([r.value for r in runs]) >= 0.9


def test_run_timestamp_pinned(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert run_timestamp() == datetime(1970, 1, 1, tzinfo=timezone.utc)


def test_probe_run_default_timestamp_is_utc(monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    record = ProbeRun("view", "fetal", 0, 0, "macro_f1", 0.5)
    assert record.timestamp.utcoffset() == timedelta(0)
    assert ProbeRun.from_row(record.to_dict()).timestamp == record.timestamp

    monkeypatch.setenv("SOURCE_DATE_EPOCH", "86400")
    assert ProbeRun("view", "fetal", 0, 0, "macro_f1", 0.5).to_dict()["timestamp"] == "1970-01-02T00:00:00+00:00"

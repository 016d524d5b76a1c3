from datetime import datetime, timezone

import numpy as np
import pandas as pd
import pytest

from src.errors import DomainError, UndefinedMetricError
from src.models import ProbeRun
from src.services.reporting import pairwise_wilcoxon, roc_plot, roc_points, summary_table, write_report

TS = datetime(2024, 1, 1, tzinfo=timezone.utc)


def cv_runs(model: str, offset: float):
    return [
        ProbeRun("view", model, f, s, "macro_f1", 0.5 + offset + 0.01 * (f * 5 + s), TS)
        for f in range(5) for s in range(5)
    ]


def test_summary_table():
    runs = [ProbeRun("view", "a", 0, s, "macro_f1", v, TS) for s, v in enumerate([0.8, 0.9, 1.0])]
    row = summary_table(runs).iloc[0]
    assert row["mean"] == pytest.approx(0.9)
    assert row["std"] == pytest.approx(0.1)
    assert row["count"] == 3
    assert row["summary"] == "0.9000 ± 0.1000"


def test_summary_table_empty():
    with pytest.raises(DomainError):
        summary_table([])


def test_pairwise_wilcoxon_matches_runs():
    tests = pairwise_wilcoxon(cv_runs("a", 0.1) + cv_runs("b", 0.0))
    assert len(tests) == 1
    row = tests.iloc[0]
    assert (row["model_a"], row["model_b"], row["n"]) == ("a", "b", 25)
    assert row["mean_delta"] == pytest.approx(0.1)
    assert row["p_value"] < 0.001


def test_roc_points():
    curve = roc_points([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    np.testing.assert_allclose(curve["tpr"], [0.0, 0.5, 0.5, 1.0, 1.0])
    np.testing.assert_allclose(curve["fpr"], [0.0, 0.0, 0.5, 0.5, 1.0])
    with pytest.raises(UndefinedMetricError):
        roc_points([0.1, 0.2], [1, 1])


def test_roc_plot(tmp_path):
    curve = roc_points([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    path = roc_plot({"chd": {**curve, "auroc": 0.75}}, str(tmp_path / "roc.png"))
    assert path.stat().st_size > 0


def test_write_report(tmp_path):
    paths = write_report(cv_runs("a", 0.1) + cv_runs("b", 0.0), str(tmp_path))
    assert {p.name for p in paths} == {"summary.csv", "wilcoxon.csv", "summary.png"}
    table = pd.read_csv(tmp_path / "summary.csv")
    assert sorted(table["model"]) == ["a", "b"]

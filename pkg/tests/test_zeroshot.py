import re

import numpy as np
import pytest

from src.config import CurationConfig, ZeroShotConfig
from src.constants import FIVE_VIEWS, GARule, ValidityStatus
from src.errors import DomainError, ShapeError
from src.models import GAEstimate, ImageRecord
from src.services.curation import TemplateBank
from src.services.growth import load_quantile_models, median_hc_mm
from src.services.zeroshot import (
    GA_DAYS, GAEstimator, GAPromptGenerator, PromptBank, brain_subview_report, check_validity, class_embeddings,
    classify, estimate_ga, evaluate_ga, evaluate_views, hc_percentile_bounds, select_ga,
)

from conftest import unit_rows


@pytest.fixture(scope="module")
def quantiles():
    return load_quantile_models(ZeroShotConfig().quantile_path)


# ==================== Prompt banks ====================

def test_prompt_bank_file_has_five_views():
    bank = PromptBank.load(ZeroShotConfig().prompt_path)
    assert set(FIVE_VIEWS) <= set(bank.classes)
    with pytest.raises(DomainError):
        bank.subset(["kidney"])


def test_prompt_bank_needs_five_prompts():
    with pytest.raises(DomainError):
        PromptBank({"brain": ("a", "b", "c", "d")})


def test_class_embeddings_orthogonal():
    vectors = {"a": [1.0, 0.0], "b": [0.0, 1.0]}
    bank = {"x": ["a"] * 5, "y": ["b"] * 5}
    embs = class_embeddings(bank, lambda texts: np.array([vectors[t] for t in texts]))
    assert float(np.dot(embs["x"], embs["y"])) == pytest.approx(0.0)
    np.testing.assert_allclose(embs["x"], [1.0, 0.0])


def test_class_embeddings_average_then_renormalize():
    vectors = {"a": [1.0, 0.0], "b": [0.0, 1.0]}
    embs = class_embeddings({"x": ["a", "b"]}, lambda texts: np.array([vectors[t] for t in texts]))
    np.testing.assert_allclose(embs["x"], [2 ** -0.5, 2 ** -0.5])


def test_classify_ties_to_first_name():
    label, scores = classify(np.array([1.0, 0.0]), {"zeta": np.array([1.0, 0.0]), "alpha": np.array([1.0, 0.0])})
    assert label == "alpha"
    assert scores == {"alpha": 1.0, "zeta": 1.0}


def test_evaluate_views_report():
    class_embs = {"brain": np.array([1.0, 0.0]), "heart": np.array([0.0, 1.0])}
    embs = unit_rows(np.array([[1.0, 0.1], [0.2, 1.0], [0.9, 0.5]]))
    report = evaluate_views(embs, ["brain", "heart", "heart"], class_embs)
    assert [p["prediction"] for p in report["predictions"]] == ["brain", "heart", "brain"]
    assert report["confusion_matrix"] == [[1, 0], [1, 1]]
    assert report["macro_f1"] == pytest.approx((2 / 3 + 2 / 3) / 2)


def test_brain_subview_report_keeps_subview_labels():
    axes = {"tc": [0.0, 1.0, 0.0], "tt": [1.0, 0.0, 0.0], "tv": [0.0, 0.0, 1.0]}
    bank = {"transcerebellum": ["tc"], "transthalamic": ["tt"], "transventricular": ["tv"]}
    encode = lambda texts: np.array([axes[t] for t in texts])
    records = [
        ImageRecord("b0", "p0", "", frozenset({"brain", "transthalamic"})),
        ImageRecord("b1", "p1", "", frozenset({"brain"})),
        ImageRecord("b2", "p2", "", frozenset({"brain", "transventricular"})),
    ]
    report = brain_subview_report(np.eye(3), records, bank, encode)
    assert [p["image_id"] for p in report["predictions"]] == ["b0", "b2"]
    assert all(p["prediction"] == p["label"] for p in report["predictions"])
    assert brain_subview_report(np.eye(3)[[1]], records[1:2], bank, encode) is None


# ==================== GA selection ====================

def test_select_ga_median_of_top_15():
    days = list(range(98, 281))
    scores = [1.0 if 100 <= d <= 114 else 0.0 for d in days]
    estimate = select_ga(days, scores)
    assert estimate.ga_days == 107
    assert sorted(estimate.top_candidates) == list(range(100, 115))


def test_select_ga_argmax_and_ties():
    days = [120, 130, 140]
    assert select_ga(days, [0.5, 0.9, 0.9], top_k=1, rule=GARule.ARGMAX).ga_days == 130
    assert select_ga(days, [0.1, 0.2, 0.3], top_k=3).ga_days == 130


def test_select_ga_mismatch():
    with pytest.raises(ShapeError):
        select_ga([100, 101], [0.1])


def bump_encoder(width: float = 4.0):
    """Unit vectors peaked at the GA written in each prompt."""
    def encode(texts):
        rows = []
        for text in texts:
            weeks, days = map(int, re.search(r"(\d+)w (\d+)d", text).groups())
            rows.append(np.exp(-0.5 * ((GA_DAYS - (7 * weeks + days)) / width) ** 2))
        return unit_rows(np.array(rows))
    return encode


def test_ga_estimator_recovers_day():
    generator = GAPromptGenerator(TemplateBank.load(CurationConfig().template_path))
    estimator = GAEstimator(generator, bump_encoder())
    image = estimator.prompt_matrix(0.5)[list(GA_DAYS).index(150)]
    for rule in GARule:
        assert estimator.estimate(image, 0.5, rule).ga_days == 150


def test_estimate_ga_matches_estimator():
    generator = GAPromptGenerator(TemplateBank.load(CurationConfig().template_path))
    image = GAEstimator(generator, bump_encoder()).prompt_matrix(0.5)[list(GA_DAYS).index(200)]
    assert estimate_ga(image, generator, bump_encoder(), 0.5).ga_days == 200


def test_ga_estimator_needs_spacing():
    generator = GAPromptGenerator(TemplateBank.load(CurationConfig().template_path))
    with pytest.raises(DomainError):
        GAEstimator(generator, bump_encoder()).scores(np.ones(len(GA_DAYS)), None)


# ==================== Validity ====================

def test_quantile_curves(quantiles):
    assert median_hc_mm(98, quantiles) == pytest.approx(100.0, abs=0.01)
    assert median_hc_mm(280, quantiles) == pytest.approx(342.0, abs=0.01)
    lo, hi = hc_percentile_bounds(189, quantiles)
    assert lo < median_hc_mm(189, quantiles) < hi


def test_quantile_file_errors(tmp_path):
    path = tmp_path / "q.txt"
    path.write_text("2.5,1,1,0,0,0\n50,2,1,0,0,0\n97.5,3,1,0,0,0\n")
    with pytest.raises(DomainError):
        load_quantile_models(str(path))
    path.write_text("# source: t\n# version: 1\n2.5,1,-1,0,0,0\n50,2,1,0,0,0\n97.5,3,1,0,0,0\n")
    with pytest.raises(DomainError):
        load_quantile_models(str(path))


def test_hc_out_of_range_is_excluded(quantiles):
    check = check_validity(99.0, GAEstimate(150, [150]), quantiles)
    assert check.status == ValidityStatus.EXCLUDED
    assert check.reason.startswith("hc_out_of_range")


def test_hc_band_is_inclusive(quantiles):
    lo, hi = hc_percentile_bounds(200, quantiles)
    assert check_validity(lo, GAEstimate(200, [200]), quantiles).valid
    assert check_validity(hi, GAEstimate(200, [200]), quantiles).valid
    assert not check_validity(hi + 1.0, GAEstimate(200, [200]), quantiles).valid


def test_evaluate_ga_rates(quantiles):
    generator = GAPromptGenerator(TemplateBank.load(CurationConfig().template_path))
    estimator = GAEstimator(generator, bump_encoder())
    matrix = estimator.prompt_matrix(1.0)
    records, embs = [], []
    for k, ga in enumerate((130, 140, 150)):
        records.append(ImageRecord(f"b{k}", f"p{k}", "", frozenset({"brain"}), ga_days=ga, pixel_spacing_mm=1.0,
                                   hc_mm=median_hc_mm(ga, quantiles)))
        embs.append(matrix[ga - 98])
    report = evaluate_ga(np.array(embs), records, estimator, quantiles)
    assert report["rules"]["median"]["validity_rate"] == 1.0
    assert report["rules"]["argmax"]["validity_rate"] == 1.0
    assert [row["median"]["ga_days"] for row in report["predictions"]] == [130, 140, 150]

from dataclasses import replace

import cv2
import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from src.config import CurationConfig
from src.constants import FIVE_VIEWS, Subgroup
from src.errors import DedupError, DomainError, UnknownLabelSetError
from src.models import ImageRecord
from src.services.curation import (
    Lexicon, TemplateBank, build_caption_set, build_shards, confident_flags, confident_thresholds,
    oof_probabilities, pseudo_label, pseudo_label_records, read_manifest, read_shards, refine_brain_subviews,
    route_subgroup, write_manifest, write_shards,
)
from src.services.phantom import gen_dataset
from src.services.tokenizer import train_bpe


@pytest.fixture(scope="module")
def templates() -> TemplateBank:
    return TemplateBank.load(CurationConfig().template_path)


@pytest.fixture(scope="module")
def lexicon() -> Lexicon:
    return Lexicon.load(CurationConfig().lexicon_path)


def record(image_id="i0", labels=("brain",), **kw) -> ImageRecord:
    subgroup = kw.pop("subgroup", Subgroup.STANDARD_VIEW if labels else Subgroup.UNLABELED)
    return ImageRecord(image_id, kw.pop("patient_id", "p0"), f"images/{image_id}.png",
                       frozenset(labels), subgroup=subgroup, **kw)


# ==================== Routing ====================

def test_route_subgroup(lexicon):
    assert route_subgroup(record(labels=("brain",)), lexicon) == Subgroup.STANDARD_VIEW
    assert route_subgroup(record(labels=("brain", "transthalamic")), lexicon) == Subgroup.STANDARD_VIEW
    assert route_subgroup(record(labels=()), lexicon) == Subgroup.UNLABELED
    assert route_subgroup(record(labels=("brain", "spine")), lexicon) == Subgroup.MULTI_KEYWORD
    assert route_subgroup(record(labels=("heart", "transthalamic")), lexicon) == Subgroup.MULTI_KEYWORD


# ==================== Captions ====================

def test_caption_set_with_ga_and_spacing(templates):
    cs = build_caption_set(record(ga_days=140, pixel_spacing_mm=0.2), templates)
    assert len(set(cs.captions)) == 5
    assert all("20w 0d" in c and "0.2 mm/px" in c for c in cs.captions)


def test_caption_set_without_ga(templates):
    cs = build_caption_set(record(labels=("femur",)), templates)
    assert cs.captions == tuple(s.format(ga="", spacing="") for s in templates.skeletons({"femur"}))


def test_caption_set_deterministic(templates):
    r = record(ga_days=200, pixel_spacing_mm=0.5)
    assert build_caption_set(r, templates) == build_caption_set(r, templates)


def test_caption_set_unknown_labels(templates):
    with pytest.raises(UnknownLabelSetError):
        build_caption_set(record(labels=("kidney", "orbit")), templates)


def test_textbook_caption(templates):
    r = record(labels=(), subgroup=Subgroup.TEXTBOOK, caption="Figure of a fetal kidney")
    cs = build_caption_set(r, templates)
    assert all("Figure of a fetal kidney" in c for c in cs.captions)


def test_every_label_set_fits_token_budget(templates):
    vocab = train_bpe([s for v in templates.label_sets.values() for s in v], 400)
    for key in templates.label_sets:
        r = record(labels=tuple(key.split("+")), ga_days=280, pixel_spacing_mm=0.125)
        build_caption_set(r, templates, vocab)


# ==================== Confident learning ====================

def test_confident_flags_calibrated_one_hot():
    labels = np.array([0, 1, 2, 1])
    assert confident_flags(np.eye(3)[labels], labels) == set()


def test_confident_flags_small_example():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.1, 0.9]])
    labels = np.array([0, 0, 1])
    np.testing.assert_allclose(confident_thresholds(probs, labels), [0.55, 0.9])
    assert confident_flags(probs, labels) == set()


def test_confident_flags_catches_swap():
    probs = np.array([[0.95, 0.05], [0.9, 0.1], [0.1, 0.9], [0.05, 0.95], [0.97, 0.03]])
    labels = np.array([0, 0, 1, 1, 1])
    assert confident_flags(probs, labels) == {4}


def test_zero_support_class_never_confident():
    probs = np.array([[0.5, 0.5], [0.6, 0.4]])
    assert confident_thresholds(probs, np.array([0, 0]))[1] == np.inf


def test_corrupted_labels_are_flagged(rng):
    n, classes = 200, 4
    y = np.repeat(np.arange(classes), n // classes)
    centers = rng.normal(0, 6, size=(classes, 8))
    x = centers[y] + rng.normal(0, 0.5, size=(n, 8))
    patients = [f"p{i // 2}" for i in range(n)]
    noisy = y.copy()
    corrupt = rng.choice(n, 20, replace=False)
    noisy[corrupt] = (y[corrupt] + 1) % classes
    flags = confident_flags(oof_probabilities(x, noisy, patients, 5, 0), noisy)
    assert len(flags & set(corrupt.tolist())) >= 16


@pytest.mark.slow
def test_phantom_label_swaps_are_flagged_then_recovered():
    ds = gen_dataset(40, 5, {v: 1 / len(FIVE_VIEWS) for v in FIVE_VIEWS}, seed=3, height=128, width=144)
    x = np.stack([
        cv2.resize(ds.render(r.image_id, annotate=False).pixels, (36, 32), interpolation=cv2.INTER_AREA).ravel()
        for r in ds.records
    ])
    classes = sorted(FIVE_VIEWS)
    truth = np.array([classes.index(r.view.value) for r in ds.records])
    swapped = np.random.default_rng(3).choice(len(truth), 10, replace=False)
    noisy = truth.copy()
    noisy[swapped] = (truth[swapped] + 1) % len(classes)

    flags = confident_flags(oof_probabilities(x, noisy, [r.patient_id for r in ds.records], 5, 0), noisy)
    assert len(flags & set(swapped.tolist())) >= 7
    assert len(flags - set(swapped.tolist())) <= 19

    keep = np.array([i not in flags for i in range(len(truth))])
    clf = LogisticRegression(max_iter=1000).fit(x[keep], noisy[keep])
    unlabeled = [replace(ds.records[i], labels=frozenset(), subgroup=Subgroup.UNLABELED) for i in swapped]
    relabeled = pseudo_label_records(unlabeled, clf.predict_proba(x[swapped]), classes)
    assert len(relabeled) >= 5
    assert all(r.labels == {r.view.value} for r in relabeled)


def test_oof_needs_enough_patients(rng):
    with pytest.raises(DomainError):
        oof_probabilities(rng.normal(size=(6, 2)), [0, 1, 0, 1, 0, 1], ["a", "a", "b", "b", "c", "c"], 5)


# ==================== Pseudo-labels ====================

def test_pseudo_label():
    assert pseudo_label([0.95, 0.05]) == 0
    assert pseudo_label([0.6, 0.4]) is None
    assert pseudo_label([0.9, 0.1]) is None
    with pytest.raises(DomainError):
        pseudo_label([0.5, 0.6])


def test_pseudo_label_records_drops_unsure():
    rs = [record(f"u{i}", labels=()) for i in range(3)]
    probs = np.array([[0.95, 0.05], [0.5, 0.5], [0.02, 0.98]])
    kept = pseudo_label_records(rs, probs, ["brain", "heart"])
    assert [(r.image_id, set(r.labels)) for r in kept] == [("u0", {"brain"}), ("u2", {"heart"})]


def test_refine_brain_subviews():
    rs = [record("b0"), record("b1"), record("h0", labels=("heart",))]
    probs = np.array([[0.05, 0.93, 0.02], [0.4, 0.3, 0.3], [0.99, 0.005, 0.005]])
    subviews = ["transcerebellum", "transthalamic", "transventricular"]
    out = refine_brain_subviews(rs, probs, subviews)
    assert out[0].labels == {"brain", "transthalamic"}
    assert out[1].labels == {"brain"}
    assert out[2].labels == {"heart"}


# ==================== Shards ====================

def captioned(records, templates):
    return [(r, build_caption_set(r, templates)) for r in records]


def test_build_shards_unique_ids(templates):
    items = captioned([record(f"i{i}") for i in range(100)], templates)
    shards = build_shards(items, {"standard_view": 1}, shard_size=10)
    assert len(shards) == 10
    for shard in shards:
        assert len({e.image_id for e in shard}) == len(shard)
    assert sum(len(s) for s in shards) == 100


def test_textbook_record_once_per_shard(templates):
    book = record("t0", labels=(), subgroup=Subgroup.TEXTBOOK, caption="A fetal spine figure")
    items = captioned([book] + [record(f"i{i}") for i in range(20)], templates)
    shards = build_shards(items, {"textbook": 10, "standard_view": 1}, shard_size=3, n_shards=10)
    assert all(sum(e.image_id == "t0" for e in shard) == 1 for shard in shards)
    captions = {e.caption for shard in shards for e in shard if e.image_id == "t0"}
    assert len(captions) == 5


def test_dedup_impossible(templates):
    book = record("t0", labels=(), subgroup=Subgroup.TEXTBOOK, caption="A fetal spine figure")
    with pytest.raises(DedupError):
        build_shards(captioned([book], templates), {"textbook": 10}, shard_size=2, n_shards=5)


def test_shards_and_manifest_on_disk(tmp_path, templates):
    rs = [record(f"i{i}", ga_days=150, pixel_spacing_mm=0.3) for i in range(7)]
    shards = build_shards(captioned(rs, templates), {"standard_view": 1}, shard_size=3)
    write_shards(str(tmp_path / "shards"), shards)
    assert read_shards(str(tmp_path / "shards")) == shards
    write_manifest(str(tmp_path / "m.jsonl"), rs)
    assert read_manifest(str(tmp_path / "m.jsonl")) == rs

import asyncio
import json
from datetime import datetime, timezone

import numpy as np
import pytest

from src.config import PreprocessConfig
from src.handlers import build_parser, run
from src.handlers.commands import _cached_embeddings, _image_embeddings, _write_embedding_cache
from src.models import ImageRecord, ProbeRun
from src.services.curation import read_manifest
from src.services.database import RunStore
from src.services.probes import parameter_fingerprint

from conftest import TINY_MODEL


def test_unknown_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        run(["phantom", "--bogus", "--out-dir", str(tmp_path)])
    assert info.value.code == 2
    assert list(tmp_path.iterdir()) == []


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["train"])
    assert info.value.code == 2


def test_invalid_config_exits_1(tmp_path):
    assert run(["phantom", "--set", "phantom.n_patients=0", "--out-dir", str(tmp_path)]) == 1
    assert run(["phantom", "--jobs", "0", "--out-dir", str(tmp_path)]) == 1


def test_phantom_manifest(tmp_path):
    code = run([
        "phantom", "--n-patients", "10",
        "--set", "phantom.images_per_patient=2",
        "--set", "phantom.height=64", "--set", "phantom.width=72",
        "--out-dir", str(tmp_path),
    ])
    assert code == 0
    records = read_manifest(str(tmp_path / "manifest.jsonl"))
    assert len({r.patient_id for r in records}) == 10
    assert all((tmp_path / r.image_path).exists() for r in records)
    manifest = json.loads((tmp_path / "artifacts-phantom.json").read_text())
    assert manifest["subcommand"] == "phantom"
    assert {a["path"] for a in manifest["artifacts"]} >= {"manifest.jsonl"}
    assert all(len(a["sha256"]) == 64 for a in manifest["artifacts"])


def test_report_without_runs_exits_1(tmp_path):
    assert run(["report", "--out-dir", str(tmp_path), "--runs-db", str(tmp_path / "runs.db")]) == 1


def test_report_exports_stored_runs(tmp_path):
    db = str(tmp_path / "runs.db")
    ts = datetime(2024, 1, 1, tzinfo=timezone.utc)
    store = RunStore(db)
    asyncio.run(store.init())
    asyncio.run(store.insert_runs([
        ProbeRun("view", "fetal", f, s, "macro_f1", 0.8 + f / 100, ts) for f in range(5) for s in range(2)
    ]))

    out = tmp_path / "out"
    assert run(["report", "--out-dir", str(out), "--runs-db", db]) == 0
    assert len((out / "report" / "runs.jsonl").read_text().splitlines()) == 10
    assert (out / "report" / "summary.csv").exists()
    manifest = json.loads((out / "artifacts-report.json").read_text())
    assert "report/runs.jsonl" in {a["path"] for a in manifest["artifacts"]}


def test_embedding_cache_reused_only_for_same_weights(tmp_path, tiny_model, rng):
    records = [ImageRecord(f"i{k}", f"p{k}", f"images/i{k}.png", frozenset({"brain"})) for k in range(3)]
    embs = rng.normal(size=(3, 16)).astype(np.float32)
    fingerprint = parameter_fingerprint(tiny_model)
    _write_embedding_cache(tmp_path, records, embs, fingerprint)

    # the images do not exist, so a hit must come from the cache
    prep = PreprocessConfig(image_size=TINY_MODEL.image_size)
    cached = _image_embeddings(tiny_model, tmp_path / "missing", tmp_path, records[::-1], prep)
    np.testing.assert_array_equal(cached, embs[::-1])
    assert _cached_embeddings(tmp_path, records, "other-weights") is None
    assert _cached_embeddings(tmp_path, records + [ImageRecord("x", "p9", "x.png", frozenset({"brain"}))],
                              fingerprint) is None

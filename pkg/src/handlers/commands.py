"""
Command-line handlers.
One function per subcommand; `run` parses arguments, loads the experiment
config and dispatches through the handler table.
"""

import argparse
import asyncio
import logging
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from tqdm import tqdm

from ..config import ExperimentConfig, PreprocessConfig, config, load_experiment, with_seed
from ..constants import (
    CombineMode, ProjectionMethod, Split, Subcommand, Subgroup, ViewClass, SEG_STRUCTURES, SUBVIEWS,
)
from ..errors import ConfigError, ContractError, DomainError, FetalError
from ..models import ImageRecord, ProbeRun, VideoRecord
from ..services import (
    RunStore, GAEstimator, GAPromptGenerator, Lexicon, ProbeData, PromptBank, SegDataset, TemplateBank, Vocab,
    ZeroShotEvalSet, DualEncoder, auroc, brain_subview_report, build_caption_set, build_seg_decoder, build_shards,
    checkpoint_scorer, chd_probe_trainer, class_embeddings, clip_dataset, confident_flags, cv_harness,
    decoder_config_for, embed_images, evaluate_ga, evaluate_views, export_saliency, fit_linear_probe, freeze,
    gen_dataset, gen_video, gen_video_dataset, load_checkpoint, load_frame, load_quantile_models,
    oof_probabilities, parameter_fingerprint, preprocess_frame, process_directory, project_embeddings,
    pseudo_label_records, read_embeddings, read_json, read_jsonl, read_manifest, read_mask, read_png, read_shards,
    read_video, refine_brain_subviews, roc_plot, roc_points, route_subgroup, saliency_ratio, scorecam,
    select_checkpoint, silhouette, support_set_harness, text_encode_fn, train, train_bpe, train_seg,
    video_frame_embeddings, video_scores, view_probe_trainer, write_artifact_manifest, write_embeddings,
    write_json, write_jsonl, write_manifest, write_mask, write_png, write_projection, write_report, write_shards,
    write_video,
)

logger = logging.getLogger(__name__)

Result = Tuple[Path, List[Path]]

SELECTED_CHECKPOINT = "selected_checkpoint.json"
SELECTION_MAX_IMAGES = 500
EMBEDDING_MATRIX = Path("embeddings") / "images.femb"
EMBEDDING_INDEX = Path("embeddings") / "images.jsonl"


# ==================== Shared helpers ====================

def _data_root(args) -> Path:
    return Path(args.data_root or config.DATA_ROOT)


def _out_dir(args) -> Path:
    out = Path(args.out_dir or config.OUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_preprocess(exp: ExperimentConfig) -> PreprocessConfig:
    return replace(exp.preprocess, image_size=exp.model.image_size)


def _view_records(records: Sequence[ImageRecord], classes: Sequence[str], split: Optional[Split] = None) -> List[ImageRecord]:
    keep = set(classes)
    return [
        r for r in records
        if r.view is not None and r.view.value in keep and (split is None or r.split == split)
    ]


def _load_images(root: Path, records: Sequence[ImageRecord], prep: PreprocessConfig) -> np.ndarray:
    if not records:
        return np.zeros((0, prep.image_size, prep.image_size), np.float32)
    return np.stack([load_frame(root / r.image_path, prep) for r in tqdm(records, desc="Loading", leave=False)])


def _write_embedding_cache(out: Path, records: Sequence[ImageRecord], embs: np.ndarray, fingerprint: str) -> List[Path]:
    return [
        write_embeddings(out / EMBEDDING_MATRIX, embs),
        write_jsonl(out / EMBEDDING_INDEX, ({"image_id": r.image_id, "fingerprint": fingerprint} for r in records)),
    ]


def _cached_embeddings(out: Path, records: Sequence[ImageRecord], fingerprint: str) -> Optional[np.ndarray]:
    """Rows of the embedding cache for records, or None unless the same weights
    wrote every one of them."""
    matrix_path, index_path = out / EMBEDDING_MATRIX, out / EMBEDDING_INDEX
    if not (records and matrix_path.exists() and index_path.exists()):
        return None
    rows = {row["image_id"]: i for i, row in enumerate(read_jsonl(index_path)) if row.get("fingerprint") == fingerprint}
    if any(r.image_id not in rows for r in records):
        return None
    matrix = read_embeddings(matrix_path)
    logger.info(f"Reusing {len(records)} cached embeddings from {matrix_path}")
    return matrix[[rows[r.image_id] for r in records]]


def _image_embeddings(model: DualEncoder, root: Path, out: Path, records: Sequence[ImageRecord],
                      prep: PreprocessConfig, images: Optional[np.ndarray] = None) -> np.ndarray:
    cached = _cached_embeddings(out, records, parameter_fingerprint(model))
    if cached is not None:
        return cached
    return embed_images(model, images if images is not None else _load_images(root, records, prep))


def _load_model(args, out: Path) -> Tuple[DualEncoder, Vocab]:
    path = args.checkpoint
    if not path:
        selected = out / SELECTED_CHECKPOINT
        if not selected.exists():
            raise DomainError(f"no checkpoint given and {selected} missing; run pretrain first")
        path = read_json(selected)["path"]
    if not Path(path).exists():
        raise DomainError(f"checkpoint {path} not found")
    model, meta = load_checkpoint(path)
    logger.info(f"Loaded checkpoint {path} (epoch {meta.get('epoch')})")
    return freeze(model), Vocab.load(str(out / "vocab.txt"))


def _prompt_bank(exp: ExperimentConfig) -> PromptBank:
    zs = exp.zeroshot
    return PromptBank.load(zs.prompt_path, zs.prompt_style).subset(zs.classes)


async def _store_runs(db_path: str, runs: Sequence[ProbeRun]) -> int:
    store = RunStore(db_path)
    await store.init()
    return await store.insert_runs(runs)


async def _load_runs(db_path: str, export_path: Path) -> Tuple[List[ProbeRun], List[dict]]:
    """Stored runs plus their per-group summary; the runs are exported to export_path."""
    store = RunStore(db_path)
    await store.init()
    runs = await store.find()
    if runs:
        await store.export_jsonl(str(export_path))
    return runs, await store.summary()


# ==================== phantom ====================

def cmd_phantom(args, exp: ExperimentConfig) -> Result:
    """Render the phantom manifest, images, masks and (optionally) heart videos."""
    cfg = exp.phantom
    if args.n_patients is not None:
        cfg = replace(cfg, n_patients=args.n_patients)
        problems = cfg.validate()
        if problems:
            raise ConfigError([f"phantom.{p}" for p in problems])
    out = Path(args.out_dir) if args.out_dir else _data_root(args)
    dataset = gen_dataset(
        cfg.n_patients, cfg.images_per_patient, cfg.class_mix, cfg.seed,
        pixel_spacing_mm=cfg.pixel_spacing_mm,
        annotation_rate=cfg.annotation_rate,
        subview_label_rate=cfg.subview_label_rate,
        test_fraction=cfg.test_fraction,
        height=cfg.height,
        width=cfg.width,
    )
    paths: List[Path] = []
    for record in tqdm(dataset.records, desc="Rendering"):
        image = dataset.render(record.image_id)
        pixels = image.rgb if image.spec.annotation_text else image.pixels
        paths.append(write_png(out / record.image_path, pixels))
        for name, rel in record.mask_paths.items():
            paths.append(write_mask(out / rel, image.structures[name]))
    paths.append(write_manifest(str(out / "manifest.jsonl"), dataset.records))

    if cfg.n_videos:
        videos = gen_video_dataset(cfg.n_videos, cfg.chd_rate, cfg.seed, cfg.pixel_spacing_mm, cfg.test_fraction)
        for record, spec in tqdm(videos, desc="Videos"):
            frames = gen_video(spec, record.n_frames, record.chd, cfg.height, cfg.width)
            paths.append(write_video(out / record.video_path, frames))
        paths.append(write_jsonl(out / "videos.jsonl", (r.to_dict() for r, _ in videos)))
    return out, paths


# ==================== preprocess ====================

def cmd_preprocess(args, exp: ExperimentConfig) -> Result:
    out = _out_dir(args)
    in_dir = Path(args.input) if args.input else _data_root(args) / "images"
    report = process_directory(str(in_dir), str(out / "preprocessed"), exp.preprocess)
    paths = [out / "preprocessed" / rel for rel, r in report.items() if r["status"] == "ok"]
    paths.append(write_json(out / "preprocess_report.json", report))
    return out, paths


# ==================== curate ====================

def _view_label(record: ImageRecord, classes: Sequence[str]) -> Optional[str]:
    hits = [c for c in classes if c in record.labels]
    return hits[0] if len(hits) == 1 else None


def cmd_curate(args, exp: ExperimentConfig) -> Result:
    """Route, filter and pseudo-label train records, caption them, train the
    tokenizer and write dedup shards."""
    cur = exp.curation
    root, out = _data_root(args), _out_dir(args)
    lexicon = Lexicon.load(cur.lexicon_path)
    templates = TemplateBank.load(cur.template_path)
    records = [replace(r, subgroup=route_subgroup(r, lexicon)) for r in read_manifest(str(root / "manifest.jsonl"))]
    train_records = [r for r in records if r.split == Split.TRAIN]
    feature_prep = replace(exp.preprocess, image_size=cur.feature_size)

    def features(rs: Sequence[ImageRecord]) -> np.ndarray:
        return _load_images(root, rs, feature_prep).reshape(len(rs), -1)

    # confident learning over the standard-view subgroup
    classes = sorted({v for r in train_records for v in r.labels if v in lexicon.standard_views})
    labeled = [r for r in train_records if r.subgroup == Subgroup.STANDARD_VIEW and _view_label(r, classes)]
    flagged_ids: List[str] = []
    x_labeled = features(labeled)
    y_labeled = np.array([classes.index(_view_label(r, classes)) for r in labeled], dtype=int)
    if len({r.patient_id for r in labeled}) >= cur.cv_folds and len(set(y_labeled.tolist())) > 1:
        oof = oof_probabilities(x_labeled, y_labeled, [r.patient_id for r in labeled], cur.cv_folds, cur.seed)
        flagged_ids = [labeled[i].image_id for i in sorted(confident_flags(oof, y_labeled))]
        logger.info(f"Confident learning flagged {len(flagged_ids)}/{len(labeled)} standard-view images")
    else:
        logger.warning("Too few patients or classes for confident learning; no records flagged")
    flagged = set(flagged_ids)

    # pseudo-labels for unlabeled images, subviews for brain-only images
    unlabeled = [r for r in train_records if r.subgroup == Subgroup.UNLABELED]
    pseudo: List[ImageRecord] = []
    refined = 0
    clean_idx = [i for i, r in enumerate(labeled) if r.image_id not in flagged]
    clf = None
    if len(set(y_labeled[clean_idx].tolist())) > 1:
        clf = LogisticRegression(max_iter=1000).fit(x_labeled[clean_idx], y_labeled[clean_idx])
    if unlabeled and clf is not None:
        probs = np.zeros((len(unlabeled), len(classes)))
        probs[:, clf.classes_] = clf.predict_proba(features(unlabeled))
        pseudo = [replace(r, subgroup=Subgroup.STANDARD_VIEW)
                  for r in pseudo_label_records(unlabeled, probs, classes, cur.pseudo_label_threshold)]

    kept = [r for r in train_records if r.subgroup != Subgroup.UNLABELED and r.image_id not in flagged] + pseudo
    subviews = SUBVIEWS[ViewClass.BRAIN.value]
    with_sub = [r for r in kept if ViewClass.BRAIN.value in r.labels and r.labels & set(subviews)]
    brain_only = [r for r in kept if r.labels == frozenset({ViewClass.BRAIN.value})]
    sub_targets = [subviews.index(next(iter(r.labels & set(subviews)))) for r in with_sub]
    if brain_only and len(set(sub_targets)) > 1:
        sub_clf = LogisticRegression(max_iter=1000).fit(features(with_sub), sub_targets)
        probs = np.zeros((len(brain_only), len(subviews)))
        probs[:, sub_clf.classes_] = sub_clf.predict_proba(features(brain_only))
        updated = {r.image_id: r for r in refine_brain_subviews(brain_only, probs, subviews, threshold=cur.pseudo_label_threshold)}
        refined = sum(1 for r in brain_only if updated[r.image_id].labels != r.labels)
        kept = [updated.get(r.image_id, r) for r in kept]
        logger.info(f"Assigned brain subviews to {refined}/{len(brain_only)} brain-only images")

    caption_sets = [build_caption_set(r, templates) for r in kept]
    bank = PromptBank.load(exp.zeroshot.prompt_path, exp.zeroshot.prompt_style)
    corpus = [c for cs in caption_sets for c in cs.captions] + [p for ps in bank.prompts.values() for p in ps]
    vocab = train_bpe(corpus, exp.tokenizer.vocab_size)
    # re-check every caption against the token budget with the trained vocab
    caption_sets = [build_caption_set(r, templates, vocab) for r in kept]

    shards = build_shards(list(zip(kept, caption_sets)), cur.upsample, cur.shard_size, cur.n_shards, cur.seed)
    paths = [
        vocab.save(str(out / "vocab.txt")),
        write_manifest(str(out / "curated.jsonl"), kept),
        write_jsonl(out / "captions.jsonl", ({"image_id": c.image_id, "captions": list(c.captions)} for c in caption_sets)),
        *write_shards(str(out / "shards"), shards),
        write_json(out / "curation_report.json", {
            "n_train_records": len(train_records),
            "flagged": flagged_ids,
            "n_pseudo_labeled": len(pseudo),
            "n_unlabeled_dropped": len(unlabeled) - len(pseudo),
            "n_subviews_assigned": refined,
            "n_records": len(kept),
            "n_shards": len(shards),
            "n_pairs": sum(len(s) for s in shards),
            "vocab_size": vocab.vocab_size,
        }),
    ]
    return out, paths


# ==================== pretrain ====================

def cmd_pretrain(args, exp: ExperimentConfig) -> Result:
    root, out = _data_root(args), _out_dir(args)
    vocab = Vocab.load(str(out / "vocab.txt"))
    shards = read_shards(str(out / "shards"))
    torch.manual_seed(exp.train.seed)
    model = DualEncoder(exp.model, eot_id=vocab.eot_id)
    checkpoints = train(shards, model, vocab, exp.train, str(root), str(out), exp.preprocess)

    # selection on train-split images; the test split stays untouched
    records = _view_records(read_manifest(str(root / "manifest.jsonl")), exp.zeroshot.classes, Split.TRAIN)
    rng = np.random.default_rng([exp.train.seed, 7])
    picked = sorted(rng.permutation(len(records))[:SELECTION_MAX_IMAGES].tolist())
    records = [records[i] for i in picked]
    eval_set = ZeroShotEvalSet(
        _load_images(root, records, _model_preprocess(exp)),
        [r.view.value for r in records],
        [r.image_id for r in records],
    )
    best, scores = select_checkpoint(checkpoints, eval_set, checkpoint_scorer(vocab, eval_set, _prompt_bank(exp)))
    selected = write_json(out / SELECTED_CHECKPOINT, {
        "epoch": best.epoch,
        "path": best.path,
        "scores": {str(c.epoch): s for c, s in zip(sorted(checkpoints, key=lambda c: c.epoch), scores)},
    })
    paths = [Path(c.path) for c in checkpoints] + [out / "train_log.jsonl", out / "checkpoints.jsonl", selected]
    return out, paths


# ==================== zeroshot ====================

def cmd_zeroshot(args, exp: ExperimentConfig) -> Result:
    """View classification, brain subviews and GA estimation on the test split."""
    root, out = _data_root(args), _out_dir(args)
    model, vocab = _load_model(args, out)
    zs = exp.zeroshot
    records = _view_records(read_manifest(str(root / "manifest.jsonl")), zs.classes, Split.TEST)
    if not records:
        raise DomainError("no test-split images for the configured classes")
    embs = _image_embeddings(model, root, out, records, _model_preprocess(exp))
    encode = text_encode_fn(model, vocab)

    views = evaluate_views(embs, [r.view.value for r in records], class_embeddings(_prompt_bank(exp), encode),
                           [r.image_id for r in records])
    logger.info(f"Zero-shot views: macro-F1 {views['macro_f1']:.4f}")
    paths = [write_json(out / "zeroshot_views.json", views)]

    brain = [i for i, r in enumerate(records) if r.view == ViewClass.BRAIN]
    if brain:
        estimator = GAEstimator(GAPromptGenerator(TemplateBank.load(exp.curation.template_path)), encode, zs.ga_top_k)
        ga = evaluate_ga(embs[brain], [records[i] for i in brain], estimator, load_quantile_models(zs.quantile_path))
        for rule, summary in ga["rules"].items():
            logger.info(f"GA rule {rule}: validity rate {summary['validity_rate']}")
        paths.append(write_json(out / "zeroshot_ga.json", ga))

    bank = PromptBank.load(zs.subview_prompt_path, zs.prompt_style)
    report = brain_subview_report(embs[brain], [records[i] for i in brain], bank, encode)
    if report is not None:
        logger.info(f"Zero-shot brain subviews: macro-F1 {report['macro_f1']:.4f}")
        paths.append(write_json(out / "zeroshot_subviews.json", report))
    return out, paths


# ==================== probe ====================

def _seg_dataset(root: Path, records: Sequence[ImageRecord], view: str, prep: PreprocessConfig) -> Optional[SegDataset]:
    structures = SEG_STRUCTURES[view]
    rs = [r for r in records if r.view is not None and r.view.value == view and set(structures) <= set(r.mask_paths)]
    if not rs:
        return None
    images, masks = [], []
    for r in rs:
        raw = {s: read_mask(root / r.mask_paths[s]) for s in structures}
        std, _, std_masks = preprocess_frame(read_png(root / r.image_path, color=True), prep, raw)
        images.append(std)
        masks.append(np.stack([std_masks[s] for s in structures]))
    return SegDataset(np.stack(images), np.stack(masks), list(structures))


def cmd_probe(args, exp: ExperimentConfig) -> Result:
    """Linear view probe (CV and support sets), CHD clip probe and
    segmentation decoders, all on the frozen encoder."""
    root, out = _data_root(args), _out_dir(args)
    model, _ = _load_model(args, out)
    fingerprint = parameter_fingerprint(model)
    prep = _model_preprocess(exp)
    name = exp.name
    manifest = read_manifest(str(root / "manifest.jsonl"))
    records = _view_records(manifest, exp.zeroshot.classes)
    embs = _image_embeddings(model, root, out, records, prep)
    paths = _write_embedding_cache(out, records, embs, fingerprint)

    labels = [r.view.value for r in records]
    data = ProbeData(labels, [r.patient_id for r in records], np.array([r.split == Split.TEST for r in records]))
    trainer = view_probe_trainer(embs, labels, sorted(set(labels)), exp.probe.view)
    runs = cv_harness(data, "view", trainer, exp.harness, name, "macro_f1")
    for n in exp.probe.support_sizes:
        try:
            runs += support_set_harness(data, n, "view", trainer, exp.harness, name, "macro_f1")
        except DomainError as e:
            logger.warning(f"Support set N={n} skipped: {e}")

    videos_path = root / "videos.jsonl"
    if videos_path.exists():
        videos = [VideoRecord.from_row(r) for r in read_jsonl(videos_path)]
        frame_embs = [video_frame_embeddings(model, read_video(root / v.video_path), prep)
                      for v in tqdm(videos, desc="Video frames")]
        mode = CombineMode(exp.probe.chd_combine)
        chd = np.array([int(v.chd) for v in videos])
        test = np.array([v.split == Split.TEST for v in videos])
        vdata = ProbeData(chd.tolist(), [v.patient_id for v in videos], test)
        runs += cv_harness(vdata, "chd", chd_probe_trainer(frame_embs, chd, mode, exp.probe.chd), exp.harness, name, "auroc")

        # ROC of one head fit on every train video
        train_idx, test_idx = np.flatnonzero(~test), np.flatnonzero(test)
        x, y, _ = clip_dataset([frame_embs[i] for i in train_idx], chd[train_idx], mode)
        head = fit_linear_probe(x, y.tolist(), exp.probe.chd, classes=[0, 1], binary=True, seed=exp.harness.master_seed)
        scores = video_scores(head, [frame_embs[i] for i in test_idx], mode)
        paths.append(write_jsonl(out / "chd_test_scores.jsonl", (
            {"video_id": videos[i].video_id, "label": int(chd[i]), "score": float(s)} for i, s in zip(test_idx, scores)
        )))

    seg_reports: Dict[str, Dict[str, float]] = {}
    for view in exp.probe.seg_views:
        train_set = _seg_dataset(root, [r for r in manifest if r.split == Split.TRAIN], view, prep)
        test_set = _seg_dataset(root, [r for r in manifest if r.split == Split.TEST], view, prep)
        if train_set is None or test_set is None:
            logger.warning(f"No {view} masks in both splits; segmentation skipped")
            continue
        decoder = build_seg_decoder(
            decoder_config_for(model, len(train_set.structures), exp.probe.seg.feature_size), model
        )
        _, seg_reports[view] = train_seg(decoder, model, train_set, exp.probe.seg, val=test_set)
    if seg_reports:
        paths.append(write_json(out / "seg_report.json", seg_reports))

    if parameter_fingerprint(model) != fingerprint:
        raise ContractError("encoder parameters changed during probing")
    paths.append(write_jsonl(out / "probe_runs.jsonl", (r.to_dict() for r in runs)))
    stored = asyncio.run(_store_runs(args.runs_db or config.RUNS_DB, runs))
    logger.info(f"Stored {stored} probe runs")
    return out, paths


# ==================== report ====================

def cmd_report(args, exp: ExperimentConfig) -> Result:
    out = _out_dir(args)
    report_dir = out / "report"
    exported = report_dir / "runs.jsonl"
    runs, groups = asyncio.run(_load_runs(args.runs_db or config.RUNS_DB, exported))
    if not runs and (out / "probe_runs.jsonl").exists():
        runs = [ProbeRun.from_row(r) for r in read_jsonl(out / "probe_runs.jsonl")]
        write_jsonl(exported, (r.to_dict() for r in runs))
    if not runs:
        raise DomainError("no probe runs recorded; run probe first")
    for g in groups:
        logger.info(f"Stored {g['task']}/{g['mode']} {g['model']}: {g['count']} runs, "
                    f"{g['metric']} in [{g['min']:.4f}, {g['max']:.4f}]")
    paths = write_report(runs, str(report_dir)) + [exported]

    scores_path = out / "chd_test_scores.jsonl"
    if scores_path.exists():
        rows = read_jsonl(scores_path)
        labels = [r["label"] for r in rows]
        scores = [r["score"] for r in rows]
        try:
            curve = roc_points(scores, labels)
            curve["auroc"] = auroc(scores, labels)
            paths.append(roc_plot({exp.name: curve}, str(report_dir / "chd_roc.png"), title="CHD detection"))
        except DomainError as e:
            logger.warning(f"ROC plot skipped: {e}")
    return out, paths


# ==================== interpret ====================

def cmd_interpret(args, exp: ExperimentConfig) -> Result:
    """ScoreCAM maps for a few test images per class and a 2-D projection
    of the test embeddings."""
    root, out = _data_root(args), _out_dir(args)
    model, vocab = _load_model(args, out)
    cfg = exp.interpret
    prep = _model_preprocess(exp)
    records = _view_records(read_manifest(str(root / "manifest.jsonl")), exp.zeroshot.classes, Split.TEST)
    if len(records) < 3:
        raise DomainError("interpret needs at least 3 test images")
    images = _load_images(root, records, prep)
    embs = _image_embeddings(model, root, out, records, prep, images)
    labels = [r.view.value for r in records]
    target = out / "interpret"

    coords = project_embeddings(embs, ProjectionMethod(cfg.method), exp.seed, cfg.n_neighbors)
    paths = [write_projection(str(target / "projection.tsv"), coords, [r.image_id for r in records], labels)]
    score = silhouette(coords, labels) if len(set(labels)) > 1 else None

    class_embs = class_embeddings(_prompt_bank(exp), text_encode_fn(model, vocab))
    saliency = []
    for view in sorted(set(labels)):
        for i in [i for i, v in enumerate(labels) if v == view][: cfg.n_images]:
            record = records[i]
            cam = scorecam(images[i], class_embs[view], model, cfg.tap_layer, cfg.max_channels)
            paths += export_saliency(str(target), record.image_id, images[i], cam)
            row = {"image_id": record.image_id, "view": view}
            if record.mask_paths:
                raw = {s: read_mask(root / p) for s, p in record.mask_paths.items()}
                _, _, masks = preprocess_frame(read_png(root / record.image_path, color=True), prep, raw)
                inside = np.any(np.stack(list(masks.values())), axis=0)
                try:
                    row["saliency_ratio"] = saliency_ratio(cam, inside, images[i] > 0)
                except DomainError:
                    pass
            saliency.append(row)

    paths.append(write_json(target / "interpret_report.json", {
        "method": cfg.method,
        "silhouette": score,
        "saliency": saliency,
    }))
    logger.info(f"Projection ({cfg.method}) silhouette: {score}")
    return out, paths


# ==================== Entry ====================

HANDLERS: Dict[Subcommand, Callable[[argparse.Namespace, ExperimentConfig], Result]] = {
    Subcommand.PHANTOM: cmd_phantom,
    Subcommand.PREPROCESS: cmd_preprocess,
    Subcommand.CURATE: cmd_curate,
    Subcommand.PRETRAIN: cmd_pretrain,
    Subcommand.ZEROSHOT: cmd_zeroshot,
    Subcommand.PROBE: cmd_probe,
    Subcommand.REPORT: cmd_report,
    Subcommand.INTERPRET: cmd_interpret,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--seed", type=int, help="master seed for every seeded section")
    common.add_argument("--out-dir", help="artifact directory (default: FETAL_OUT_DIR)")
    common.add_argument("--data-root", help="phantom/manifest directory (default: FETAL_DATA_ROOT)")
    common.add_argument("--jobs", type=int, help="parallel probe runs and loader threads")
    common.add_argument("--runs-db", help="SQLite probe-run store (default: FETAL_RUNS_DB)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.epochs=3 (repeatable)")

    parser = argparse.ArgumentParser(prog="fetal", description="Fetal ultrasound vision-language toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    helps = {
        Subcommand.PHANTOM: "generate the synthetic phantom dataset",
        Subcommand.PREPROCESS: "standardize a directory of frames",
        Subcommand.CURATE: "caption, filter and shard pretraining pairs",
        Subcommand.PRETRAIN: "contrastive pretraining with checkpoint selection",
        Subcommand.ZEROSHOT: "zero-shot view classification and GA estimation",
        Subcommand.PROBE: "linear, CHD and segmentation probes on the frozen encoder",
        Subcommand.REPORT: "summary tables, plots and Wilcoxon tests",
        Subcommand.INTERPRET: "ScoreCAM maps and embedding projections",
    }
    parsers = {cmd: sub.add_parser(cmd.value, parents=[common], help=text) for cmd, text in helps.items()}
    parsers[Subcommand.PHANTOM].add_argument("--n-patients", type=int, help="override phantom.n_patients")
    parsers[Subcommand.PREPROCESS].add_argument("--input", help="input directory (default: <data-root>/images)")
    for cmd in (Subcommand.ZEROSHOT, Subcommand.PROBE, Subcommand.INTERPRET):
        parsers[cmd].add_argument("--checkpoint", help="checkpoint file (default: the selected one)")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Exit codes: 0 success, 1 configuration or domain failure, 2 usage
    (raised by argparse before anything is written)."""
    args = build_parser().parse_args(argv)
    command = Subcommand(args.command)

    try:
        exp = load_experiment(args.config, args.overrides)
        if args.seed is not None:
            exp = with_seed(exp, args.seed)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs: must be >= 1")
            exp = replace(exp, harness=replace(exp.harness, jobs=args.jobs),
                          train=replace(exp.train, num_workers=args.jobs))
    except ConfigError as e:
        logger.error(f"Invalid configuration:\n{e}")
        return 1

    logger.info(f"🚀 Running {command.value} ({exp.name}, seed {exp.seed})")
    try:
        out, paths = HANDLERS[command](args, exp)
    except ConfigError as e:
        logger.error(f"Invalid configuration:\n{e}")
        return 1
    except FetalError as e:
        logger.error(f"{command.value} failed: {e}")
        return 1

    write_artifact_manifest(out, command.value, paths)
    logger.info(f"✅ {command.value} finished: {len(paths)} artifacts under {out}")
    return 0

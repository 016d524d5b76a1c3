"""Services package."""

from .database import RunStore
from .storage import (
    read_json, read_jsonl, read_mask, read_png, read_video, read_embeddings, write_artifact_manifest,
    write_embeddings, write_json, write_jsonl, write_mask, write_png, write_video,
)
from .phantom import gen_dataset, gen_image, gen_video, gen_video_dataset, PhantomDataset
from .preprocess import augment, load_frame, preprocess_frame, process_directory, standardize
from .tokenizer import Vocab, decode, encode, encode_batch, token_count, tokenize, train_bpe
from .curation import (
    Lexicon, TemplateBank, build_caption_set, build_shards, confident_flags, oof_probabilities,
    pseudo_label, pseudo_label_records, read_manifest, read_shards, refine_brain_subviews, route_subgroup,
    write_manifest, write_shards,
)
from .encoders import (
    DualEncoder, embed_images, embed_texts, freeze, import_weights, load_checkpoint, save_checkpoint, similarity,
)
from .pretrain import checkpoint_scorer, clip_loss, select_checkpoint, train, Pretrainer
from .growth import load_quantile_models, median_hc_mm
from .zeroshot import (
    GAEstimator, GAPromptGenerator, PromptBank, ZeroShotEvalSet, brain_subview_report, check_validity,
    class_embeddings, classify, estimate_ga, evaluate_ga, evaluate_views, text_encode_fn,
)
from .metrics import auroc, dsc, macro_f1, wilcoxon_signed_rank
from .probes import (
    clip_dataset, clip_features, fit_linear_probe, parameter_fingerprint, sample_clips, video_frame_embeddings,
    video_scores,
)
from .segmentation import SegDataset, build_seg_decoder, decoder_config_for, train_seg
from .harness import ProbeData, chd_probe_trainer, cv_harness, support_set_harness, view_probe_trainer
from .reporting import roc_plot, roc_points, summary_table, write_report
from .interpret import export_saliency, project_embeddings, saliency_ratio, scorecam, silhouette, write_projection

__all__ = [
    "RunStore",
    "read_json", "read_jsonl", "read_mask", "read_png", "read_video", "read_embeddings", "write_artifact_manifest",
    "write_embeddings", "write_json", "write_jsonl", "write_mask", "write_png", "write_video",
    "gen_dataset", "gen_image", "gen_video", "gen_video_dataset", "PhantomDataset",
    "augment", "load_frame", "preprocess_frame", "process_directory", "standardize",
    "Vocab", "decode", "encode", "encode_batch", "token_count", "tokenize", "train_bpe",
    "Lexicon", "TemplateBank", "build_caption_set", "build_shards", "confident_flags", "oof_probabilities",
    "pseudo_label", "pseudo_label_records", "read_manifest", "read_shards", "refine_brain_subviews",
    "route_subgroup", "write_manifest", "write_shards",
    "DualEncoder", "embed_images", "embed_texts", "freeze", "import_weights", "load_checkpoint",
    "save_checkpoint", "similarity",
    "checkpoint_scorer", "clip_loss", "select_checkpoint", "train", "Pretrainer",
    "load_quantile_models", "median_hc_mm",
    "GAEstimator", "GAPromptGenerator", "PromptBank", "ZeroShotEvalSet", "brain_subview_report", "check_validity",
    "class_embeddings",
    "classify", "estimate_ga", "evaluate_ga", "evaluate_views", "text_encode_fn",
    "auroc", "dsc", "macro_f1", "wilcoxon_signed_rank",
    "clip_dataset", "clip_features", "fit_linear_probe", "parameter_fingerprint", "sample_clips",
    "video_frame_embeddings", "video_scores",
    "SegDataset", "build_seg_decoder", "decoder_config_for", "train_seg",
    "ProbeData", "chd_probe_trainer", "cv_harness", "support_set_harness", "view_probe_trainer",
    "roc_plot", "roc_points", "summary_table", "write_report",
    "export_saliency", "project_embeddings", "saliency_ratio", "scorecam", "silhouette", "write_projection",
]

"""
Evaluation harnesses.
Patient-wise train/test split, stratified K-fold x seeds, data-efficient
support sets and the task trainers that plug into them.
"""

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from sklearn.model_selection import KFold, StratifiedKFold, train_test_split

from ..config import HarnessConfig, LinearProbeConfig
from ..constants import CombineMode
from ..errors import DomainError, LeakageError
from ..models import ProbeRun, run_timestamp
from .metrics import auroc, macro_f1
from .probes import clip_dataset, fit_linear_probe, video_scores

logger = logging.getLogger(__name__)

# (fit indices, validation indices, test indices, run seed) -> metric value
TaskTrainer = Callable[[np.ndarray, np.ndarray, np.ndarray, int], float]


@dataclass
class ProbeData:
    """Items (images or videos) with their labels and owning patients.
    test_mask fixes the held-out split when the manifest already has one."""
    labels: List
    patient_ids: List[str]
    test_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.labels) != len(self.patient_ids):
            raise DomainError(f"{len(self.labels)} labels for {len(self.patient_ids)} patient ids")
        if any(not p for p in self.patient_ids):
            raise DomainError("every item needs a patient id")

    def __len__(self) -> int:
        return len(self.labels)


def run_seed(master_seed: int, fold: int, seed_index: int) -> int:
    return int(np.random.SeedSequence([master_seed, fold, seed_index]).generate_state(1)[0])


# ==================== Splits ====================

def patient_majority(labels: Sequence, patient_ids: Sequence[str]) -> Dict[str, str]:
    """Each patient's most frequent label (ties: smallest label)."""
    per: Dict[str, Counter] = {}
    for label, patient in zip(labels, patient_ids):
        per.setdefault(patient, Counter())[str(label)] += 1
    return {p: min(c, key=lambda k: (-c[k], k)) for p, c in per.items()}


def _stratify_key(patients: Sequence[str], majority: Dict[str, str], n_splits: int) -> Optional[List[str]]:
    keys = [majority[p] for p in patients]
    counts = Counter(keys)
    if min(counts.values()) < n_splits:
        logger.warning(f"Stratification impossible (smallest class has {min(counts.values())} patients); splitting unstratified")
        return None
    return keys


def assert_disjoint(a: Set[str], b: Set[str], what: str) -> None:
    shared = set(a) & set(b)
    if shared:
        raise LeakageError(f"{len(shared)} patient(s) in both {what}: {', '.join(sorted(shared)[:5])}")


def patient_split(data: ProbeData, test_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """(train patients, test patients), stratified on the majority label."""
    if data.test_mask is not None:
        test = sorted({p for p, t in zip(data.patient_ids, data.test_mask) if t})
        train = sorted({p for p, t in zip(data.patient_ids, data.test_mask) if not t})
        assert_disjoint(set(train), set(test), "train and test")
        return train, test
    majority = patient_majority(data.labels, data.patient_ids)
    patients = sorted(majority)
    stratify = _stratify_key(patients, majority, 2)
    train, test = train_test_split(patients, test_size=test_fraction, random_state=seed, stratify=stratify)
    return sorted(train), sorted(test)


def cv_folds(patients: Sequence[str], majority: Dict[str, str], n_folds: int, seed: int) -> List[Tuple[List[str], List[str]]]:
    """Patient-level (fit, validation) pairs; fold sizes differ by at most one."""
    patients = sorted(patients)
    if len(patients) < n_folds:
        raise DomainError(f"{len(patients)} training patients cannot fill {n_folds} folds")
    keys = _stratify_key(patients, majority, n_folds)
    if keys is not None:
        splits = StratifiedKFold(n_folds, shuffle=True, random_state=seed).split(patients, keys)
    else:
        splits = KFold(n_folds, shuffle=True, random_state=seed).split(patients)
    return [([patients[i] for i in fit], [patients[i] for i in val]) for fit, val in splits]


def _indices(patient_ids: np.ndarray, patients: Sequence[str]) -> np.ndarray:
    return np.flatnonzero(np.isin(patient_ids, list(patients)))


# ==================== Harnesses ====================

def _run_jobs(jobs: List[Tuple], fn, n_workers: int) -> List:
    if n_workers <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(n_workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def cv_harness(
    data: ProbeData,
    task: str,
    trainer: TaskTrainer,
    config: Optional[HarnessConfig] = None,
    model: str = "fetal",
    metric: str = "macro_f1",
) -> List[ProbeRun]:
    """n_folds x n_seeds runs; the test split is touched only for the final
    metric of each run."""
    config = config or HarnessConfig()
    pids = np.asarray(data.patient_ids)
    train_patients, test_patients = patient_split(data, config.test_fraction, config.master_seed)
    assert_disjoint(set(train_patients), set(test_patients), "train and test")
    majority = patient_majority(data.labels, data.patient_ids)
    folds = cv_folds(train_patients, majority, config.n_folds, config.master_seed)
    test_idx = _indices(pids, test_patients)

    def one(fold: int, seed_index: int) -> ProbeRun:
        fit_p, val_p = folds[fold]
        assert_disjoint(set(fit_p), set(val_p), "fit and validation")
        assert_disjoint(set(fit_p) | set(val_p), set(test_patients), "train and test")
        value = trainer(_indices(pids, fit_p), _indices(pids, val_p), test_idx,
                        run_seed(config.master_seed, fold, seed_index))
        return ProbeRun(task, model, fold, seed_index, metric, float(value), run_timestamp(), "cv")

    jobs = [(f, s) for f in range(config.n_folds) for s in range(config.n_seeds)]
    runs = _run_jobs(jobs, one, config.jobs)
    logger.info(f"{task}/{model}: {len(runs)} CV runs, mean {metric} {np.mean([r.value for r in runs]):.4f}")
    return runs


def support_set_harness(
    data: ProbeData,
    n_patients: int,
    task: str,
    trainer: TaskTrainer,
    config: Optional[HarnessConfig] = None,
    model: str = "fetal",
    metric: str = "macro_f1",
    n_sets: int = 5,
) -> List[ProbeRun]:
    """n_sets random support sets of N fit + N validation patients, each
    trained with n_seeds seeds and scored on the fixed test split."""
    config = config or HarnessConfig()
    pids = np.asarray(data.patient_ids)
    train_patients, test_patients = patient_split(data, config.test_fraction, config.master_seed)
    if len(train_patients) < 2 * n_patients:
        raise DomainError(f"support sets of N={n_patients} need {2 * n_patients} patients, only {len(train_patients)} available")
    test_idx = _indices(pids, test_patients)

    supports = []
    for s in range(n_sets):
        rng = np.random.default_rng([config.master_seed, n_patients, s])
        chosen = [train_patients[i] for i in rng.permutation(len(train_patients))[: 2 * n_patients]]
        supports.append((chosen[:n_patients], chosen[n_patients:]))

    def one(set_index: int, seed_index: int) -> ProbeRun:
        fit_p, val_p = supports[set_index]
        assert_disjoint(set(fit_p), set(val_p), "fit and validation")
        assert_disjoint(set(fit_p) | set(val_p), set(test_patients), "train and test")
        value = trainer(_indices(pids, fit_p), _indices(pids, val_p), test_idx,
                        run_seed(config.master_seed, set_index, seed_index))
        return ProbeRun(task, model, set_index, seed_index, metric, float(value), run_timestamp(), f"support-{n_patients}")

    jobs = [(s, k) for s in range(n_sets) for k in range(config.n_seeds)]
    runs = _run_jobs(jobs, one, config.jobs)
    logger.info(f"{task}/{model} N={n_patients}: median {metric} {np.median([r.value for r in runs]):.4f}")
    return runs


# ==================== Task trainers ====================

def view_probe_trainer(features: np.ndarray, labels: Sequence[str], classes: Sequence[str],
                       probe: Optional[LinearProbeConfig] = None) -> TaskTrainer:
    """Linear view probe scored by test macro-F1."""
    labels = np.asarray(labels)
    classes = list(classes)

    def trainer(fit_idx, val_idx, test_idx, seed) -> float:
        head = fit_linear_probe(features[fit_idx], labels[fit_idx].tolist(), probe,
                                features[val_idx], labels[val_idx].tolist(), classes=classes, seed=seed)
        return macro_f1(head.predict(features[test_idx]), labels[test_idx].tolist(), classes)
    return trainer


def chd_probe_trainer(videos: Sequence[np.ndarray], labels: Sequence[int],
                      mode: CombineMode = CombineMode.CONCATENATE,
                      probe: Optional[LinearProbeConfig] = None) -> TaskTrainer:
    """Clip-level CHD probe scored by video-level test AUROC. Each item is
    one video's T x d frame embeddings."""
    labels = np.asarray(labels, dtype=int)

    def trainer(fit_idx, val_idx, test_idx, seed) -> float:
        x, y, _ = clip_dataset([videos[i] for i in fit_idx], labels[fit_idx], mode)
        xv, yv, _ = clip_dataset([videos[i] for i in val_idx], labels[val_idx], mode) if len(val_idx) else (None, None, None)
        head = fit_linear_probe(x, y.tolist(), probe, xv, None if yv is None else yv.tolist(),
                                classes=[0, 1], binary=True, seed=seed)
        return auroc(video_scores(head, [videos[i] for i in test_idx], mode), labels[test_idx])
    return trainer

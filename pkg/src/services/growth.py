"""
HC growth curves: quantile coefficient file loading and validation.
"""

import logging
from pathlib import Path
from typing import Dict

import numpy as np

from ..constants import GA_MIN_DAYS, GA_MAX_DAYS, P_LOW, P_MEDIAN, P_HIGH
from ..errors import DomainError
from ..models import QuantileModel

logger = logging.getLogger(__name__)

REQUIRED_PROVENANCE = ("source", "version")
DOMAIN_DAYS = np.arange(GA_MIN_DAYS, GA_MAX_DAYS + 1)


def validate_quantile_models(models: Dict[float, QuantileModel]) -> None:
    """Each curve strictly increasing on the GA domain; bands ordered pointwise."""
    for p, model in models.items():
        values = model(DOMAIN_DAYS)
        if np.any(np.diff(values) <= 0):
            raise DomainError(f"HC curve for p{p:g} is not strictly increasing on [{GA_MIN_DAYS}, {GA_MAX_DAYS}]")
    ordered = sorted(models)
    for lo, hi in zip(ordered, ordered[1:]):
        if np.any(models[lo](DOMAIN_DAYS) >= models[hi](DOMAIN_DAYS)):
            raise DomainError(f"HC curve p{lo:g} must lie below p{hi:g} everywhere")


def load_quantile_models(path: str) -> Dict[float, QuantileModel]:
    """Parse a coefficient file: '# key: value' provenance lines, then
    'percentile,b0,b1,b2,b3,b4' rows."""
    provenance: Dict[str, str] = {}
    models: Dict[float, QuantileModel] = {}

    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line.lstrip("#").partition(":")
            provenance[key.strip().lower()] = value.strip()
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 6:
            raise DomainError(f"{path}:{lineno}: expected 6 comma-separated values")
        try:
            percentile, *coefs = (float(p) for p in parts)
        except ValueError:
            raise DomainError(f"{path}:{lineno}: non-numeric coefficient")
        models[percentile] = QuantileModel(percentile, tuple(coefs))

    missing = [k for k in REQUIRED_PROVENANCE if not provenance.get(k)]
    if missing:
        raise DomainError(f"{path}: missing provenance metadata: {', '.join(missing)}")
    for p in (P_LOW, P_MEDIAN, P_HIGH):
        if p not in models:
            raise DomainError(f"{path}: percentile {p:g} missing")

    validate_quantile_models(models)
    logger.debug(f"Loaded HC curves from {path} ({provenance['source']}, v{provenance['version']})")
    return models


def median_hc_mm(ga_days: int, models: Dict[float, QuantileModel]) -> float:
    return float(models[P_MEDIAN](ga_days))

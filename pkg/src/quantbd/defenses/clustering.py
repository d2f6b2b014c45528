"""Training-data inspection defenses: Activation Clustering and Spectral Signatures."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from ..datamodel import DefenseId, DefenseVerdict
from ..ingestion import DatasetBundle
from .common import extract_penultimate, model_inputs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ACConfig:
    k: int = 2
    silhouette_threshold: float = 0.15
    minority_fraction_bounds: tuple[float, float] = (0.01, 0.45)

    def __post_init__(self):
        low, high = self.minority_fraction_bounds
        if not 0 < low < high < 0.5:
            raise ValueError("minority_fraction_bounds must satisfy 0 < low < high < 0.5")
        object.__setattr__(self, "minority_fraction_bounds", (float(low), float(high)))
        if self.k < 2:
            raise ValueError("k must be >= 2")


@dataclass(frozen=True)
class SSConfig:
    # None means "calibrate against a clean reference model" (see the harness)
    eigen_ratio_threshold: float | None = None
    calibration_factor: float = 3.0

    def __post_init__(self):
        if self.eigen_ratio_threshold is not None and self.eigen_ratio_threshold <= 0:
            raise ValueError("eigen_ratio_threshold must be > 0")


def _class_rows(labels: np.ndarray, num_classes: int):
    for c in range(num_classes):
        yield c, np.flatnonzero(labels == c)


def ac_from_representations(reps, labels, num_classes: int, cfg: ACConfig = ACConfig(),
                            seed: int = 0) -> DefenseVerdict:
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    silhouettes: list[float | None] = []
    minority: list[float | None] = []
    flagged = []
    low, high = cfg.minority_fraction_bounds
    for c, rows in _class_rows(labels, num_classes):
        if len(rows) < 2 * cfg.k:
            if len(rows):
                warnings.warn(f"AC: class {c} has {len(rows)} samples (< {2 * cfg.k}); skipped")
            silhouettes.append(None)
            minority.append(None)
            continue
        x = reps[rows]
        assign = KMeans(n_clusters=cfg.k, n_init=10, random_state=seed).fit_predict(x)
        if len(np.unique(assign)) < 2:
            silhouettes.append(None)
            minority.append(None)
            continue
        sil = float(silhouette_score(x, assign))
        frac = float(np.bincount(assign, minlength=cfg.k).min() / len(rows))
        silhouettes.append(sil)
        minority.append(frac)
        if sil > cfg.silhouette_threshold and low <= frac <= high:
            flagged.append(c)
    diagnostics = {
        "silhouettes": silhouettes,
        "minority_fractions": minority,
        "flagged_classes": flagged,
        "silhouette_threshold": cfg.silhouette_threshold,
        "minority_fraction_bounds": list(cfg.minority_fraction_bounds),
    }
    return DefenseVerdict(DefenseId.AC, bool(flagged), diagnostics)


def activation_clustering(model, training_data: DatasetBundle, cfg: ACConfig = ACConfig(),
                          seed: int = 0) -> DefenseVerdict:
    """k-means on per-class penultimate activations of the (possibly poisoned) training set."""
    reps = extract_penultimate(model, model_inputs(training_data))
    return ac_from_representations(reps.numpy(), training_data.labels.numpy(),
                                   training_data.num_classes, cfg, seed)


def spectral_ratio(reps) -> float:
    """``sigma_1^2 / sum_{i>1} sigma_i^2`` of the centered representation matrix."""
    x = torch.as_tensor(np.asarray(reps), dtype=torch.float64)
    x = x - x.mean(0, keepdim=True)
    s2 = torch.linalg.svdvals(x) ** 2
    rest = float(s2[1:].sum())
    if rest == 0.0:
        return math.inf if float(s2[0]) > 0 else 0.0
    return float(s2[0]) / rest


def ss_ratios(reps, labels, num_classes: int) -> list[float | None]:
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    return [spectral_ratio(reps[rows]) if len(rows) > 1 else None
            for _, rows in _class_rows(labels, num_classes)]


def ss_from_representations(reps, labels, num_classes: int, threshold: float) -> DefenseVerdict:
    ratios = ss_ratios(reps, labels, num_classes)
    valid = [r for r in ratios if r is not None]
    if not valid:
        raise ValueError("no class has more than one sample")
    max_ratio = max(valid)
    diagnostics = {
        "ratios": ratios,
        "max_ratio": max_ratio,
        "argmax_class": ratios.index(max_ratio),
        "eigen_ratio_threshold": threshold,
    }
    return DefenseVerdict(DefenseId.SS, bool(max_ratio > threshold), diagnostics)


def calibrate_ss_threshold(clean_model, data: DatasetBundle, factor: float = 3.0) -> float:
    """``factor`` times the largest per-class ratio measured on a clean reference model."""
    reps = extract_penultimate(clean_model, model_inputs(data))
    valid = [r for r in ss_ratios(reps.numpy(), data.labels.numpy(), data.num_classes)
             if r is not None]
    return factor * max(valid)


def spectral_signatures(model, training_data: DatasetBundle, cfg: SSConfig) -> DefenseVerdict:
    if cfg.eigen_ratio_threshold is None:
        raise ValueError("SSConfig.eigen_ratio_threshold is unset; calibrate it first")
    reps = extract_penultimate(model, model_inputs(training_data))
    return ss_from_representations(reps.numpy(), training_data.labels.numpy(),
                                   training_data.num_classes, cfg.eigen_ratio_threshold)

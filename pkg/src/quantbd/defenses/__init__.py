"""Five backdoor detectors behind one interface.

NC, STRIP and FP inspect the model with a clean held-out set; AC and SS
inspect the (possibly poisoned) training set.
"""

from __future__ import annotations

import dataclasses
from typing import Any, Mapping

from ..datamodel import DefenseId, DefenseVerdict
from ..ingestion import DatasetBundle
from .clustering import (ACConfig, SSConfig, activation_clustering, ac_from_representations,
                         calibrate_ss_threshold, spectral_ratio, spectral_signatures,
                         ss_from_representations)
from .common import extract_penultimate
from .neural_cleanse import (MAD_CONSISTENCY, NCConfig, NCOptimizationError, mad_anomaly_indices,
                             neural_cleanse, reverse_engineer_trigger)
from .runtime import (FPConfig, STRIPConfig, fine_pruning_dormancy, prediction_entropy, strip,
                      strip_decision)

CONFIG_TYPES = {
    DefenseId.NC: NCConfig,
    DefenseId.AC: ACConfig,
    DefenseId.STRIP: STRIPConfig,
    DefenseId.SS: SSConfig,
    DefenseId.FP: FPConfig,
}

# which data each detector receives
DATA_ACCESS = {
    DefenseId.NC: "clean",
    DefenseId.AC: "train",
    DefenseId.STRIP: "clean",
    DefenseId.SS: "train",
    DefenseId.FP: "clean",
}


def make_config(defense_id, overrides: Mapping[str, Any] | None = None):
    defense_id = DefenseId.parse(defense_id)
    cls = CONFIG_TYPES[defense_id]
    overrides = dict(overrides or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown {defense_id.value} config keys: {', '.join(sorted(unknown))}")
    if "minority_fraction_bounds" in overrides:
        overrides["minority_fraction_bounds"] = tuple(overrides["minority_fraction_bounds"])
    return cls(**overrides)


def run_defense(defense_id, model, *, clean: DatasetBundle, train: DatasetBundle | None = None,
                config=None, seed: int = 0) -> DefenseVerdict:
    """Dispatch to one detector, routing the data it is entitled to."""
    defense_id = DefenseId.parse(defense_id)
    cfg = config if config is not None else make_config(defense_id)
    if DATA_ACCESS[defense_id] == "train" and train is None:
        raise ValueError(f"{defense_id.value} needs the training set")
    if defense_id is DefenseId.NC:
        return neural_cleanse(model, clean, cfg, seed=seed)
    if defense_id is DefenseId.AC:
        return activation_clustering(model, train, cfg, seed=seed)
    if defense_id is DefenseId.STRIP:
        return strip(model, clean, cfg, seed=seed)
    if defense_id is DefenseId.SS:
        return spectral_signatures(model, train, cfg)
    return fine_pruning_dormancy(model, clean, cfg)


def recompute_detected(verdict: DefenseVerdict) -> bool:
    """Re-derive the binary outcome from the recorded diagnostics alone."""
    d = verdict.diagnostics
    if verdict.defense_id is DefenseId.NC:
        return any(i > d["mad_threshold"] for i in d["anomaly_indices"]) if d["mad"] > 0 else False
    if verdict.defense_id is DefenseId.AC:
        low, high = d["minority_fraction_bounds"]
        return any(s is not None and s > d["silhouette_threshold"] and low <= f <= high
                   for s, f in zip(d["silhouettes"], d["minority_fractions"]))
    if verdict.defense_id is DefenseId.STRIP:
        return (not d["degenerate"]) and d["flagged_fraction"] > d["flag_fraction"]
    if verdict.defense_id is DefenseId.SS:
        return d["max_ratio"] is None or d["max_ratio"] > d["eigen_ratio_threshold"]
    return d["dormant_fraction"] > d["flag_neuron_fraction"]


__all__ = [
    "ACConfig", "DATA_ACCESS", "FPConfig", "MAD_CONSISTENCY", "NCConfig", "NCOptimizationError",
    "SSConfig", "STRIPConfig", "ac_from_representations", "activation_clustering",
    "calibrate_ss_threshold", "extract_penultimate", "fine_pruning_dormancy", "mad_anomaly_indices",
    "make_config", "neural_cleanse", "prediction_entropy", "recompute_detected",
    "reverse_engineer_trigger", "run_defense", "spectral_ratio", "spectral_signatures",
    "ss_from_representations", "strip", "strip_decision",
]

"""Clean-data defenses that only need forward passes: STRIP and the
Fine-Pruning dormancy detector."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from ..datamodel import DefenseId, DefenseVerdict
from ..ingestion import DatasetBundle, normalize_tensor
from ..models import as_module
from .common import model_inputs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class STRIPConfig:
    n_perturbations: int = 100
    percentile: float = 5.0
    flag_fraction: float = 0.05
    blend_mode: str = "add_clip"
    n_calibration: int = 200
    n_probes: int = 200

    def __post_init__(self):
        if self.n_perturbations < 2:
            raise ValueError("n_perturbations must be >= 2")
        if not 0 < self.percentile < 50:
            raise ValueError("percentile must lie in (0, 50)")
        if not 0 <= self.flag_fraction < 1:
            raise ValueError("flag_fraction must lie in [0, 1)")
        if self.blend_mode not in ("add_clip", "mean"):
            raise ValueError("blend_mode must be 'add_clip' or 'mean'")


@dataclass(frozen=True)
class FPConfig:
    dormancy_activation_cutoff: float = 1e-5
    flag_neuron_fraction: float = 0.001

    def __post_init__(self):
        if self.dormancy_activation_cutoff < 0:
            raise ValueError("dormancy_activation_cutoff must be >= 0")
        if not 0 < self.flag_neuron_fraction < 1:
            raise ValueError("flag_neuron_fraction must lie in (0, 1)")


def prediction_entropy(probabilities, atol: float = 1e-6) -> float:
    """Shannon entropy in nats, with ``0 * ln 0 = 0``."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise ValueError("expected a non-negative probability vector summing to 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _batch_entropy(probs: torch.Tensor) -> torch.Tensor:
    logp = torch.where(probs > 0, probs.log(), torch.zeros_like(probs))
    return -(probs * logp).sum(-1)


def blend(x: torch.Tensor, partners: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "add_clip":
        return (x + partners).clamp(0.0, 1.0)
    return (x + partners) / 2


@torch.no_grad()
def strip_entropies(model, probes: torch.Tensor, partners: torch.Tensor, normalization,
                    cfg: STRIPConfig, gen: torch.Generator) -> np.ndarray:
    """Mean entropy over ``cfg.n_perturbations`` blends for each raw-pixel probe."""
    net = as_module(model)
    out = np.empty(len(probes))
    for i, x in enumerate(probes):
        pick = torch.randint(0, len(partners), (cfg.n_perturbations,), generator=gen)
        blended = blend(x[None], partners[pick], cfg.blend_mode)
        probs = torch.softmax(net(normalize_tensor(blended, normalization)).double(), dim=-1)
        out[i] = float(_batch_entropy(probs).mean())
    return out


def strip_decision(calibration: np.ndarray, probe: np.ndarray, cfg: STRIPConfig) -> DefenseVerdict:
    calibration = np.asarray(calibration, dtype=np.float64)
    probe = np.asarray(probe, dtype=np.float64)
    degenerate = bool(np.ptp(calibration) == 0)
    if degenerate:
        warnings.warn("STRIP: clean entropy distribution is degenerate; not flagging")
        threshold = float(calibration[0])
        frac = 0.0
    else:
        threshold = float(np.percentile(calibration, cfg.percentile))
        frac = float(np.mean(probe < threshold))
    diagnostics = {
        "entropy_threshold": threshold,
        "flagged_fraction": frac,
        "percentile": cfg.percentile,
        "flag_fraction": cfg.flag_fraction,
        "degenerate": degenerate,
        "calibration_mean": float(calibration.mean()),
        "calibration_std": float(calibration.std()),
        "probe_mean": float(probe.mean()),
        "probe_min": float(probe.min()),
        "n_calibration": int(calibration.size),
        "n_probes": int(probe.size),
    }
    detected = (not degenerate) and frac > cfg.flag_fraction
    return DefenseVerdict(DefenseId.STRIP, detected, diagnostics)


def strip(model, clean_holdout: DatasetBundle, cfg: STRIPConfig = STRIPConfig(),
          probes: torch.Tensor | None = None, seed: int = 0) -> DefenseVerdict:
    """Model-level STRIP.

    The clean hold-out is split in two: one half calibrates the entropy
    distribution, the other half is probed.  ``probes`` (raw pixels) may be
    given explicitly instead.  Blend partners come from the calibration half.
    """
    if clean_holdout.normalized:
        raise ValueError("strip expects a raw-pixel clean bundle")
    gen = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(clean_holdout), generator=gen)
    images = clean_holdout.images[perm]
    if probes is None:
        half = len(images) // 2
        calib, probes = images[:half][:cfg.n_calibration], images[half:][:cfg.n_probes]
    else:
        calib = images[:cfg.n_calibration]
    if len(calib) < 2 or len(probes) < 1:
        raise ValueError("clean hold-out too small for STRIP")
    norm = clean_holdout.normalization
    calib_h = strip_entropies(model, calib, calib, norm, cfg, gen)
    probe_h = strip_entropies(model, probes, calib, norm, cfg, gen)
    return strip_decision(calib_h, probe_h, cfg)


@torch.no_grad()
def channel_mean_activations(model, inputs: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    net = as_module(model)
    layer = getattr(net, "dormancy_layer", None)
    if layer is None:
        raise ValueError(f"{type(net).__name__} has no designated dormancy layer")
    sums, count = None, 0
    captured = {}
    handle = layer.register_forward_hook(lambda _m, _i, out: captured.__setitem__("a", out))
    try:
        for i in range(0, inputs.shape[0], batch_size):
            net(inputs[i:i + batch_size])
            a = captured["a"].double()
            reduce = [0] + list(range(2, a.dim()))
            s = a.sum(dim=reduce)
            sums = s if sums is None else sums + s
            count += a.numel() // a.shape[1]
    finally:
        handle.remove()
    return sums / count


def fine_pruning_dormancy(model, clean_data: DatasetBundle, cfg: FPConfig = FPConfig()) -> DefenseVerdict:
    means = channel_mean_activations(model, model_inputs(clean_data))
    dormant = means < cfg.dormancy_activation_cutoff
    fraction = float(dormant.double().mean())
    diagnostics = {
        "dormant_fraction": fraction,
        "n_dormant": int(dormant.sum()),
        "n_neurons": int(dormant.numel()),
        "dormancy_activation_cutoff": cfg.dormancy_activation_cutoff,
        "flag_neuron_fraction": cfg.flag_neuron_fraction,
        "min_mean_activation": float(means.min()),
    }
    return DefenseVerdict(DefenseId.FP, fraction > cfg.flag_neuron_fraction, diagnostics)

"""Neural Cleanse: per-class trigger reverse engineering + MAD outlier test."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..datamodel import DefenseId, DefenseVerdict
from ..ingestion import DatasetBundle, normalize_tensor
from .common import frozen

log = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826


@dataclass(frozen=True)
class NCConfig:
    steps: int = 1000
    lr: float = 0.1
    l1_lambda: float = 0.01
    mad_threshold: float = 2.0
    samples_per_class: int = 20
    batch_size: int = 64

    def __post_init__(self):
        for name in ("steps", "lr", "l1_lambda", "mad_threshold", "samples_per_class", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"NCConfig.{name} must be positive")


class NCOptimizationError(RuntimeError):
    def __init__(self, class_k: int, step: int, ce: float, l1: float):
        self.class_k, self.step, self.ce, self.l1 = class_k, step, ce, l1
        super().__init__(f"non-finite loss reverse-engineering class {class_k} at step {step} "
                         f"(cross-entropy={ce}, mask l1={l1})")


def mad_anomaly_indices(norms, mad_threshold: float = 2.0) -> tuple[np.ndarray, set[int]]:
    """One-sided MAD test: ``(median - norm_k) / (1.4826 * MAD)``.

    Only anomalously *small* norms are flagged.  With MAD = 0 every index is 0
    and nothing is flagged.
    """
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim != 1 or norms.size < 2:
        raise ValueError("need a vector of at least two norms")
    if not np.all(np.isfinite(norms)):
        raise ValueError("norms must be finite")
    median = np.median(norms)
    mad = np.median(np.abs(norms - median))
    if mad == 0:
        return np.zeros_like(norms), set()
    indices = (median - norms) / (MAD_CONSISTENCY * mad)
    flagged = {int(k) for k in np.flatnonzero(indices > mad_threshold)}
    return indices, flagged


def _clean_pool(bundle: DatasetBundle, per_class: int, gen: torch.Generator) -> torch.Tensor:
    """Raw-pixel images, up to ``per_class`` from each class."""
    if bundle.normalized:
        raise ValueError("neural_cleanse expects a raw-pixel clean bundle")
    picks = []
    for c in range(bundle.num_classes):
        idx = torch.nonzero(bundle.labels == c).flatten()
        idx = idx[torch.randperm(len(idx), generator=gen)[:per_class]]
        picks.append(idx)
    pool = torch.cat(picks)
    if len(pool) == 0:
        raise ValueError("clean bundle is empty")
    return bundle.images[pool]


def reverse_engineer_trigger(model, class_k: int, clean_samples: torch.Tensor, cfg: NCConfig,
                             normalization, seed: int = 0):
    """Minimise ``CE(f(norm((1-m)x + m*p)), k) + lambda * |m|_1`` with Adam.

    ``clean_samples`` are raw-pixel images.  Mask and pattern are unconstrained
    tensors squashed into [0, 1] with ``(tanh(.) + 1) / 2``.  Returns
    ``(mask [H, W], pattern [C, H, W], l1_norm)`` after ``cfg.steps`` steps.
    """
    with frozen(model) as net:
        gen = torch.Generator().manual_seed(seed * 1000 + class_k)
        c, h, w = clean_samples.shape[1:]
        mask_param = (0.1 * torch.randn(1, h, w, generator=gen)).requires_grad_()
        pattern_param = (0.1 * torch.randn(c, h, w, generator=gen)).requires_grad_()
        opt = torch.optim.Adam([mask_param, pattern_param], lr=cfg.lr, betas=(0.5, 0.9))
        n = clean_samples.shape[0]
        target = torch.full((min(cfg.batch_size, n),), class_k, dtype=torch.long)
        for step in range(cfg.steps):
            idx = torch.randperm(n, generator=gen)[:cfg.batch_size]
            x = clean_samples[idx]
            mask = (torch.tanh(mask_param) + 1) / 2
            pattern = (torch.tanh(pattern_param) + 1) / 2
            stamped = (1 - mask) * x + mask * pattern
            logits = net(normalize_tensor(stamped, normalization))
            ce = F.cross_entropy(logits, target[:len(idx)])
            l1 = mask.sum()
            loss = ce + cfg.l1_lambda * l1
            if not torch.isfinite(loss):
                raise NCOptimizationError(class_k, step, ce.item(), l1.item())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    with torch.no_grad():
        mask = ((torch.tanh(mask_param) + 1) / 2)[0]
        pattern = (torch.tanh(pattern_param) + 1) / 2
    return mask, pattern, float(mask.sum())


def neural_cleanse(model, clean_data: DatasetBundle, cfg: NCConfig = NCConfig(),
                   seed: int = 0) -> DefenseVerdict:
    gen = torch.Generator().manual_seed(seed)
    pool = _clean_pool(clean_data, cfg.samples_per_class, gen)
    norms = []
    for k in range(clean_data.num_classes):
        _, _, norm = reverse_engineer_trigger(model, k, pool, cfg, clean_data.normalization, seed)
        log.info("NC class %d: mask l1 %.2f", k, norm)
        norms.append(norm)
    indices, flagged = mad_anomaly_indices(norms, cfg.mad_threshold)
    median = float(np.median(norms))
    diagnostics = {
        "norms": norms,
        "anomaly_indices": indices.tolist(),
        "flagged_classes": sorted(flagged),
        "median": median,
        "mad": float(np.median(np.abs(np.asarray(norms) - median))),
        "mad_threshold": cfg.mad_threshold,
        "steps": cfg.steps,
    }
    return DefenseVerdict(DefenseId.NC, bool(flagged), diagnostics)

"""BadNet poisoning, classifier training and the CA / ASR metrics."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .datamodel import MetricPair, ModelArtifact, TriggerSpec
from .ingestion import DatasetBundle, normalize, normalize_tensor
from .models import artifact_from_module, as_module, create_model, predict_logits

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PoisonPolicy:
    poison_rate: float = 0.1
    relabel: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in [0, 1]")


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass(frozen=True)
class TrainConfig:
    architecture_id: str = "resnet18_cifar"
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    optimizer: SGDConfig = field(default_factory=SGDConfig)
    augment: bool = False
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", SGDConfig(**self.optimizer))
        if self.optimizer.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged in epoch {epoch} (loss={loss})")


def apply_trigger(image: torch.Tensor, spec: TriggerSpec) -> torch.Tensor:
    """Works on a single ``[C, H, W]`` image or a ``[N, C, H, W]`` batch."""
    if image.shape[-3:] != spec.pattern.shape:
        raise ValueError(f"image shape {tuple(image.shape)} does not match trigger "
                         f"{tuple(spec.pattern.shape)}")
    mask = spec.mask.to(image.dtype)
    return torch.where(mask.bool(), spec.pattern.to(image.dtype), image)


def poison_dataset(bundle: DatasetBundle, spec: TriggerSpec,
                   policy: PoisonPolicy) -> tuple[DatasetBundle, torch.Tensor]:
    """Trigger ``round(rate * N)`` uniformly chosen samples (and relabel them).

    Returns the poisoned bundle and the sorted indices of poisoned samples.
    """
    if len(bundle) == 0:
        raise ValueError("cannot poison an empty bundle")
    if bundle.normalized:
        raise ValueError("poisoning happens in raw pixel space; got a normalized bundle")
    spec.check_classes(bundle.num_classes)
    n = len(bundle)
    n_poison = int(round(policy.poison_rate * n))
    gen = torch.Generator().manual_seed(policy.seed)
    index = torch.randperm(n, generator=gen)[:n_poison].sort().values
    if n_poison == 0:
        return bundle, index
    images = bundle.images.clone()
    labels = bundle.labels.clone()
    images[index] = apply_trigger(images[index], spec)
    if policy.relabel:
        labels[index] = spec.target_class
    return dataclasses.replace(bundle, images=images, labels=labels), index


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # random crop (pad 4) + horizontal flip, applied per batch on normalized tensors
    n, _, h, w = x.shape
    padded = F.pad(x, (4, 4, 4, 4), mode="reflect")
    dy, dx = torch.randint(0, 9, (2,), generator=gen).tolist()
    x = padded[:, :, dy:dy + h, dx:dx + w]
    flip = torch.rand(n, generator=gen) < 0.5
    return torch.where(flip[:, None, None, None], x.flip(-1), x)


def train_classifier(bundle: DatasetBundle, cfg: TrainConfig, *, poisoned: bool = False,
                     extra_meta: dict | None = None) -> ModelArtifact:
    """SGD with momentum and weight decay; deterministic in ``cfg.seed`` on CPU."""
    if not bundle.normalized:
        raise ValueError("train_classifier expects a normalized bundle")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = create_model(cfg.architecture_id, bundle.num_classes)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum,
                          weight_decay=cfg.optimizer.weight_decay)
    n = len(bundle)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch)
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            x, y = bundle.images[idx], bundle.labels[idx]
            if cfg.augment:
                x = _augment(x, gen)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, loss.item())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        log.info("epoch %d/%d loss %.4f", epoch, cfg.epochs, total / count)
    model.eval()
    meta = {
        "dataset_id": bundle.name,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "poisoned": poisoned,
        "train_config": cfg.to_dict(),
        "normalization": [list(bundle.normalization[0]), list(bundle.normalization[1])],
    }
    meta.update(extra_meta or {})
    return artifact_from_module(model, cfg.architecture_id, bundle.num_classes, meta)


def _check_classes(model, bundle: DatasetBundle) -> None:
    k = getattr(model, "num_classes", None)
    if k is not None and k != bundle.num_classes:
        raise ValueError(f"model has {k} classes, test bundle has {bundle.num_classes}")


def evaluate_clean_accuracy(model, test_bundle: DatasetBundle) -> float:
    if not test_bundle.normalized:
        raise ValueError("evaluate_clean_accuracy expects a normalized bundle")
    _check_classes(model, test_bundle)
    net = as_module(model)
    pred = predict_logits(net, test_bundle.images).argmax(1)
    return float((pred == test_bundle.labels).float().mean())


def evaluate_asr(model, test_bundle: DatasetBundle, spec: TriggerSpec,
                 exclude_target: bool = True) -> float:
    """Fraction of triggered non-target test samples classified as the target."""
    if test_bundle.normalized:
        raise ValueError("evaluate_asr expects a raw-pixel bundle (trigger precedes normalization)")
    _check_classes(model, test_bundle)
    spec.check_classes(test_bundle.num_classes)
    keep = test_bundle.labels != spec.target_class if exclude_target else \
        torch.ones(len(test_bundle), dtype=torch.bool)
    if not keep.any():
        raise ValueError("no eligible samples: every test sample is in the target class")
    x = normalize_tensor(apply_trigger(test_bundle.images[keep], spec), test_bundle.normalization)
    pred = predict_logits(as_module(model), x).argmax(1)
    return float((pred == spec.target_class).float().mean())


def metrics_for(model, raw_test: DatasetBundle, spec: TriggerSpec) -> MetricPair:
    return MetricPair(evaluate_clean_accuracy(model, normalize(raw_test)),
                      evaluate_asr(model, raw_test, spec))

"""Dataset loading, normalization and the synthetic toy benchmark."""

from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from filelock import FileLock

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "QUANTBD_DATA_ROOT"

CIFAR10_NORM = ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))
GTSRB_NORM = ((0.3403, 0.3121, 0.3214), (0.2724, 0.2608, 0.2669))
TOY_NORM = ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))

NUM_CLASSES = {"cifar10": 10, "gtsrb": 43}
TOY_DEFAULTS = {"n_per_class": 500, "num_classes": 10, "image_size": 32}


class DatasetError(RuntimeError):
    pass


class DownloadError(DatasetError):
    """Fetching a dataset failed; safe to retry."""

    retryable = True


class ChecksumError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    images: torch.Tensor  # [N, C, H, W] float32
    labels: torch.Tensor  # [N] int64
    num_classes: int
    split: str
    normalization: tuple[tuple[float, ...], tuple[float, ...]]
    name: str = "custom"
    normalized: bool = False

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.images.dim() != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be [N, C, H, W] with one label per image")
        if self.images.shape[0] == 0:
            raise ValueError("bundle must contain at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not self.normalized and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("raw images must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "DatasetBundle":
        index = torch.as_tensor(index, dtype=torch.long)
        return dataclasses.replace(self, images=self.images[index], labels=self.labels[index])

    def class_counts(self) -> torch.Tensor:
        return torch.bincount(self.labels, minlength=self.num_classes)


def _stats(norm) -> tuple[torch.Tensor, torch.Tensor]:
    mean = torch.tensor(norm[0], dtype=torch.float32).view(-1, 1, 1)
    std = torch.tensor(norm[1], dtype=torch.float32).view(-1, 1, 1)
    return mean, std


def normalize_tensor(x: torch.Tensor, normalization) -> torch.Tensor:
    mean, std = _stats(normalization)
    return (x - mean) / std


def denormalize_tensor(x: torch.Tensor, normalization) -> torch.Tensor:
    mean, std = _stats(normalization)
    return x * std + mean


def normalize(bundle: DatasetBundle) -> DatasetBundle:
    if bundle.normalized:
        raise ValueError("bundle is already normalized")
    return dataclasses.replace(
        bundle, images=normalize_tensor(bundle.images, bundle.normalization), normalized=True)


def denormalize(bundle: DatasetBundle) -> DatasetBundle:
    if not bundle.normalized:
        raise ValueError("bundle is not normalized")
    images = denormalize_tensor(bundle.images, bundle.normalization)
    # float round-off can leave values a hair outside [0, 1]
    return dataclasses.replace(bundle, images=images.clamp(0.0, 1.0), normalized=False)


# --------------------------------------------------------------------------
# Toy benchmark
# --------------------------------------------------------------------------


def _toy_class_params(num_classes: int):
    # Evenly spaced hues and grating orientations so that no class is
    # intrinsically easier to reach than another.
    for c in range(num_classes):
        rgb = colorsys.hsv_to_rgb(c / num_classes, 0.8, 0.9)
        angle = math.pi * c / num_classes
        yield np.array(rgb, dtype=np.float32), angle


def _backgrounds(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    # smooth, class-independent colour fields: bilinear upsampling of 4x4 noise
    low = torch.from_numpy(rng.uniform(0.1, 0.9, size=(n, 3, 4, 4)).astype(np.float32))
    return F.interpolate(low, size=(size, size), mode="bilinear", align_corners=False).numpy()


def make_toy_dataset(seed: int = 0, n_per_class: int = TOY_DEFAULTS["n_per_class"],
                     num_classes: int = TOY_DEFAULTS["num_classes"],
                     image_size: int = TOY_DEFAULTS["image_size"],
                     split: str = "train") -> DatasetBundle:
    """Class-balanced object-on-background images.

    Every image is a textured disk on a random smooth background.  The class
    decides the disk colour and the orientation of its grating; position,
    radius, grating period and phase, background and pixel noise vary per
    image.  Output is deterministic in ``(seed, split)``.
    """
    if n_per_class < 10:
        raise ValueError("n_per_class must be >= 10")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    split_offset = {"train": 0, "test": 1}[split]
    rng = np.random.default_rng([seed, split_offset])

    n = num_classes * n_per_class
    centre = (image_size - 1) / 2
    scale = image_size / 32
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    images = _backgrounds(rng, n, image_size)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    i = 0
    for color, angle in _toy_class_params(num_classes):
        for _ in range(n_per_class):
            cy, cx = centre + rng.uniform(-4, 4, size=2) * scale
            radius = rng.uniform(7, 10) * scale
            disk = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2).astype(np.float32)
            theta = angle + rng.normal(0, 0.08)
            freq = 2 * math.pi / (rng.uniform(4.0, 6.0) * scale)
            phase = rng.uniform(0, 2 * math.pi)
            grating = np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
            obj = color[:, None, None] + 0.15 * grating[None]
            img = images[i] * (1 - disk) + obj * disk
            img = img + rng.normal(0, 0.05, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
            i += 1

    order = rng.permutation(n)
    return DatasetBundle(
        images=torch.from_numpy(images[order]),
        labels=torch.from_numpy(labels[order]).long(),
        num_classes=num_classes,
        split=split,
        normalization=TOY_NORM,
        name="toy",
    )


# --------------------------------------------------------------------------
# Benchmark datasets with an on-disk cache
# --------------------------------------------------------------------------


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / ".cache" / "quantbd"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cache_file(cache_dir: Path, name: str, split: str) -> Path:
    return Path(cache_dir) / name / split / "data.npz"


def manifest_path(cache_dir: Path, name: str) -> Path:
    return Path(cache_dir) / name / "manifest.json"


def write_cache(cache_dir: Path, name: str, split: str, images: np.ndarray,
                labels: np.ndarray) -> Path:
    """Store uint8 ``[N, 3, 32, 32]`` images and record their checksum."""
    path = cache_file(cache_dir, name, split)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name("data.tmp.npz")
    np.savez(tmp, images=images.astype(np.uint8), labels=labels.astype(np.int64))
    os.replace(tmp, path)
    mpath = manifest_path(cache_dir, name)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    manifest[split] = {"file": str(path.relative_to(Path(cache_dir) / name)), "sha256": _sha256(path),
                       "n": int(len(labels))}
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _read_cache(cache_dir: Path, name: str, split: str) -> tuple[np.ndarray, np.ndarray] | None:
    path = cache_file(cache_dir, name, split)
    mpath = manifest_path(cache_dir, name)
    if not path.exists() or not mpath.exists():
        return None
    entry = json.loads(mpath.read_text()).get(split)
    if entry is None:
        return None
    if _sha256(path) != entry["sha256"]:
        raise ChecksumError(f"checksum mismatch for cached {name}/{split} at {path}")
    with np.load(path) as z:
        return z["images"], z["labels"]


def _fetch(name: str, split: str, raw_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    import torchvision

    try:
        if name == "cifar10":
            ds = torchvision.datasets.CIFAR10(str(raw_dir), train=(split == "train"), download=True)
            images = np.asarray(ds.data).transpose(0, 3, 1, 2)
            labels = np.asarray(ds.targets)
        else:
            ds = torchvision.datasets.GTSRB(str(raw_dir), split=split, download=True)
            images, labels = _resize_gtsrb(ds)
    except (OSError, RuntimeError) as exc:
        raise DownloadError(f"could not fetch {name}/{split}: {exc}") from exc
    return images, labels


def _resize_gtsrb(ds) -> tuple[np.ndarray, np.ndarray]:
    images = np.empty((len(ds), 3, 32, 32), dtype=np.uint8)
    labels = np.empty(len(ds), dtype=np.int64)
    for i in range(len(ds)):
        img, label = ds[i]
        t = torch.from_numpy(np.asarray(img.convert("RGB"), dtype=np.float32)).permute(2, 0, 1)
        t = F.interpolate(t[None], size=(32, 32), mode="bilinear", align_corners=False)[0]
        images[i] = t.round().clamp(0, 255).to(torch.uint8).numpy()
        labels[i] = label
    return images, labels


def load_dataset(name: str, split: str = "train", cache_dir: str | os.PathLike | None = None,
                 seed: int = 0, download: bool = True) -> DatasetBundle:
    name = name.lower()
    if name == "toy":
        return make_toy_dataset(seed=seed, split=split)
    if name not in NUM_CLASSES:
        raise ValueError(f"unknown dataset {name!r}; valid: cifar10, gtsrb, toy")
    cache_dir = Path(cache_dir) if cache_dir is not None else default_data_root()
    lock_path = cache_dir / name / f"{split}.lock"
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(lock_path)):
        cached = _read_cache(cache_dir, name, split)
        if cached is None:
            if not download:
                raise DatasetError(f"{name}/{split} not cached under {cache_dir}")
            log.info("fetching %s/%s into %s", name, split, cache_dir)
            images, labels = _fetch(name, split, cache_dir / name / "raw")
            write_cache(cache_dir, name, split, images, labels)
            cached = _read_cache(cache_dir, name, split)
    images, labels = cached
    return DatasetBundle(
        images=torch.from_numpy(images.astype(np.float32) / 255.0),
        labels=torch.from_numpy(labels.astype(np.int64)),
        num_classes=NUM_CLASSES[name],
        split=split,
        normalization=CIFAR10_NORM if name == "cifar10" else GTSRB_NORM,
        name=name,
    )

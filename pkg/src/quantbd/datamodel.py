"""Shared domain types and the newline-delimited record format.

Records are JSON documents, one per line, UTF-8.  Every document carries a
``schema_version``; floats are written with ``repr`` precision so that
detector thresholds replay bit-exactly after a round trip.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np
import torch
from filelock import FileLock

SCHEMA_VERSION = 1


class RecordError(ValueError):
    """Raised when a record document is malformed or violates an invariant."""

    def __init__(self, message: str, field_name: str | None = None):
        self.field_name = field_name
        if field_name is not None:
            message = f"{field_name}: {message}"
        super().__init__(message)


class DefenseId(str, enum.Enum):
    NC = "NC"
    AC = "AC"
    STRIP = "STRIP"
    SS = "SS"
    FP = "FP"

    @classmethod
    def parse(cls, value) -> "DefenseId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            valid = ", ".join(d.value for d in cls)
            raise ValueError(f"unknown defense id {value!r}; valid ids: {valid}") from None


class SchemeName(str, enum.Enum):
    FP32 = "FP32"
    INT8_DYNAMIC = "INT8_DYNAMIC"
    INT4_SIM = "INT4_SIM"


class Granularity(str, enum.Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


# --------------------------------------------------------------------------
# Attack / quantization descriptors
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    """Patch trigger ``x -> (1 - mask) * x + mask * pattern`` in raw pixel space.

    ``mask`` is ``[H, W]`` with values in {0, 1}; ``pattern`` is ``[C, H, W]``.
    """

    mask: torch.Tensor
    pattern: torch.Tensor
    target_class: int

    def __post_init__(self):
        mask = torch.as_tensor(self.mask, dtype=torch.float32)
        pattern = torch.as_tensor(self.pattern, dtype=torch.float32)
        if mask.dim() != 2:
            raise ValueError(f"mask must be [H, W], got shape {tuple(mask.shape)}")
        if pattern.dim() != 3 or pattern.shape[-2:] != mask.shape:
            raise ValueError(
                f"pattern shape {tuple(pattern.shape)} does not match mask grid {tuple(mask.shape)}"
            )
        if not torch.all((mask == 0) | (mask == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        if pattern.min() < 0 or pattern.max() > 1:
            raise ValueError("pattern values must lie in the raw pixel range [0, 1]")
        if self.target_class < 0:
            raise ValueError("target_class must be non-negative")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "pattern", pattern)

    @classmethod
    def badnet(cls, image_size: int = 32, channels: int = 3, size: int = 3,
               target_class: int = 0, value: float = 1.0) -> "TriggerSpec":
        """White ``size x size`` square touching the bottom-right corner."""
        mask = torch.zeros(image_size, image_size)
        mask[image_size - size:, image_size - size:] = 1.0
        pattern = torch.zeros(channels, image_size, image_size)
        pattern[:, image_size - size:, image_size - size:] = value
        return cls(mask=mask, pattern=pattern, target_class=target_class)

    def check_classes(self, num_classes: int) -> None:
        if self.target_class >= num_classes:
            raise ValueError(f"target_class {self.target_class} out of range for K={num_classes}")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.mask.numpy().tobytes())
        h.update(self.pattern.numpy().tobytes())
        h.update(str(self.target_class).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class QuantScheme:
    name: SchemeName
    bits: int
    granularity: Granularity
    emulate_dynamic_activations: bool = False
    linear_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "name", SchemeName(self.name))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.name is SchemeName.FP32:
            return
        if self.bits < 2:
            raise ValueError("bits must be >= 2")
        expected = {
            SchemeName.INT8_DYNAMIC: (8, Granularity.PER_TENSOR),
            SchemeName.INT4_SIM: (4, Granularity.PER_CHANNEL),
        }[self.name]
        if (self.bits, self.granularity) != expected:
            raise ValueError(f"{self.name.value} requires bits={expected[0]}, {expected[1].value}")

    @classmethod
    def fp32(cls) -> "QuantScheme":
        return cls(SchemeName.FP32, 32, Granularity.PER_TENSOR)

    @classmethod
    def int8_dynamic(cls, emulate_activations: bool = False, linear_only: bool = False) -> "QuantScheme":
        return cls(SchemeName.INT8_DYNAMIC, 8, Granularity.PER_TENSOR,
                   emulate_dynamic_activations=emulate_activations, linear_only=linear_only)

    @classmethod
    def int4_sim(cls) -> "QuantScheme":
        return cls(SchemeName.INT4_SIM, 4, Granularity.PER_CHANNEL)

    @classmethod
    def from_short(cls, short: str, emulate_activations: bool = False,
                   linear_only: bool = False) -> "QuantScheme":
        key = short.lower()
        if key in ("fp32", "float32"):
            return cls.fp32()
        if key in ("int8", "int8_dynamic"):
            return cls.int8_dynamic(emulate_activations, linear_only)
        if key in ("int4", "int4_sim"):
            return cls.int4_sim()
        raise ValueError(f"unknown scheme {short!r}; valid: fp32, int8, int4")

    def to_dict(self) -> dict:
        return {
            "name": self.name.value,
            "bits": self.bits,
            "granularity": self.granularity.value,
            "emulate_dynamic_activations": self.emulate_dynamic_activations,
            "linear_only": self.linear_only,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QuantScheme":
        return cls(d["name"], int(d["bits"]), d["granularity"],
                   bool(d.get("emulate_dynamic_activations", False)),
                   bool(d.get("linear_only", False)))


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------


def hash_parameters(parameters: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(parameters):
        t = parameters[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class ModelArtifact:
    """Classifier weights plus provenance.

    ``parameters`` is a full state dict (weights and buffers).  ``training_meta``
    carries dataset id, epochs, seed, the poisoned flag, the input normalization
    and, for quantized copies, the applied scheme.
    """

    architecture_id: str
    parameters: Mapping[str, torch.Tensor]
    num_classes: int
    training_meta: Mapping[str, Any] = field(default_factory=dict)
    content_hash: str = ""

    def __post_init__(self):
        params = {k: v.detach().clone() for k, v in self.parameters.items()}
        object.__setattr__(self, "parameters", params)
        object.__setattr__(self, "training_meta", dict(self.training_meta))
        digest = hash_parameters(params)
        if self.content_hash and self.content_hash != digest:
            raise ValueError("content_hash does not match parameters")
        object.__setattr__(self, "content_hash", digest)

    @property
    def quant_scheme(self) -> QuantScheme | None:
        d = self.training_meta.get("quant_scheme")
        return QuantScheme.from_dict(d) if d else None

    def sidecar(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "architecture_id": self.architecture_id,
            "num_classes": self.num_classes,
            "content_hash": self.content_hash,
            "training_meta": self.training_meta,
        }

    def save(self, path: str | os.PathLike) -> Path:
        """Write ``<path>`` (tensors) and ``<path>.json`` (metadata sidecar)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(dict(self.parameters), path)
        sidecar_path(path).write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelArtifact":
        path = Path(path)
        meta = json.loads(sidecar_path(path).read_text())
        params = torch.load(path, map_location="cpu", weights_only=True)
        return cls(
            architecture_id=meta["architecture_id"],
            parameters=params,
            num_classes=int(meta["num_classes"]),
            training_meta=meta.get("training_meta", {}),
            content_hash=meta["content_hash"],
        )


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricPair:
    clean_accuracy: float
    attack_success_rate: float

    def __post_init__(self):
        for name in ("clean_accuracy", "attack_success_rate"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise RecordError(f"expected a number, got {v!r}", name)
            if not (0.0 <= float(v) <= 1.0):
                raise RecordError(f"{v!r} outside [0, 1]", name)
            object.__setattr__(self, name, float(v))


@dataclass(frozen=True)
class DefenseVerdict:
    defense_id: DefenseId
    detected: bool
    diagnostics: Mapping[str, Any]

    def __post_init__(self):
        object.__setattr__(self, "defense_id", DefenseId.parse(self.defense_id))
        if isinstance(self.detected, np.bool_):
            object.__setattr__(self, "detected", bool(self.detected))
        if not isinstance(self.detected, bool):
            raise RecordError(f"expected a boolean, got {self.detected!r}", "verdict.detected")
        if not isinstance(self.diagnostics, Mapping) or not self.diagnostics:
            raise RecordError("diagnostics must be a non-empty mapping", "verdict.diagnostics")
        object.__setattr__(self, "diagnostics", _freeze_json(dict(self.diagnostics)))

    def to_dict(self) -> dict:
        return {
            "defense_id": self.defense_id.value,
            "detected": self.detected,
            "diagnostics": _thaw_json(self.diagnostics),
        }


@dataclass(frozen=True)
class ExperimentRecord:
    dataset_id: str
    scheme: SchemeName
    defense_id: DefenseId
    verdict: DefenseVerdict | None
    metrics: MetricPair
    wall_time_seconds: float
    seed: int
    error: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "scheme", SchemeName(self.scheme))
        object.__setattr__(self, "defense_id", DefenseId.parse(self.defense_id))
        if self.verdict is None and self.error is None:
            raise RecordError("a record without a verdict must carry an error", "verdict")
        if self.verdict is not None and self.verdict.defense_id is not self.defense_id:
            raise RecordError(
                f"{self.verdict.defense_id.value} does not match record defense "
                f"{self.defense_id.value}", "verdict.defense_id")
        if not math.isfinite(self.wall_time_seconds) or self.wall_time_seconds < 0:
            raise RecordError("must be a finite non-negative number", "wall_time_seconds")

    @property
    def cell(self) -> tuple[str, str, str, int]:
        return (self.dataset_id, self.scheme.value, self.defense_id.value, self.seed)

    @property
    def detected(self) -> bool:
        return bool(self.verdict is not None and self.verdict.detected)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset_id": self.dataset_id,
            "scheme": self.scheme.value,
            "defense_id": self.defense_id.value,
            "verdict": self.verdict.to_dict() if self.verdict is not None else None,
            "metrics": dataclasses.asdict(self.metrics),
            "wall_time_seconds": self.wall_time_seconds,
            "seed": self.seed,
            "error": self.error,
        }


def _freeze_json(obj):
    # Mappings stay dicts (records are never mutated after construction);
    # numpy/torch scalars and arrays become plain JSON values.
    if isinstance(obj, Mapping):
        return {str(k): _freeze_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_freeze_json(v) for v in obj]
    if isinstance(obj, (np.ndarray, torch.Tensor)):
        return _freeze_json(np.asarray(obj).tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _thaw_json(obj):
    return json.loads(json.dumps(obj))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def serialize_record(record: ExperimentRecord) -> bytes:
    """One JSON line (without the trailing newline), UTF-8."""
    text = json.dumps(record.to_dict(), allow_nan=False, ensure_ascii=False, sort_keys=False)
    return text.encode("utf-8")


_KEY_RE = re.compile(r'"([A-Za-z_][A-Za-z0-9_]*)"\s*:')


def _field_at(text: str, pos: int) -> str:
    """Name of the last key opened before ``pos`` (best effort for parse errors)."""
    keys = [m.group(1) for m in _KEY_RE.finditer(text[:pos])]
    return keys[-1] if keys else "<document>"


def _require(doc: Mapping, key: str, types, prefix: str = ""):
    name = prefix + key
    if key not in doc:
        raise RecordError("missing required field", name)
    value = doc[key]
    if types is not None and (not isinstance(value, types) or
                              (isinstance(value, bool) and bool not in _as_tuple(types))):
        raise RecordError(f"unexpected type {type(value).__name__}", name)
    return value


def _as_tuple(types):
    return types if isinstance(types, tuple) else (types,)


def deserialize_record(data: bytes | str) -> ExperimentRecord:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecordError(f"malformed document ({exc.msg} at char {exc.pos})",
                          _field_at(text, exc.pos)) from None
    if not isinstance(doc, dict):
        raise RecordError("top-level value must be an object", "<document>")

    version = _require(doc, "schema_version", int)
    if version != SCHEMA_VERSION:
        raise RecordError(f"unsupported schema version {version} (expected {SCHEMA_VERSION})",
                          "schema_version")
    dataset_id = _require(doc, "dataset_id", str)
    scheme = _require(doc, "scheme", str)
    try:
        scheme = SchemeName(scheme)
    except ValueError:
        valid = ", ".join(s.value for s in SchemeName)
        raise RecordError(f"unknown scheme {scheme!r}; valid: {valid}", "scheme") from None
    defense = _require(doc, "defense_id", str)
    try:
        defense = DefenseId.parse(defense)
    except ValueError as exc:
        raise RecordError(str(exc), "defense_id") from None

    verdict_doc = _require(doc, "verdict", (dict, type(None)))
    verdict = None
    if verdict_doc is not None:
        vid = _require(verdict_doc, "defense_id", str, "verdict.")
        try:
            vid = DefenseId.parse(vid)
        except ValueError as exc:
            raise RecordError(str(exc), "verdict.defense_id") from None
        detected = _require(verdict_doc, "detected", bool, "verdict.")
        diagnostics = _require(verdict_doc, "diagnostics", dict, "verdict.")
        verdict = DefenseVerdict(vid, detected, diagnostics)

    metrics_doc = _require(doc, "metrics", dict)
    ca = _require(metrics_doc, "clean_accuracy", (int, float), "metrics.")
    asr = _require(metrics_doc, "attack_success_rate", (int, float), "metrics.")
    for key, v in (("clean_accuracy", ca), ("attack_success_rate", asr)):
        if not 0.0 <= v <= 1.0:
            raise RecordError(f"{v!r} outside [0, 1]", "metrics." + key)
    metrics = MetricPair(float(ca), float(asr))

    wall = _require(doc, "wall_time_seconds", (int, float))
    seed = _require(doc, "seed", int)
    error = doc.get("error")
    if error is not None and not isinstance(error, str):
        raise RecordError("must be a string or null", "error")
    return ExperimentRecord(dataset_id, scheme, defense, verdict, metrics, float(wall), seed, error)


# --------------------------------------------------------------------------
# Record store
# --------------------------------------------------------------------------


class RecordStore:
    """Append-only JSON-lines file.  Each append is a single ``write`` of one
    complete line under an inter-process lock, so concurrent writers never
    interleave partial records."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = FileLock(str(self.path) + ".lock")

    def append(self, record: ExperimentRecord) -> None:
        line = serialize_record(record) + b"\n"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                os.write(fd, line)
            finally:
                os.close(fd)

    def __iter__(self) -> Iterator[ExperimentRecord]:
        if not self.path.exists():
            return
        with open(self.path, "rb") as fh:
            for lineno, raw in enumerate(fh, 1):
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    yield deserialize_record(raw)
                except RecordError as exc:
                    raise RecordError(f"{self.path}:{lineno}: {exc}") from None

    def read_all(self) -> list[ExperimentRecord]:
        return list(self)

    def completed_cells(self) -> set[tuple[str, str, str, int]]:
        return {r.cell for r in self}


def check_metric_consistency(records: Iterable[ExperimentRecord]) -> list[tuple[str, str, int]]:
    """Return (dataset, scheme, seed) groups whose records disagree on metrics."""
    seen: dict[tuple[str, str, int], MetricPair] = {}
    bad = []
    for r in records:
        key = (r.dataset_id, r.scheme.value, r.seed)
        if key in seen and seen[key] != r.metrics:
            if key not in bad:
                bad.append(key)
        seen.setdefault(key, r.metrics)
    return bad

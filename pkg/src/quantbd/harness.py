"""End-to-end evaluation protocol.

Phase 1 trains (or loads from cache) a backdoored classifier and checks that
the attack is valid.  Phase 2 sweeps quantization schemes x defenses and
appends one ExperimentRecord per cell to an append-only store.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import torch
import yaml

from .attack import PoisonPolicy, TrainConfig, metrics_for, poison_dataset, train_classifier
from .datamodel import (DefenseId, ExperimentRecord, MetricPair, ModelArtifact, QuantScheme,
                        RecordStore, TriggerSpec)
from .defenses import calibrate_ss_threshold, make_config, run_defense
from .ingestion import DatasetBundle, load_dataset, normalize
from .models import build_module
from .quant import quantize_model

log = logging.getLogger(__name__)

WORKERS_ENV = "QUANTBD_WORKERS"
RECORDS_FILE = "records.jsonl"


@dataclass(frozen=True)
class Validity:
    min_asr: float = 0.95
    min_ca: float = 0.85

    def __post_init__(self):
        for name in ("min_asr", "min_ca"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"validity.{name} must lie in (0, 1)")


@dataclass(frozen=True)
class DefenseEntry:
    defense_id: DefenseId
    config: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "defense_id", DefenseId.parse(self.defense_id))
        object.__setattr__(self, "config", dict(self.config))
        make_config(self.defense_id, self.config)  # reject unknown keys early


@dataclass(frozen=True)
class ProtocolConfig:
    dataset_id: str
    trigger: TriggerSpec
    poison: PoisonPolicy
    train: TrainConfig
    schemes: tuple[QuantScheme, ...]
    defenses: tuple[DefenseEntry, ...]
    validity: Validity = Validity()
    seed: int = 0
    output_dir: Path = Path("runs")
    repeats: int = 1
    # optional caps on the number of samples drawn from each split
    train_size: int | None = None
    test_size: int | None = None
    # clean images handed to the clean-data defenses, drawn from the test split
    defense_holdout: int = 1000
    data_root: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(self.schemes))
        object.__setattr__(self, "defenses", tuple(
            d if isinstance(d, DefenseEntry) else DefenseEntry(d) for d in self.defenses))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if not self.schemes:
            raise ValueError("schemes must be non-empty")
        if not self.defenses:
            raise ValueError("defenses must be non-empty")
        names = [s.name for s in self.schemes]
        if len(set(names)) != len(names):
            raise ValueError("schemes must be distinct")
        ids = [d.defense_id for d in self.defenses]
        if len(set(ids)) != len(ids):
            raise ValueError("defenses must be distinct")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.defense_holdout < 2:
            raise ValueError("defense_holdout must be >= 2")

    @property
    def records_path(self) -> Path:
        return self.output_dir / RECORDS_FILE

    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repeats)]

    def cells(self) -> list[tuple[str, str, str, int]]:
        return [(self.dataset_id, s.name.value, d.defense_id.value, seed)
                for seed in self.seeds() for s in self.schemes for d in self.defenses]

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base_dir: Path | None = None) -> "ProtocolConfig":
        doc = dict(doc)
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        missing = {"dataset_id", "schemes", "defenses"} - set(doc)
        if missing:
            raise ValueError(f"missing config keys: {', '.join(sorted(missing))}")
        out = Path(doc.get("output_dir", "runs"))
        if base_dir is not None and not out.is_absolute():
            out = base_dir / out
        data_root = doc.get("data_root")
        return cls(
            dataset_id=doc["dataset_id"],
            trigger=_trigger_from(doc.get("trigger") or {}),
            poison=PoisonPolicy(**(doc.get("poison") or {})),
            train=TrainConfig(**(doc.get("train") or {})),
            schemes=tuple(_scheme_from(s) for s in doc["schemes"]),
            defenses=tuple(_defense_from(d) for d in doc["defenses"]),
            validity=Validity(**(doc.get("validity") or {})),
            seed=int(doc.get("seed", 0)),
            output_dir=out,
            repeats=int(doc.get("repeats", 1)),
            train_size=doc.get("train_size"),
            test_size=doc.get("test_size"),
            defense_holdout=int(doc.get("defense_holdout", 1000)),
            data_root=Path(data_root) if data_root else None,
        )

    @classmethod
    def from_yaml(cls, path: str | os.PathLike) -> "ProtocolConfig":
        path = Path(path)
        with open(path) as fh:
            doc = yaml.safe_load(fh)
        if not isinstance(doc, Mapping):
            raise ValueError(f"{path}: expected a mapping at the top level")
        return cls.from_dict(doc, base_dir=path.parent)


def _trigger_from(doc: Mapping[str, Any]) -> TriggerSpec:
    doc = dict(doc)
    kind = doc.pop("type", "badnet")
    if kind != "badnet":
        raise ValueError(f"unsupported trigger type {kind!r}")
    return TriggerSpec.badnet(**doc)


def _scheme_from(item) -> QuantScheme:
    if isinstance(item, str):
        return QuantScheme.from_short(item)
    item = dict(item)
    return QuantScheme.from_short(item.pop("name"), **item)


def _defense_from(item) -> DefenseEntry:
    if isinstance(item, str):
        return DefenseEntry(item)
    item = dict(item)
    if set(item) <= {"id", "config"} and "id" in item:
        return DefenseEntry(item["id"], item.get("config") or {})
    if len(item) == 1:  # {nc: {steps: 300}}
        (key, cfg), = item.items()
        return DefenseEntry(key, cfg or {})
    raise ValueError(f"cannot parse defense entry {item!r}")


# --------------------------------------------------------------------------
# Phase 1
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackValidation:
    passed: bool
    metrics: MetricPair
    failures: tuple[str, ...] = ()


def validate_attack(model, test_bundle: DatasetBundle, trigger: TriggerSpec,
                    validity: Validity = Validity()) -> AttackValidation:
    """Pass iff ASR >= min_asr and CA >= min_ca.  Failure is a value, not an error."""
    metrics = metrics_for(model, test_bundle, trigger)
    failures = []
    if metrics.attack_success_rate < validity.min_asr:
        failures.append(f"ASR {metrics.attack_success_rate:.4f} < {validity.min_asr}")
    if metrics.clean_accuracy < validity.min_ca:
        failures.append(f"CA {metrics.clean_accuracy:.4f} < {validity.min_ca}")
    return AttackValidation(not failures, metrics, tuple(failures))


class ProtocolStatus(enum.IntEnum):
    # values double as CLI exit codes
    OK = 0
    GATE_FAILED = 2
    PARTIAL = 3


@dataclass
class ProtocolResult:
    status: ProtocolStatus
    records: list[ExperimentRecord]
    validations: dict[int, AttackValidation]
    new_records: int = 0


def _subset(bundle: DatasetBundle, size: int | None, seed: int) -> DatasetBundle:
    if size is None or size >= len(bundle):
        return bundle
    gen = torch.Generator().manual_seed(seed)
    return bundle.subset(torch.randperm(len(bundle), generator=gen)[:size].sort().values)


def load_splits(cfg: ProtocolConfig) -> tuple[DatasetBundle, DatasetBundle]:
    train = load_dataset(cfg.dataset_id, "train", cache_dir=cfg.data_root, seed=cfg.seed)
    test = load_dataset(cfg.dataset_id, "test", cache_dir=cfg.data_root, seed=cfg.seed)
    cfg.trigger.check_classes(train.num_classes)
    return _subset(train, cfg.train_size, cfg.seed), _subset(test, cfg.test_size, cfg.seed + 1)


def clean_holdout(cfg: ProtocolConfig, test: DatasetBundle) -> DatasetBundle:
    """The clean images handed to the clean-data defenses."""
    return _subset(test, cfg.defense_holdout, cfg.seed + 2)


def model_key(cfg: ProtocolConfig, seed: int, poisoned: bool) -> str:
    """Content hash of everything that determines a Phase-1 model."""
    doc = {
        "dataset": cfg.dataset_id,
        "train_size": cfg.train_size,
        "trigger": cfg.trigger.digest() if poisoned else None,
        "poison": dataclasses.asdict(cfg.poison) if poisoned else None,
        "train": cfg.train.to_dict(),
        "seed": seed,
    }
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _repeat_configs(cfg: ProtocolConfig, seed: int) -> tuple[TrainConfig, PoisonPolicy]:
    offset = seed - cfg.seed
    return (dataclasses.replace(cfg.train, seed=cfg.train.seed + offset),
            dataclasses.replace(cfg.poison, seed=cfg.poison.seed + offset))


def obtain_model(cfg: ProtocolConfig, train: DatasetBundle, seed: int,
                 poisoned: bool = True) -> ModelArtifact:
    """Train the Phase-1 model, or load it from the content-addressed cache."""
    path = cfg.output_dir / "models" / f"{'backdoor' if poisoned else 'clean'}-" \
        f"{model_key(cfg, seed, poisoned)}.pt"
    if path.exists():
        log.info("loading cached model %s", path)
        return ModelArtifact.load(path)
    train_cfg, policy = _repeat_configs(cfg, seed)
    data = train
    if poisoned:
        data, _ = poison_dataset(train, cfg.trigger, policy)
    log.info("training %s model (seed %d)", "backdoored" if poisoned else "clean", seed)
    artifact = train_classifier(normalize(data), train_cfg, poisoned=poisoned,
                                extra_meta={"protocol_seed": seed})
    artifact.save(path)
    return artifact


# --------------------------------------------------------------------------
# Phase 2
# --------------------------------------------------------------------------


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _defense_configs(cfg: ProtocolConfig, train: DatasetBundle, seed: int):
    configs = {}
    for entry in cfg.defenses:
        dcfg = make_config(entry.defense_id, entry.config)
        if entry.defense_id is DefenseId.SS and dcfg.eigen_ratio_threshold is None:
            clean_ref = build_module(obtain_model(cfg, train, seed, poisoned=False))
            threshold = calibrate_ss_threshold(clean_ref, train, dcfg.calibration_factor)
            log.info("SS threshold calibrated on the clean reference model: %.4f", threshold)
            dcfg = dataclasses.replace(dcfg, eigen_ratio_threshold=threshold)
        configs[entry.defense_id] = dcfg
    return configs


def _run_cell(cfg: ProtocolConfig, scheme: QuantScheme, defense_id: DefenseId, dcfg,
              artifact: ModelArtifact, metrics: MetricPair, clean: DatasetBundle,
              poisoned_train: DatasetBundle, seed: int) -> ExperimentRecord:
    start = time.perf_counter()
    try:
        # a private module per cell: some detectors attach forward hooks
        verdict = run_defense(defense_id, build_module(artifact), clean=clean, train=poisoned_train,
                              config=dcfg, seed=seed)
        error = None
    except Exception as exc:  # one crashing defense must not sink the sweep
        log.exception("%s / %s / %s failed", cfg.dataset_id, scheme.name.value, defense_id.value)
        verdict, error = None, f"{type(exc).__name__}: {exc}"
    return ExperimentRecord(cfg.dataset_id, scheme.name, defense_id, verdict, metrics,
                            time.perf_counter() - start, seed, error)


def run_protocol(cfg: ProtocolConfig,
                 on_record: Callable[[ExperimentRecord], None] | None = None) -> ProtocolResult:
    """Run every (seed, scheme, defense) cell not already in the record store."""
    store = RecordStore(cfg.records_path)
    done = store.completed_cells()
    todo = [c for c in cfg.cells() if c not in done]
    validations: dict[int, AttackValidation] = {}
    appended = 0
    if todo:
        train, test = load_splits(cfg)
        clean = clean_holdout(cfg, test)
        for seed in cfg.seeds():
            pending = {c for c in todo if c[3] == seed}
            if not pending:
                continue
            backdoored = obtain_model(cfg, train, seed)
            validation = validate_attack(build_module(backdoored), test, cfg.trigger, cfg.validity)
            validations[seed] = validation
            if not validation.passed:
                log.error("attack gate failed (seed %d): %s", seed, "; ".join(validation.failures))
                return ProtocolResult(ProtocolStatus.GATE_FAILED, _records_for(cfg, store),
                                      validations, appended)
            _, policy = _repeat_configs(cfg, seed)
            poisoned_train, _ = poison_dataset(train, cfg.trigger, policy)
            dcfgs = _defense_configs(cfg, train, seed)
            appended += _sweep(cfg, seed, pending, backdoored, test, clean, poisoned_train,
                               dcfgs, store, on_record)
    records = _records_for(cfg, store)
    status = ProtocolStatus.PARTIAL if any(r.error for r in records) else ProtocolStatus.OK
    return ProtocolResult(status, records, validations, appended)


def _sweep(cfg, seed, pending, backdoored, test, clean, poisoned_train, dcfgs, store,
           on_record) -> int:
    appended = 0
    pool = ThreadPoolExecutor(max_workers=worker_count())
    try:
        for scheme in cfg.schemes:
            entries = [d for d in cfg.defenses
                       if (cfg.dataset_id, scheme.name.value, d.defense_id.value, seed) in pending]
            if not entries:
                continue
            artifact = quantize_model(backdoored, scheme)
            metrics = metrics_for(artifact, test, cfg.trigger)
            log.info("%s %s: CA %.4f ASR %.4f", cfg.dataset_id, scheme.name.value,
                     metrics.clean_accuracy, metrics.attack_success_rate)
            futures = [pool.submit(_run_cell, cfg, scheme, d.defense_id, dcfgs[d.defense_id],
                                   artifact, metrics, clean, poisoned_train, seed)
                       for d in entries]
            # append in declared order regardless of completion order
            for fut in futures:
                record = fut.result()
                store.append(record)
                appended += 1
                if on_record is not None:
                    on_record(record)
    except BaseException:
        pool.shutdown(wait=True, cancel_futures=True)
        raise
    pool.shutdown(wait=True)
    return appended


def _records_for(cfg: ProtocolConfig, store: RecordStore) -> list[ExperimentRecord]:
    wanted = set(cfg.cells())
    return [r for r in store if r.cell in wanted]

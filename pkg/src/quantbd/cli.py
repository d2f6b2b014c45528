"""Command-line entry point: ``quantbd <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import ingestion
from .attack import (PoisonPolicy, TrainConfig, evaluate_asr, evaluate_clean_accuracy,
                     metrics_for, poison_dataset, train_classifier)
from .datamodel import (DefenseId, ExperimentRecord, ModelArtifact, QuantScheme, RecordStore,
                        TriggerSpec)
from .defenses import DATA_ACCESS, calibrate_ss_threshold, make_config, run_defense
from .harness import ProtocolConfig, run_protocol
from .ingestion import DatasetBundle, load_dataset, normalize
from .quant import quantize_model
from .report import FORMATS, emit_report

log = logging.getLogger("quantbd")


def _load_yaml(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise SystemExit(f"{path}: expected a mapping at the top level")
    return doc


def _trigger(args, num_classes: int | None = None) -> TriggerSpec:
    spec = TriggerSpec.badnet(size=args.trigger_size, target_class=args.target)
    if num_classes is not None:
        spec.check_classes(num_classes)
    return spec


def _dataset(args, split: str, name: str | None = None) -> DatasetBundle:
    return load_dataset(name or args.dataset, split, cache_dir=args.data_root, seed=args.data_seed)


def _save_bundle(bundle: DatasetBundle, path: Path, **extra) -> None:
    np.savez_compressed(path, images=bundle.images.numpy(), labels=bundle.labels.numpy(),
                        num_classes=bundle.num_classes, name=bundle.name,
                        normalization=np.asarray(bundle.normalization), **extra)


def _load_bundle(path: Path) -> DatasetBundle:
    with np.load(path) as z:
        return DatasetBundle(torch.from_numpy(z["images"]), torch.from_numpy(z["labels"]).long(),
                             int(z["num_classes"]), "train",
                             tuple(tuple(float(v) for v in row) for row in z["normalization"]),
                             name=str(z["name"]))


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_poison(args) -> int:
    train = _dataset(args, "train")
    spec = _trigger(args, train.num_classes)
    poisoned, index = poison_dataset(train, spec, PoisonPolicy(args.rate, not args.no_relabel,
                                                               args.seed))
    _save_bundle(poisoned, args.out, poison_index=index.numpy())
    _print_json({"out": str(args.out), "n": len(poisoned), "n_poisoned": int(index.numel()),
                 "target_class": spec.target_class})
    return 0


def cmd_train(args) -> int:
    doc = _load_yaml(args.config)
    name = doc.get("dataset_id", args.dataset)
    train = load_dataset(name, "train", cache_dir=args.data_root, seed=int(doc.get("seed", 0)))
    if doc.get("train_size"):
        gen = torch.Generator().manual_seed(int(doc.get("seed", 0)))
        train = train.subset(torch.randperm(len(train), generator=gen)[:doc["train_size"]].sort().values)
    cfg = TrainConfig(**(doc.get("train") or {}))
    poisoned = not args.clean
    if poisoned:
        trig = dict(doc.get("trigger") or {})
        trig.pop("type", None)
        spec = TriggerSpec.badnet(**trig)
        train, _ = poison_dataset(train, spec, PoisonPolicy(**(doc.get("poison") or {})))
    artifact = train_classifier(normalize(train), cfg, poisoned=poisoned)
    artifact.save(args.out)
    _print_json({"out": str(args.out), "content_hash": artifact.content_hash,
                 "poisoned": poisoned})
    return 0


def cmd_eval(args) -> int:
    artifact = ModelArtifact.load(args.model)
    test = _dataset(args, "test", args.dataset or artifact.training_meta.get("dataset_id"))
    if args.metric == "ca":
        value = evaluate_clean_accuracy(artifact, normalize(test))
    else:
        value = evaluate_asr(artifact, test, _trigger(args, test.num_classes))
    _print_json({"metric": args.metric, "value": value, "model": str(args.model)})
    return 0


def cmd_quantize(args) -> int:
    artifact = ModelArtifact.load(args.model)
    scheme = QuantScheme.from_short(args.scheme, args.emulate_activations, args.linear_only)
    out = quantize_model(artifact, scheme)
    out.save(args.out)
    _print_json({"out": str(args.out), "scheme": scheme.to_dict(),
                 "content_hash": out.content_hash})
    return 0


def cmd_defend(args) -> int:
    defense = DefenseId.parse(args.defense)
    artifact = ModelArtifact.load(args.model)
    name = args.dataset or artifact.training_meta.get("dataset_id")
    test = _dataset(args, "test", name)
    spec = _trigger(args, test.num_classes)
    gen = torch.Generator().manual_seed(args.seed)
    clean = test.subset(torch.randperm(len(test), generator=gen)[:args.holdout].sort().values)

    overrides = _load_yaml(args.config) if args.config else {}
    cfg = make_config(defense, overrides)
    train = None
    if DATA_ACCESS[defense] == "train":
        if args.train_data is None:
            raise SystemExit(f"{defense.value} inspects the training set; pass --train-data "
                             "(written by `quantbd poison`)")
        train = _load_bundle(args.train_data)
    if defense is DefenseId.SS and cfg.eigen_ratio_threshold is None:
        if args.reference is None:
            raise SystemExit("SS needs eigen_ratio_threshold in --config or a clean --reference "
                             "model to calibrate against")
        clean_train = _dataset(args, "train", name)
        threshold = calibrate_ss_threshold(ModelArtifact.load(args.reference), clean_train,
                                           cfg.calibration_factor)
        cfg = dataclasses.replace(cfg, eigen_ratio_threshold=threshold)

    start = time.perf_counter()
    verdict = run_defense(defense, artifact, clean=clean, train=train, config=cfg, seed=args.seed)
    elapsed = time.perf_counter() - start
    _print_json(verdict.to_dict())
    if args.records:
        scheme = artifact.quant_scheme or QuantScheme.fp32()
        record = ExperimentRecord(name, scheme.name, defense, verdict,
                                  metrics_for(artifact, test, spec), elapsed, args.seed)
        RecordStore(args.records).append(record)
    return 0


def cmd_run(args) -> int:
    cfg = ProtocolConfig.from_yaml(args.config)
    changes = {}
    if args.repeats is not None:
        changes["repeats"] = args.repeats
    if args.data_root is not None:
        changes["data_root"] = args.data_root
    if args.output_dir is not None:
        changes["output_dir"] = args.output_dir
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    result = run_protocol(cfg)
    summary = {
        "status": result.status.name,
        "records": len(result.records),
        "new_records": result.new_records,
        "records_path": str(cfg.records_path),
        "attack": {str(seed): {"passed": v.passed, **dataclasses.asdict(v.metrics),
                               "failures": list(v.failures)}
                   for seed, v in result.validations.items()},
    }
    _print_json(summary)
    return int(result.status)


def cmd_report(args) -> int:
    records = RecordStore(args.inp).read_all()
    if not records:
        raise SystemExit(f"{args.inp}: no records")
    out = args.out or Path(args.inp).parent / "report"
    for path in emit_report(records, args.format, out, ascii_only=args.ascii):
        print(path)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_trigger_args(p) -> None:
    p.add_argument("--target", type=int, default=0, help="backdoor target class")
    p.add_argument("--trigger-size", type=int, default=3, help="side of the square patch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantbd", description=__doc__)
    parser.add_argument("--data-root", type=Path, default=None,
                        help=f"dataset cache root (default ${ingestion.DATA_ROOT_ENV} or "
                             "~/.cache/quantbd)")
    parser.add_argument("--data-seed", type=int, default=0,
                        help="seed of the synthetic toy dataset")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("poison", help="write a BadNet-poisoned copy of a training set")
    p.add_argument("--dataset", default="toy", choices=["toy", "cifar10", "gtsrb"])
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-relabel", action="store_true", help="keep the original labels")
    p.add_argument("--out", type=Path, required=True, help=".npz output")
    _add_trigger_args(p)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("train", help="train a (backdoored) classifier from a config file")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path (.pt)")
    p.add_argument("--clean", action="store_true", help="train on unpoisoned data")
    p.add_argument("--dataset", default="toy", help="used when the config names none")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean accuracy or attack success rate of a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--metric", choices=["ca", "asr"], required=True)
    p.add_argument("--dataset", default=None, help="defaults to the training dataset")
    _add_trigger_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="post-training quantization of a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--scheme", choices=["fp32", "int8", "int4"], required=True)
    p.add_argument("--emulate-activations", action="store_true",
                   help="INT8: also fake-quantize linear-layer inputs at run time")
    p.add_argument("--linear-only", action="store_true",
                   help="INT8: quantize only linear layers")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("defend", help="run one detector and print its verdict")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--defense", choices=["nc", "ac", "strip", "ss", "fp"], required=True)
    p.add_argument("--config", type=Path, default=None, help="detector config overrides (yaml)")
    p.add_argument("--dataset", default=None, help="defaults to the training dataset")
    p.add_argument("--train-data", type=Path, default=None,
                   help="poisoned training set (.npz from `poison`) for AC and SS")
    p.add_argument("--reference", type=Path, default=None,
                   help="clean reference checkpoint for SS threshold calibration")
    p.add_argument("--holdout", type=int, default=1000, help="clean hold-out size")
    p.add_argument("--records", type=Path, default=None, help="also append to this record store")
    p.add_argument("--seed", type=int, default=0)
    _add_trigger_args(p)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("run", help="run the full protocol from an experiment config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--output-dir", type=Path, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render records as tables, csv, json or plots")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="records .jsonl")
    p.add_argument("--format", choices=[*FORMATS, "all"], default="markdown")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--ascii", action="store_true", help="Y/N instead of check marks")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

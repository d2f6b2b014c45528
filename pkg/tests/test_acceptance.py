"""Acceptance criteria, one group per criterion.

Each test carries ``@pytest.mark.criterion(n, title)``; the terminal summary
prints one PASS/FAIL/SKIP line per criterion.  Runtime budgets are asserted
alongside the numeric checks.
"""

import dataclasses
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml
from hypothesis import given, settings, strategies as st

from oracles import eigh_spectral_ratio, mad_index, oracle_quantize, uniform_entropy
from quantbd.attack import apply_trigger, evaluate_clean_accuracy, metrics_for
from quantbd.cli import main
from quantbd.datamodel import (DefenseId, Granularity, QuantScheme, RecordStore, SchemeName,
                               check_metric_consistency)
from quantbd.defenses import (NCConfig, ac_from_representations, fine_pruning_dormancy,
                              mad_anomaly_indices, neural_cleanse, prediction_entropy,
                              spectral_ratio)
from quantbd.harness import ProtocolConfig, ProtocolStatus, clean_holdout, run_protocol
from quantbd.ingestion import normalize
from quantbd.quant import qrange, quantize_dequantize, quantize_model
from quantbd.report import detection_grid, detection_rates, emit_report
from test_defenses import FP32_NORMS, INT4_NORMS, ChannelModel, blobs, raw_bundle, spiked
from test_quant import BITS, GRAN
from test_report import DETECTED, record

ROOT = Path(__file__).resolve().parents[1]
criterion = pytest.mark.criterion


# --------------------------------------------------------------------------
# 1. quantizer oracle equivalence
# --------------------------------------------------------------------------


@criterion(1, "quantizer matches the scalar oracle on 100 random tensors")
def test_quantizer_oracle_equivalence():
    rng = np.random.default_rng(2024)
    sizes = np.unique(np.round(np.logspace(0, 5, 99)).astype(int)).tolist()
    sizes = (sizes * 2)[:99] + [10**5]
    start = time.perf_counter()
    for i, n in enumerate(sizes):
        bits = (2, 4, 8)[i % 3]
        per_channel = bool(i % 2)
        channels = int(rng.integers(1, 65)) if n >= 64 else 1
        n = max(n - n % channels, channels)
        scale = 10.0 ** rng.uniform(-6, 3)
        x = (rng.standard_normal(n) * scale).astype(np.float32).reshape(channels, -1)
        if i % 10 == 0:
            x[0] = 0.0  # a zero channel
        gran = Granularity.PER_CHANNEL if per_channel else Granularity.PER_TENSOR
        got = quantize_dequantize(torch.from_numpy(x), bits, gran).dequantized_values.numpy()
        want = np.asarray(oracle_quantize(x.ravel().tolist(), x.shape, bits, per_channel),
                          dtype=np.float32)
        # IEEE equality: torch may produce -0.0 where the oracle gives +0.0
        assert np.array_equal(got.ravel(), want), f"tensor {i}: n={n} bits={bits}"
    assert max(sizes) == 10**5 and len(sizes) == 100
    assert time.perf_counter() - start < 30


# --------------------------------------------------------------------------
# 2. quantizer invariants
# --------------------------------------------------------------------------


@criterion(2, "quantizer invariants over >= 10^4 random cases")
def test_quantizer_invariants():
    cases = []

    # hypothesis picks seed, shape and magnitude; numpy fills the tensor, which
    # keeps generation cheap enough for 10^4 cases
    @settings(max_examples=10_000, database=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 16),
           st.integers(-6, 6), BITS, GRAN)
    def check(seed, channels, width, exponent, bits, gran):
        cases.append(None)
        base = np.random.default_rng(seed).uniform(-1, 1, size=(channels, width))
        x = torch.from_numpy((base * 10.0 ** exponent).astype(np.float32))
        view = quantize_dequantize(x, bits, gran)
        out = view.dequantized_values
        # idempotence
        assert torch.equal(quantize_dequantize(out, bits, gran).dequantized_values, out)
        # distinct values per channel
        for row in quantize_dequantize(x, bits, Granularity.PER_CHANNEL).dequantized_values:
            assert row.unique().numel() <= 2 ** bits
        # rounding error on non-clamped elements
        s = view.scales if view.scales.dim() == 0 else view.scales.view(-1, 1)
        lo, hi = qrange(bits)
        q = (x / s).round()
        unclamped = (q >= lo) & (q <= hi)
        slack = 4 * torch.finfo(torch.float32).eps * torch.maximum(x.abs(), s.expand_as(x))
        assert torch.all(((x - out).abs() <= s / 2 + slack)[unclamped])
        # monotone under a shared scale
        flat = x.flatten()
        shared = quantize_dequantize(flat, bits).dequantized_values[torch.argsort(flat)]
        assert torch.all(shared[1:] >= shared[:-1])

    start = time.perf_counter()
    check()
    elapsed = time.perf_counter() - start
    print(f"{len(cases)} cases in {elapsed:.1f} s")
    assert len(cases) >= 10_000 and elapsed < 60


# --------------------------------------------------------------------------
# 3. MAD replay
# --------------------------------------------------------------------------


@criterion(3, "MAD detector replay on reference norm vectors")
def test_mad_replay():
    start = time.perf_counter()
    idx, flagged = mad_anomaly_indices(FP32_NORMS)
    assert np.median(FP32_NORMS) == pytest.approx(282.1)
    assert abs(idx[0] - 2.91) <= 0.05 and flagged == {0}
    assert idx[0] == pytest.approx(mad_index(FP32_NORMS, 0))
    idx, flagged = mad_anomaly_indices([27.9] * 10)
    assert flagged == set()
    idx, flagged = mad_anomaly_indices(INT4_NORMS)
    assert np.median(INT4_NORMS) == pytest.approx(246.1)
    assert np.median(np.abs(np.asarray(INT4_NORMS) - 246.1)) == pytest.approx(33.9)
    assert abs(idx[0] - 0.46) <= 0.05 and flagged == set()
    assert time.perf_counter() - start < 1


# --------------------------------------------------------------------------
# 4. desk-scale attack pipeline
# --------------------------------------------------------------------------


@criterion(4, "desk-scale backdoor: ASR >= 0.90, CA within 5 points of clean")
@pytest.mark.slow
def test_desk_attack(desk):
    assert desk.cfg.train.epochs <= 5 and desk.cfg.dataset_id == "toy"
    backdoored = metrics_for(desk.backdoored, desk.test, desk.cfg.trigger)
    clean_ca = evaluate_clean_accuracy(desk.clean, normalize(desk.test))
    print(f"backdoored CA {backdoored.clean_accuracy:.4f} ASR "
          f"{backdoored.attack_success_rate:.4f}; clean CA {clean_ca:.4f}")
    assert backdoored.attack_success_rate >= 0.90
    assert abs(backdoored.clean_accuracy - clean_ca) <= 0.05
    once = apply_trigger(desk.test.images, desk.cfg.trigger)
    assert torch.equal(apply_trigger(once, desk.cfg.trigger), once)
    outside = desk.cfg.trigger.mask == 0
    assert torch.equal(once[:, :, outside], desk.test.images[:, :, outside])
    assert desk.train_seconds <= 15 * 60


# --------------------------------------------------------------------------
# 5. ASR persistence under INT8
# --------------------------------------------------------------------------


@criterion(5, "INT8 keeps ASR and CA within 2 points of FP32")
@pytest.mark.slow
def test_int8_persistence(desk):
    start = time.perf_counter()
    fp32 = metrics_for(desk.backdoored, desk.test, desk.cfg.trigger)
    int8 = metrics_for(quantize_model(desk.backdoored, QuantScheme.int8_dynamic()), desk.test,
                       desk.cfg.trigger)
    print(f"FP32 {fp32}; INT8 {int8}")
    assert abs(fp32.attack_success_rate - int8.attack_success_rate) <= 0.02
    assert abs(fp32.clean_accuracy - int8.clean_accuracy) <= 0.02
    assert time.perf_counter() - start <= 120


# --------------------------------------------------------------------------
# 6. Neural Cleanse at desk scale
# --------------------------------------------------------------------------


@criterion(6, "NC singles out the target class; clean model not flagged")
@pytest.mark.slow
def test_nc_directional(desk, desk_sweep):
    nc_cfg = [d for d in desk.cfg.defenses if d.defense_id is DefenseId.NC][0].config
    # the sweep's FP32 cell is NC on the unquantized backdoored model
    (cell,) = [r for r in desk_sweep.result.records
               if r.scheme is SchemeName.FP32 and r.defense_id is DefenseId.NC]
    diag = cell.verdict.diagnostics
    norms = np.asarray(diag["norms"])
    target = desk.cfg.trigger.target_class
    print("backdoored norms", np.round(norms, 1).tolist())
    assert np.argmin(norms) == target and np.sum(norms == norms.min()) == 1
    assert diag["anomaly_indices"][target] > 2.0
    start = time.perf_counter()
    clean = clean_holdout(desk.cfg, desk.test)
    verdict = neural_cleanse(desk.clean, clean, NCConfig(**nc_cfg), seed=desk.cfg.seed)
    print("clean norms", np.round(verdict.diagnostics["norms"], 1).tolist())
    assert not verdict.detected and verdict.diagnostics["flagged_classes"] == []
    assert cell.wall_time_seconds + time.perf_counter() - start <= 20 * 60


# --------------------------------------------------------------------------
# 7. detector unit properties
# --------------------------------------------------------------------------


@criterion(7, "detector unit properties: entropy, SS spike, AC blobs, FP dormancy")
def test_detector_units():
    start = time.perf_counter()
    assert abs(prediction_entropy(np.full(10, 0.1)) - uniform_entropy(10)) <= 1e-9
    d = 50
    iso, spike = spiked(shift=0.0, d=d), spiked(shift=10.0, d=d)
    assert 0.5 / (d - 1) <= eigh_spectral_ratio(iso) <= 2.0 / (d - 1)
    assert spectral_ratio(iso) == pytest.approx(eigh_spectral_ratio(iso), rel=1e-9)
    assert eigh_spectral_ratio(spike) >= 3 * eigh_spectral_ratio(iso)
    assert spectral_ratio(spike) >= 3 * spectral_ratio(iso)
    reps, labels = blobs()
    verdict = ac_from_representations(reps, labels, 2)
    assert verdict.diagnostics["flagged_classes"] == [1]
    assert not fine_pruning_dormancy(ChannelModel([1.0] * 100), raw_bundle()).detected
    assert fine_pruning_dormancy(ChannelModel([0.0] + [1.0] * 99), raw_bundle()).detected
    assert time.perf_counter() - start < 120


# --------------------------------------------------------------------------
# 8. protocol mechanics
# --------------------------------------------------------------------------


@criterion(8, "15-record sweep, kill-and-resume, gate exit code 2")
@pytest.mark.slow
def test_full_sweep(desk_sweep):
    result = desk_sweep.result
    assert result.status is ProtocolStatus.OK
    assert len(result.records) == 15 and len({r.cell for r in result.records}) == 15
    assert check_metric_consistency(result.records) == []
    assert all(r.error is None for r in result.records)
    assert len(RecordStore(desk_sweep.cfg.records_path).read_all()) == 15
    assert desk_sweep.seconds <= 45 * 60


_budget = {}


@criterion(8, "15-record sweep, kill-and-resume, gate exit code 2")
@pytest.mark.slow
def test_kill_and_resume(desk, desk_sweep, tmp_path):
    start = time.perf_counter()
    cfg = dataclasses.replace(desk.cfg, output_dir=tmp_path)
    shutil.copytree(desk.cfg.output_dir / "models", tmp_path / "models")
    seen = []

    def kill_after_eight(rec):
        seen.append(rec)
        if len(seen) == 8:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        run_protocol(cfg, on_record=kill_after_eight)
    assert len(RecordStore(cfg.records_path).read_all()) == 8
    result = run_protocol(cfg)
    assert result.new_records == 7 and result.status is ProtocolStatus.OK
    records = RecordStore(cfg.records_path).read_all()
    assert len(records) == 15 and {r.cell for r in records} == set(cfg.cells())
    assert check_metric_consistency(records) == []
    # a third run finds nothing to do
    assert run_protocol(cfg).new_records == 0
    _budget["resume"] = time.perf_counter() - start
    assert desk_sweep.seconds + _budget["resume"] <= 45 * 60


@criterion(8, "15-record sweep, kill-and-resume, gate exit code 2")
@pytest.mark.slow
def test_gate_exit_code(tmp_path, capsys):
    doc = yaml.safe_load((ROOT / "configs" / "desk.yaml").read_text())
    doc["poison"]["poison_rate"] = 0.0  # an unpoisoned model cannot pass the ASR gate
    doc["output_dir"] = str(tmp_path / "out")
    path = tmp_path / "gate.yaml"
    path.write_text(yaml.safe_dump(doc))
    assert main(["run", "--config", str(path)]) == 2
    assert "GATE_FAILED" in capsys.readouterr().out
    assert not (tmp_path / "out" / "records.jsonl").exists()


# --------------------------------------------------------------------------
# 9. report fidelity
# --------------------------------------------------------------------------


@criterion(9, "report reproduces the reference detection grid and rates")
def test_report_fidelity(tmp_path):
    start = time.perf_counter()
    records = [record(d, s, x, (d, s, x) in DETECTED)
               for d in ("cifar10", "gtsrb") for s in ("FP32", "INT8_DYNAMIC", "INT4_SIM")
               for x in ("NC", "AC", "STRIP", "SS", "FP")]
    grid = detection_grid(records).splitlines()
    assert grid[0] == "| Dataset | Quant. | NC | AC | STRIP | SS | FP |"
    assert grid[2:] == [
        "| cifar10 | FP32 | ✓ | ✗ | ✗ | ✗ | ✗ |",
        "| cifar10 | INT8 | ✗ | ✗ | ✗ | ✗ | ✗ |",
        "| cifar10 | INT4 | ✗ | ✗ | ✗ | ✗ | ✗ |",
        "| gtsrb | FP32 | ✓ | ✗ | ✗ | ✗ | ✗ |",
        "| gtsrb | INT8 | ✗ | ✗ | ✗ | ✗ | ✗ |",
        "| gtsrb | INT4 | ✓ | ✗ | ✗ | ✗ | ✗ |",
    ]
    d, n = detection_rates(records)["FP32"]
    assert (d, n) == (2, 10) and d / n == 0.2
    assert detection_rates(records)["INT8_DYNAMIC"] == (0, 10)
    written = emit_report(records, "all", tmp_path)
    assert "FP32 20.0% (2/10), INT8 0.0% (0/10)" in (tmp_path / "report.md").read_text()
    assert len(written) == 5
    assert time.perf_counter() - start < 5


# --------------------------------------------------------------------------
# 10. full-scale reproduction (GPU, hours)
# --------------------------------------------------------------------------

REFERENCE_QUALITY = {  # scheme -> (CA, ASR)
    "cifar10": {"FP32": (0.908, 0.998), "INT8_DYNAMIC": (0.908, 0.998),
                "INT4_SIM": (0.527, 0.910)},
    "gtsrb": {"FP32": (0.960, 0.994), "INT8_DYNAMIC": (0.960, 0.994),
              "INT4_SIM": (0.956, 0.993)},
}


@criterion(10, "full-scale reproduction (optional, GPU)")
@pytest.mark.fullscale
@pytest.mark.parametrize("dataset", ["cifar10", "gtsrb"])
def test_full_scale(dataset):
    cfg = ProtocolConfig.from_yaml(ROOT / "configs" / f"{dataset}_full.yaml")
    result = run_protocol(cfg)
    assert result.status is ProtocolStatus.OK
    for rec in result.records:
        ca, asr = REFERENCE_QUALITY[dataset][rec.scheme.value]
        assert math.isclose(rec.metrics.clean_accuracy, ca, abs_tol=0.02)
        assert math.isclose(rec.metrics.attack_success_rate, asr, abs_tol=0.02)
    (nc,) = [r for r in result.records
             if r.scheme is SchemeName.FP32 and r.defense_id is DefenseId.NC]
    assert nc.verdict.detected

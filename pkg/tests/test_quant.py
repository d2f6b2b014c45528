import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from torch import nn

from oracles import oracle_quantize
from quantbd.datamodel import Granularity, QuantScheme
from quantbd.models import artifact_from_module, build_module, create_model
from quantbd.quant import (UnsupportedLayerError, _weight_targets, compute_scale,
                           emulate_dynamic_activation_quant, quantize_dequantize, quantize_model,
                           qrange)

BITS = st.sampled_from([2, 4, 8])
GRAN = st.sampled_from(list(Granularity))


@st.composite
def weight_tensors(draw, max_channels=8, max_per_channel=64):
    c = draw(st.integers(1, max_channels))
    n = draw(st.integers(1, max_per_channel))
    base = draw(arrays(np.float32, (c, n), elements=st.floats(-1, 1, width=32)))
    exponent = draw(st.integers(-6, 6))
    return torch.from_numpy(base * np.float32(10.0 ** exponent))


def test_qrange():
    assert qrange(8) == (-128, 127)
    assert qrange(4) == (-8, 7)
    assert qrange(2) == (-2, 1)


def test_scale_is_max_abs_over_qmax():
    x = torch.tensor([[1.0, -2.54], [0.5, 0.25]])
    assert compute_scale(x, 8).item() == pytest.approx(2.54 / 127)
    per_ch = compute_scale(x, 4, Granularity.PER_CHANNEL)
    assert torch.allclose(per_ch, torch.tensor([2.54 / 7, 0.5 / 7]))


def test_all_zero_slice_maps_to_zero():
    x = torch.zeros(3, 4)
    x[1] = torch.linspace(-1, 1, 4)
    view = quantize_dequantize(x, 4, Granularity.PER_CHANNEL)
    assert view.scales[0] == 1.0 and view.scales[2] == 1.0
    assert torch.equal(view.dequantized_values[0], torch.zeros(4))


def test_rounding_is_half_to_even():
    # s = 1 exactly: max |x| = 127 at 8 bits
    x = torch.tensor([127.0, 0.5, 1.5, 2.5, -0.5, -1.5])
    out = quantize_dequantize(x, 8).dequantized_values
    assert out.tolist() == [127.0, 0.0, 2.0, 2.0, -0.0, -2.0]


def test_empty_and_bad_bits():
    with pytest.raises(ValueError):
        quantize_dequantize(torch.ones(3), 1)
    with pytest.raises(ValueError):
        compute_scale(torch.empty(0), 8)


@given(weight_tensors(), BITS, GRAN)
def test_matches_scalar_oracle(x, bits, gran):
    got = quantize_dequantize(x, bits, gran).dequantized_values.numpy().ravel()
    want = oracle_quantize(x.numpy().ravel().tolist(), tuple(x.shape), bits,
                           gran is Granularity.PER_CHANNEL)
    # IEEE equality: -0.0 and +0.0 are the same value
    assert np.array_equal(got, np.asarray(want, dtype=np.float32))


@given(weight_tensors(), BITS, GRAN)
def test_idempotent(x, bits, gran):
    once = quantize_dequantize(x, bits, gran).dequantized_values
    twice = quantize_dequantize(once, bits, gran).dequantized_values
    assert torch.equal(once, twice)


@given(weight_tensors(), BITS)
def test_distinct_values_per_channel(x, bits):
    out = quantize_dequantize(x, bits, Granularity.PER_CHANNEL).dequantized_values
    for row in out:
        assert row.unique().numel() <= 2 ** bits


@given(weight_tensors(), BITS, GRAN)
def test_rounding_error_bound(x, bits, gran):
    view = quantize_dequantize(x, bits, gran)
    s = view.scales if view.scales.dim() == 0 else view.scales.view(-1, 1)
    lo, hi = qrange(bits)
    quotient = x / s
    q = torch.round(quotient)
    unclamped = (q >= lo) & (q <= hi)
    # exact in the quotient domain
    assert torch.all((quotient - q).abs()[unclamped] <= 0.5)
    # value domain: s/2 up to a few float32 ulps of the operands
    slack = 4 * torch.finfo(torch.float32).eps * torch.maximum(x.abs(), s.expand_as(x))
    err = (x - view.dequantized_values).abs()
    assert torch.all((err <= s / 2 + slack)[unclamped])


@given(weight_tensors(), BITS)
def test_monotone_under_shared_scale(x, bits):
    flat = x.flatten()
    order = torch.argsort(flat)
    out = quantize_dequantize(flat, bits).dequantized_values[order]
    assert torch.all(out[1:] >= out[:-1])


@given(weight_tensors(), BITS)
def test_integers_lie_in_range(x, bits):
    ints = quantize_dequantize(x, bits, Granularity.PER_CHANNEL).integers
    lo, hi = qrange(bits)
    assert ints.min() >= lo and ints.max() <= hi
    assert torch.equal(ints, ints.round())


# --------------------------------------------------------------------------
# model level
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_artifact():
    torch.manual_seed(0)
    net = create_model("small_cnn", 10)
    # non-trivial BN statistics
    for m in net.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.running_mean.uniform_(-0.5, 0.5)
            m.running_var.uniform_(0.5, 2.0)
            m.weight.data.uniform_(0.5, 1.5)
    return artifact_from_module(net, "small_cnn", 10, {"dataset_id": "toy"})


def test_fp32_is_identity(small_artifact):
    out = quantize_model(small_artifact, QuantScheme.fp32())
    assert out.content_hash == small_artifact.content_hash
    assert out.quant_scheme == QuantScheme.fp32()


def test_int8_touches_only_conv_and_linear_weights(small_artifact):
    out = quantize_model(small_artifact, QuantScheme.int8_dynamic())
    changed = {k for k in small_artifact.parameters
               if not torch.equal(small_artifact.parameters[k], out.parameters[k])}
    assert changed
    for key in changed:
        assert key.endswith(".weight")
    targets = set(_weight_targets(create_model("small_cnn", 10), linear_only=False))
    assert changed <= targets
    for key in small_artifact.parameters:
        if "running" in key or key.endswith(".bias") or key not in targets:
            assert torch.equal(small_artifact.parameters[key], out.parameters[key])
    for key in targets:
        assert out.parameters[key].unique().numel() <= 256


def test_int4_is_per_channel(small_artifact):
    out = quantize_model(small_artifact, QuantScheme.int4_sim())
    for key in _weight_targets(create_model("small_cnn", 10), linear_only=False):
        w = out.parameters[key]
        for row in w.reshape(w.shape[0], -1):
            assert row.unique().numel() <= 16


def test_linear_only(small_artifact):
    out = quantize_model(small_artifact, QuantScheme.int8_dynamic(linear_only=True))
    assert torch.equal(out.parameters["body.0.weight"], small_artifact.parameters["body.0.weight"])
    assert not torch.equal(out.parameters["head.weight"], small_artifact.parameters["head.weight"])


def test_source_artifact_untouched(small_artifact):
    before = small_artifact.content_hash
    quantize_model(small_artifact, QuantScheme.int4_sim())
    assert small_artifact.content_hash == before
    assert small_artifact.quant_scheme is None


def test_scheme_recorded_in_sidecar(small_artifact, tmp_path):
    out = quantize_model(small_artifact, QuantScheme.int4_sim())
    path = out.save(tmp_path / "m.pt")
    from quantbd.datamodel import ModelArtifact

    assert ModelArtifact.load(path).quant_scheme == QuantScheme.int4_sim()


def test_unsupported_layer_is_named():
    net = nn.Sequential(nn.Conv2d(3, 4, 3), nn.Embedding(10, 4), nn.PReLU())
    with pytest.raises(UnsupportedLayerError) as err:
        _weight_targets(net, linear_only=False)
    assert "1 (Embedding)" in str(err.value) and "2 (PReLU)" in str(err.value)


def test_activation_emulation(small_artifact):
    scheme = QuantScheme.int8_dynamic(emulate_activations=True)
    emulated = build_module(quantize_model(small_artifact, scheme))
    plain = build_module(quantize_model(small_artifact, QuantScheme.int8_dynamic()))
    x = torch.rand(16, 3, 32, 32)
    a, b = emulated(x), plain(x)
    assert not torch.equal(a, b)
    assert torch.allclose(a, b, atol=0.05 * b.abs().max().item())
    feats = torch.randn(4, 64)
    assert torch.equal(emulate_dynamic_activation_quant(feats),
                       quantize_dequantize(feats, 8).dequantized_values)

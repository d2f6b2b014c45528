"""Uniform symmetric quantize-dequantize and the model-level schemes.

``Q_b(v; s) = s * clamp(round(v / s), -2**(b-1), 2**(b-1) - 1)`` with
``s = max|v| / (2**(b-1) - 1)``.  Rounding is half-to-even (``torch.round``).
An all-zero slice gets the sentinel scale 1.0 so Q is the zero map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .datamodel import Granularity, ModelArtifact, QuantScheme, SchemeName

_QUANTIZABLE = (nn.Conv2d, nn.Linear)
# modules that own parameters but are intentionally left at full precision
_PASSTHROUGH = (nn.BatchNorm1d, nn.BatchNorm2d, nn.LayerNorm, nn.GroupNorm)


@dataclass(frozen=True, eq=False)
class QuantizedTensorView:
    dequantized_values: torch.Tensor
    scales: torch.Tensor  # 0-d for per-tensor, [C_out] for per-channel
    bits: int

    @property
    def integers(self) -> torch.Tensor:
        return torch.round(self.dequantized_values / _broadcast(self.scales, self.dequantized_values))


def qrange(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def _broadcast(scales: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    if scales.dim() == 0:
        return scales
    return scales.view(-1, *([1] * (values.dim() - 1)))


def compute_scale(values: torch.Tensor, bits: int, granularity=Granularity.PER_TENSOR) -> torch.Tensor:
    if values.numel() == 0:
        raise ValueError("cannot compute a scale for an empty tensor")
    granularity = Granularity(granularity)
    qmax = 2 ** (bits - 1) - 1
    if granularity is Granularity.PER_TENSOR or values.dim() == 0:
        max_abs = values.abs().max()
    else:
        max_abs = values.abs().reshape(values.shape[0], -1).max(dim=1).values
    scale = max_abs / qmax
    return torch.where(max_abs == 0, torch.ones_like(scale), scale)


def quantize_dequantize(values: torch.Tensor, bits: int,
                        granularity=Granularity.PER_TENSOR) -> QuantizedTensorView:
    if bits < 2:
        raise ValueError("bits must be >= 2")
    values = torch.as_tensor(values)
    scales = compute_scale(values, bits, granularity)
    lo, hi = qrange(bits)
    s = _broadcast(scales, values)
    q = torch.clamp(torch.round(values / s), lo, hi)
    return QuantizedTensorView(dequantized_values=s * q, scales=scales, bits=bits)


def emulate_dynamic_activation_quant(layer_input: torch.Tensor, bits: int = 8) -> torch.Tensor:
    """Quantize-dequantize with a per-batch scale taken from this input's max-abs."""
    return quantize_dequantize(layer_input, bits, Granularity.PER_TENSOR).dequantized_values


def attach_activation_emulation(model: nn.Module, bits: int = 8) -> list:
    handles = []
    for module in model.modules():
        if isinstance(module, nn.Linear):
            handles.append(module.register_forward_pre_hook(
                lambda _m, args: (emulate_dynamic_activation_quant(args[0], bits),) + args[1:]))
    return handles


class UnsupportedLayerError(ValueError):
    def __init__(self, names: list[str]):
        self.names = names
        super().__init__("unsupported parameterized layers: " + ", ".join(names))


def _weight_targets(module: nn.Module, linear_only: bool) -> list[str]:
    """State-dict keys of weights to quantize; raises on unknown parameterized layers."""
    targets, unsupported = [], []
    for name, m in module.named_modules():
        own = list(m.parameters(recurse=False))
        if not own:
            continue
        if isinstance(m, _QUANTIZABLE):
            if linear_only and not isinstance(m, nn.Linear):
                continue
            targets.append(f"{name}.weight" if name else "weight")
        elif not isinstance(m, _PASSTHROUGH):
            unsupported.append(f"{name or '<root>'} ({type(m).__name__})")
    if unsupported:
        raise UnsupportedLayerError(unsupported)
    return targets


def quantize_model(model: ModelArtifact, scheme: QuantScheme) -> ModelArtifact:
    """Return a new artifact with conv/linear weights fake-quantized.

    Biases and normalization parameters stay at full precision.  The input
    artifact is never modified.
    """
    from .models import create_model

    meta = dict(model.training_meta)
    meta["quant_scheme"] = scheme.to_dict()
    params = {k: v.clone() for k, v in model.parameters.items()}
    if scheme.name is not SchemeName.FP32:
        skeleton = create_model(model.architecture_id, model.num_classes)
        for key in _weight_targets(skeleton, scheme.linear_only):
            params[key] = quantize_dequantize(params[key], scheme.bits,
                                              scheme.granularity).dequantized_values
    return ModelArtifact(architecture_id=model.architecture_id, parameters=params,
                         num_classes=model.num_classes, training_meta=meta)

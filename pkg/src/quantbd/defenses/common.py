from __future__ import annotations

from contextlib import contextmanager

import torch

from ..ingestion import DatasetBundle, normalize_tensor
from ..models import as_module


def extract_penultimate(model, inputs: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Penultimate activations ``[N, d]`` for normalized ``inputs``."""
    net = as_module(model)
    if not hasattr(net, "features"):
        raise ValueError(f"{type(net).__name__} has no identifiable penultimate layer "
                         "(expected a `features` method)")
    with torch.no_grad():
        if inputs.shape[0] == 0:
            raise ValueError("no inputs")
        return torch.cat([net.features(inputs[i:i + batch_size])
                          for i in range(0, inputs.shape[0], batch_size)])


def model_inputs(bundle: DatasetBundle) -> torch.Tensor:
    """Normalized images of a bundle, whichever space it is in."""
    if bundle.normalized:
        return bundle.images
    return normalize_tensor(bundle.images, bundle.normalization)


@contextmanager
def frozen(model):
    """The module with gradients off for its parameters, restored on exit."""
    net = as_module(model)
    flags = [p.requires_grad for p in net.parameters()]
    for p in net.parameters():
        p.requires_grad_(False)
    try:
        yield net
    finally:
        for p, flag in zip(net.parameters(), flags):
            p.requires_grad_(flag)

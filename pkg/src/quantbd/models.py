"""Classifier architectures and artifact <-> module conversion.

Every architecture exposes ``features(x)`` (penultimate representation,
post-pool and pre-classifier), ``head`` (the final linear layer) and
``dormancy_layer`` (the module whose output is the post-activation feature
map inspected for dormant channels).
"""

from __future__ import annotations

import torch
import torchvision
from torch import nn

from .datamodel import ModelArtifact


def _conv_block(c_in: int, c_out: int) -> list[nn.Module]:
    return [nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU(),
            nn.MaxPool2d(2)]


class SmallCNN(nn.Module):
    """Three conv-BN-ReLU-maxpool blocks, global average pool, linear head.

    A 32x32 input ends on a 4x4 map (as in ResNet-18), which keeps a 3x3
    corner patch visible after global pooling.
    """

    def __init__(self, num_classes: int, widths=(16, 32, 64)):
        super().__init__()
        c1, c2, c3 = widths
        self.body = nn.Sequential(*_conv_block(3, c1), *_conv_block(c1, c2), *_conv_block(c2, c3))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c3, num_classes)

    @property
    def dormancy_layer(self) -> nn.Module:
        return self.body[-2]  # last ReLU

    def features(self, x):
        return torch.flatten(self.pool(self.body(x)), 1)

    def forward(self, x):
        return self.head(self.features(x))


class ResNet18Cifar(nn.Module):
    """torchvision ResNet-18 with a 3x3 stride-1 stem and no max-pool."""

    def __init__(self, num_classes: int):
        super().__init__()
        net = torchvision.models.resnet18(num_classes=num_classes)
        net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
        self.net = net

    @property
    def head(self) -> nn.Module:
        return self.net.fc

    @property
    def dormancy_layer(self) -> nn.Module:
        # final BasicBlock ends in ReLU, so its output is post-activation
        return self.net.layer4

    def features(self, x):
        n = self.net
        x = n.relu(n.bn1(n.conv1(x)))
        x = n.layer4(n.layer3(n.layer2(n.layer1(x))))
        return torch.flatten(n.avgpool(x), 1)

    def forward(self, x):
        return self.net.fc(self.features(x))


ARCHITECTURES = {
    "small_cnn": SmallCNN,
    "resnet18_cifar": ResNet18Cifar,
}


def create_model(architecture_id: str, num_classes: int) -> nn.Module:
    try:
        cls = ARCHITECTURES[architecture_id]
    except KeyError:
        raise ValueError(f"unsupported architecture {architecture_id!r}; "
                         f"valid: {', '.join(ARCHITECTURES)}") from None
    return cls(num_classes)


def build_module(artifact: ModelArtifact) -> nn.Module:
    """Instantiate an eval-mode module carrying the artifact's parameters.

    Quantized artifacts whose scheme asks for dynamic activation emulation get
    input hooks on every linear layer.
    """
    model = create_model(artifact.architecture_id, artifact.num_classes)
    model.load_state_dict(artifact.parameters)
    model.eval()
    scheme = artifact.quant_scheme
    if scheme is not None and scheme.emulate_dynamic_activations:
        from .quant import attach_activation_emulation

        attach_activation_emulation(model, bits=8)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def artifact_from_module(model: nn.Module, architecture_id: str, num_classes: int,
                         training_meta: dict) -> ModelArtifact:
    return ModelArtifact(architecture_id=architecture_id, parameters=model.state_dict(),
                         num_classes=num_classes, training_meta=training_meta)


def as_module(model) -> nn.Module:
    """Accept either a ModelArtifact or an nn.Module."""
    if isinstance(model, ModelArtifact):
        return build_module(model)
    if isinstance(model, nn.Module):
        return model.eval()
    raise TypeError(f"expected ModelArtifact or nn.Module, got {type(model).__name__}")


@torch.no_grad()
def predict_logits(model: nn.Module, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    outs = [model(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return torch.cat(outs)

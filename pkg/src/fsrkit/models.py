"""CNN backbones with named blocks after which FSR layers can be inserted."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .fsr import FSR, FsrConfig, FsrForwardResult

BACKBONES = ("desknet", "resnet18-style", "vgg16-style")

DEFAULT_WIDTHS = {
    "desknet": (16, 32, 64, 64),
    "resnet18-style": (16, 32, 64, 128),
    "vgg16-style": (16, 32, 64, 128, 128),
}
VGG_CONVS_PER_BLOCK = (2, 2, 3, 3, 3)


@dataclass
class BackboneSpec:
    name: str = "desknet"
    num_classes: int = 10
    insertion_points: Tuple[str, ...] = ("block4",)
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    widths: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        self.insertion_points = tuple(self.insertion_points)
        self.input_shape = tuple(self.input_shape)
        if self.widths is not None:
            self.widths = tuple(self.widths)
        if self.name not in BACKBONES:
            raise ConfigurationError(f"unknown backbone {self.name!r}; expected one of {BACKBONES}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be [C, H, W], got {self.input_shape}")
        widths = self.resolved_widths
        if not widths or min(widths) < 1:
            raise ConfigurationError(f"invalid widths {widths}")
        if self.name == "vgg16-style" and len(widths) != len(VGG_CONVS_PER_BLOCK):
            raise ConfigurationError(f"vgg16-style needs {len(VGG_CONVS_PER_BLOCK)} widths, got {len(widths)}")
        blocks = self.block_names
        for point in self.insertion_points:
            if point not in blocks:
                raise ConfigurationError(
                    f"insertion point {point!r} is not a block of {self.name}; available: {blocks}"
                )
        if len(set(self.insertion_points)) != len(self.insertion_points):
            raise ConfigurationError(f"duplicate insertion points {self.insertion_points}")

    @property
    def resolved_widths(self):
        return self.widths if self.widths is not None else DEFAULT_WIDTHS[self.name]

    @property
    def block_names(self):
        return tuple(f"block{i + 1}" for i in range(len(self.resolved_widths)))


@dataclass
class ModelOutput:
    logits: torch.Tensor
    fsr_results: List[FsrForwardResult] = field(default_factory=list)


def _conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _desknet_blocks(in_ch, widths):
    blocks, cin = [], in_ch
    for w in widths:
        blocks.append(_conv_bn_relu(cin, w, stride=2))
        cin = w
    return nn.ModuleList(blocks), nn.Identity()


def _resnet_blocks(in_ch, widths):
    stem = _conv_bn_relu(in_ch, widths[0])
    blocks, cin = [], widths[0]
    for i, w in enumerate(widths):
        stride = 1 if i == 0 else 2
        blocks.append(nn.Sequential(BasicBlock(cin, w, stride), BasicBlock(w, w, 1)))
        cin = w
    return nn.ModuleList(blocks), stem


def _vgg_blocks(in_ch, widths):
    blocks, cin = [], in_ch
    for w, n in zip(widths, VGG_CONVS_PER_BLOCK):
        layers = []
        for _ in range(n):
            layers.append(_conv_bn_relu(cin, w))
            cin = w
        layers.append(nn.MaxPool2d(2, ceil_mode=True))
        blocks.append(nn.Sequential(*layers))
    return nn.ModuleList(blocks), nn.Identity()


_BUILDERS = {"desknet": _desknet_blocks, "resnet18-style": _resnet_blocks, "vgg16-style": _vgg_blocks}


class FsrNet(nn.Module):
    """Backbone blocks, optional FSR layers after named blocks, pooled linear classifier.

    ``forward`` returns a :class:`ModelOutput`; FSR results are listed in
    block order.
    """

    def __init__(self, spec: BackboneSpec, fsr_cfg: Optional[FsrConfig] = None):
        super().__init__()
        self.spec = spec
        self.fsr_cfg = fsr_cfg or FsrConfig()
        blocks, stem = _BUILDERS[spec.name](spec.input_shape[0], spec.resolved_widths)
        self.stem = stem
        self.blocks = blocks
        self.block_names = spec.block_names
        shapes = self.feature_shapes()
        self.fsr = nn.ModuleDict(
            OrderedDict(
                (name, FSR(shapes[name][0], spec.num_classes, self.fsr_cfg))
                for name in self.block_names
                if name in spec.insertion_points
            )
        )
        self.classifier = nn.Linear(spec.resolved_widths[-1], spec.num_classes)

    @torch.no_grad()
    def feature_shapes(self):
        """Static [C, H, W] of every block output, from a probe forward pass."""
        was_training = self.training
        self.eval()
        x = torch.zeros((1,) + tuple(self.spec.input_shape))
        x = self.stem(x)
        shapes = {}
        for name, block in zip(self.block_names, self.blocks):
            x = block(x)
            shapes[name] = tuple(x.shape[1:])
        self.train(was_training)
        return shapes

    def set_routing(self, routing):
        for module in self.fsr.values():
            module.routing = routing

    def forward(self, x):
        expected = tuple(self.spec.input_shape)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ConfigurationError(f"expected input of shape [B, {', '.join(map(str, expected))}], got {tuple(x.shape)}")
        h = self.stem(x)
        results = []
        for name, block in zip(self.block_names, self.blocks):
            h = block(h)
            if name in self.fsr:
                res = self.fsr[name](h)
                results.append(res)
                h = res.f_out
        logits = self.classifier(F.adaptive_avg_pool2d(h, 1).flatten(1))
        return ModelOutput(logits=logits, fsr_results=results)


def build_model(spec: BackboneSpec, fsr_cfg: Optional[FsrConfig] = None) -> FsrNet:
    return FsrNet(spec, fsr_cfg)


def model_forward(model, x, mode="eval"):
    """Forward ``x`` through ``model`` in ``"eval"`` or ``"train"`` mode."""
    if mode not in ("eval", "train"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    model.train(mode == "train")
    return model(x)


def logits_of(output):
    """Logits from either a :class:`ModelOutput` or a bare tensor."""
    return output.logits if isinstance(output, ModelOutput) else output


def parameter_groups(model):
    """Map of group name (backbone / separation / recalibration / head) to named parameters."""
    groups = {"backbone": [], "separation": [], "recalibration": [], "head": []}
    for name, p in model.named_parameters():
        parts = name.split(".")
        if parts[0] == "fsr":
            group = {"separation": "separation", "recalibration": "recalibration", "head": "head"}[parts[2]]
        else:
            group = "backbone"
        groups[group].append((name, p))
    return groups


def parameter_report(model):
    """Parameter counts per group plus the total."""
    report = {k: sum(p.numel() for _, p in v) for k, v in parameter_groups(model).items()}
    report["total"] = sum(report.values())
    return report

"""Hierarchical feature extractors producing the five-map pyramid F_0..F_4.

Any module that returns five maps with the channel counts and reductions
declared by its :class:`BackboneSpec` can be plugged into the model; the
package ships :class:`ToyBackbone`, a small CNN with a fixed first stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError


@dataclass(frozen=True)
class BackboneSpec:
    channels: Tuple[int, ...] = (16, 32, 64, 128, 128)
    reductions: Tuple[int, ...] = (4, 8, 16, 32, 32)
    input_side: int = 224
    in_channels: int = 3
    frozen: bool = True

    def __post_init__(self):
        if len(self.channels) != 5 or len(self.reductions) != 5:
            raise ConfigError("a backbone must deliver exactly 5 maps")
        if any(b < a for a, b in zip(self.reductions, self.reductions[1:])):
            raise ConfigError("map resolutions must be non-increasing")
        if self.input_side % self.reductions[-1]:
            raise ConfigError(f"input side {self.input_side} not divisible by {self.reductions[-1]}")

    def map_shapes(self, batch: int) -> List[Tuple[int, int, int, int]]:
        return [(batch, c, self.input_side // r, self.input_side // r)
                for c, r in zip(self.channels, self.reductions)]


def gaussian_derivative_bank(size: int = 7) -> torch.Tensor:
    """Sixteen fixed (16, 3, size, size) filters: a low-pass, first derivatives at three
    scales, Laplacians of Gaussian at four scales, second derivatives and two
    colour-opponent low-passes. Derivative filters are zero-mean and L1-normalised."""
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    yy, xx = torch.meshgrid(r, r, indexing="ij")

    def g(s):
        e = torch.exp(-(xx ** 2 + yy ** 2) / (2 * s * s))
        return e / e.sum()

    luma = [g(1.5)]
    for s in (0.7, 1.0, 2.0):
        luma += [-xx / s ** 2 * g(s), -yy / s ** 2 * g(s)]
    for s in (0.7, 1.0, 1.5, 2.5):
        luma.append((xx ** 2 + yy ** 2 - 2 * s * s) / s ** 4 * g(s))
    luma += [(xx ** 2 - 1) * g(1.0), (yy ** 2 - 1) * g(1.0), xx * yy * g(1.0)]

    bank = torch.zeros(16, 3, size, size, dtype=torch.float64)
    for i, f in enumerate(luma):
        if i:
            f = f - f.mean()
            f = f / f.abs().sum()
        bank[i, :] = f / 3
    low = g(1.5)
    bank[14, 0], bank[14, 1] = low, -low
    bank[15, 0], bank[15, 1], bank[15, 2] = 0.5 * low, 0.5 * low, -low
    return bank.float()


class Compress(nn.Module):
    """Full-wave rectification followed by a compressive point nonlinearity."""

    def __init__(self, mode: str = "sqrt"):
        super().__init__()
        if mode not in ("abs", "sqrt", "log"):
            raise ConfigError(f"unknown compression {mode!r}")
        self.mode = mode

    def forward(self, x):
        if self.mode == "sqrt":
            return torch.sqrt(x.abs() + 1e-6)
        if self.mode == "log":
            return torch.log(x.abs() + 1e-3)
        return x.abs()


def _stage(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    conv = nn.Conv2d(c_in, c_out, 3, stride, 1)
    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return nn.Sequential(conv, nn.GELU())


class ToyBackbone(nn.Module):
    """Small CNN yielding reductions 4, 8, 16, 32, 32.

    Stage 0 is a fixed bank of Gaussian-derivative filters (7x7, stride 2),
    rectified and compressed (``sqrt`` by default, or ``log``/``abs``), then
    2x2 average-pooled, so the first map measures local contrast per scale and
    orientation. Compression turns the multiplicative effect of scene contrast
    into a roughly additive one. Stages 1-4 are randomly initialised 3x3 conv +
    GELU blocks. There is no normalisation layer: the absolute response energy
    is exactly what blur and noise change.
    """

    def __init__(self, spec: BackboneSpec = BackboneSpec(), compression: str = "sqrt"):
        super().__init__()
        self.spec = spec
        ch = spec.channels
        strides = [spec.reductions[i + 1] // spec.reductions[i] for i in range(4)]
        if spec.reductions[0] != 4 or any(s not in (1, 2) for s in strides):
            raise ConfigError("toy backbone supports reductions (4, x2 or x1 per stage) only")
        conv0 = nn.Conv2d(spec.in_channels, ch[0], 7, 2, 3, bias=False)
        nn.init.kaiming_normal_(conv0.weight, nonlinearity="relu")
        bank = gaussian_derivative_bank()
        if spec.in_channels != 3:
            bank = bank.sum(dim=1, keepdim=True).expand(-1, spec.in_channels, -1, -1) / spec.in_channels
        n = min(ch[0], bank.shape[0])
        with torch.no_grad():
            conv0.weight[:n] = bank[:n]
        self.stages = nn.ModuleList([nn.Sequential(conv0, Compress(compression), nn.AvgPool2d(2))])
        for c_in, c_out, s in zip(ch[:4], ch[1:], strides):
            self.stages.append(_stage(c_in, c_out, s))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps


BACKBONES: Dict[str, Callable[[BackboneSpec], nn.Module]] = {"toy": ToyBackbone}


def register_backbone(name: str, factory: Callable[[BackboneSpec], nn.Module]) -> None:
    """Make an external extractor available as ``backbone = "external:<name>"``."""
    BACKBONES[f"external:{name}"] = factory


def build_backbone(name: str, spec: BackboneSpec) -> nn.Module:
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}; known: {sorted(BACKBONES)}") from None
    net = factory(spec)
    if spec.frozen:
        freeze(net)
    return net


def freeze(net: nn.Module) -> None:
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()


def extract_features(x: torch.Tensor, backbone: nn.Module, spec: BackboneSpec) -> List[torch.Tensor]:
    """Run ``backbone`` and check the pyramid against ``spec``."""
    side = spec.input_side
    if x.ndim != 4 or x.shape[1] != spec.in_channels or x.shape[2] != side or x.shape[3] != side:
        raise ValueError(f"expected input (B, {spec.in_channels}, {side}, {side}), got {tuple(x.shape)}")
    if spec.frozen:
        with torch.no_grad():
            maps = backbone(x)
    else:
        maps = backbone(x)
    expected = spec.map_shapes(x.shape[0])
    got = [tuple(m.shape) for m in maps]
    if got != expected:
        raise ValueError(f"backbone pyramid {got} does not match declared {expected}")
    return list(maps)


def param_digest(params: Sequence[torch.Tensor]) -> str:
    """SHA-256 over raw parameter bytes (freeze-contract checks)."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

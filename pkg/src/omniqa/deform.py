"""Deformable convolution with softmax-normalised modulation (DCNv3 style).

For group ``g`` and output location ``p`` the grouped stage computes

    y_g(p) = sum_k w_gk * m_gk(p) * x_g(p * stride + p_k + dp_gk(p))

where ``m_g(p)`` is a softmax over the k*k kernel points and ``x_g`` is read
with bilinear interpolation and zero padding. A 1x1 projection then mixes
the groups into ``out_channels``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError


@dataclass(frozen=True)
class DeformConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    groups: int = 4
    stride: int = 1
    padding: Optional[int] = None  # None -> same padding, kernel // 2

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups {self.groups}"
            )
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)

    @property
    def points(self) -> int:
        return self.kernel * self.kernel

    def output_size(self, h: int, w: int):
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class DeformField(NamedTuple):
    offsets: torch.Tensor  # (B, G, k*k, 2, Ho, Wo), last-but-two axis is (dy, dx)
    logits: torch.Tensor   # (B, G, k*k, Ho, Wo)

    def modulation(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=2)


def zero_field(spec: DeformConvSpec, batch: int, h: int, w: int, dtype=torch.float32) -> DeformField:
    ho, wo = spec.output_size(h, w)
    g, kk = spec.groups, spec.points
    return DeformField(
        torch.zeros(batch, g, kk, 2, ho, wo, dtype=dtype),
        torch.zeros(batch, g, kk, ho, wo, dtype=dtype),
    )


def _kernel_grid(spec: DeformConvSpec, ho: int, wo: int, dtype, device):
    """Undeformed sampling positions, shape (k*k, Ho, Wo) for rows and cols."""
    k = spec.kernel
    r = torch.arange(k, dtype=dtype, device=device) - spec.padding
    ky, kx = torch.meshgrid(r, r, indexing="ij")
    oy = torch.arange(ho, dtype=dtype, device=device) * spec.stride
    ox = torch.arange(wo, dtype=dtype, device=device) * spec.stride
    py = ky.reshape(-1, 1, 1) + oy.view(1, -1, 1)
    px = kx.reshape(-1, 1, 1) + ox.view(1, 1, -1)
    return py.expand(-1, ho, wo), px.expand(-1, ho, wo)


def deform_sample(x: torch.Tensor, field: DeformField, spec: DeformConvSpec) -> torch.Tensor:
    """Gather deformed samples: (B, G, C/G, k*k, Ho, Wo)."""
    b, c, h, w = x.shape
    g, kk = spec.groups, spec.points
    ho, wo = field.logits.shape[-2:]
    py, px = _kernel_grid(spec, ho, wo, x.dtype, x.device)
    py = py + field.offsets[:, :, :, 0]
    px = px + field.offsets[:, :, :, 1]
    # align_corners=False: pixel index i sits at normalised (2i + 1) / size - 1
    grid = torch.stack(((2 * px + 1) / w - 1, (2 * py + 1) / h - 1), dim=-1)
    grid = grid.reshape(b * g, kk * ho, wo, 2)
    xg = x.reshape(b * g, c // g, h, w)
    s = F.grid_sample(xg, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return s.reshape(b, g, c // g, kk, ho, wo)


def deform_conv(
    x: torch.Tensor,
    weight: torch.Tensor,
    field: DeformField,
    spec: DeformConvSpec,
    proj_weight: Optional[torch.Tensor] = None,
    proj_bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Apply a deformable convolution given an explicit field.

    ``weight`` has the grouped-conv layout (C_in, C_in/G, k, k). Without a
    projection the result has C_in channels.
    """
    # one reduction instead of an elementwise scan; any NaN/Inf reaches the sum
    if not torch.isfinite(field.offsets.sum() + field.logits.sum()):
        raise NumericalError("non-finite deformation field")
    b, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {c}")
    g, kk = spec.groups, spec.points
    samples = deform_sample(x, field, spec) * field.modulation().unsqueeze(2)
    wg = weight.reshape(g, c // g, c // g, kk)
    y = torch.einsum("gock,bgckhw->bgohw", wg, samples)
    y = y.reshape(b, c, *y.shape[-2:])
    if proj_weight is not None:
        y = F.conv2d(y, proj_weight, proj_bias)
    return y


def fan_in_init_(*layers: nn.Module) -> None:
    """Zero-mean normal weights with variance 1/fan_in and zero bias.

    Keeps activation scale roughly constant through deep stacks of these
    layers; PyTorch's default init shrinks it by about sqrt(3) per layer.
    """
    for layer in layers:
        fan_in = layer.weight[0].numel()
        nn.init.normal_(layer.weight, 0.0, fan_in ** -0.5)
        if layer.bias is not None:
            nn.init.zeros_(layer.bias)


class OffsetHead(nn.Module):
    """Depthwise conv on the deform-conv output grid followed by a zero-initialised
    1x1 layer emitting 2*G*k^2 offset and G*k^2 modulation-logit channels."""

    def __init__(self, spec: DeformConvSpec):
        super().__init__()
        self.spec = spec
        c = spec.in_channels
        self.dw = nn.Conv2d(c, c, spec.kernel, spec.stride, spec.padding, groups=c)
        self.act = nn.GELU()
        self.out = nn.Conv2d(c, 3 * spec.groups * spec.points, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> DeformField:
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} channels, got {x.shape[1]}")
        b = x.shape[0]
        g, kk = self.spec.groups, self.spec.points
        o = self.out(self.act(self.dw(x)))
        ho, wo = o.shape[-2:]
        offsets = o[:, : 2 * g * kk].reshape(b, g, kk, 2, ho, wo)
        logits = o[:, 2 * g * kk:].reshape(b, g, kk, ho, wo)
        return DeformField(offsets, logits)


class DeformConv2d(nn.Module):
    """Deformable conv layer: offset head + grouped sampling + point-wise mix."""

    def __init__(self, in_channels: int, out_channels: Optional[int] = None, kernel: int = 3,
                 groups: int = 4, stride: int = 1, padding: Optional[int] = None):
        super().__init__()
        out_channels = in_channels if out_channels is None else out_channels
        self.spec = DeformConvSpec(in_channels, out_channels, kernel, groups, stride, padding)
        cg = in_channels // groups
        self.weight = nn.Parameter(torch.empty(in_channels, cg, kernel, kernel))
        # the initial softmax modulation is 1/k^2 per point, so the effective kernel
        # w/k^2 gets variance 1/fan_in when w has variance k^4/fan_in
        nn.init.normal_(self.weight, 0.0, kernel * kernel * (cg * kernel * kernel) ** -0.5)
        self.proj = nn.Conv2d(in_channels, out_channels, 1)
        fan_in_init_(self.proj)
        self.offset_head = OffsetHead(self.spec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        field = self.offset_head(x)
        return deform_conv(x, self.weight, field, self.spec, self.proj.weight, self.proj.bias)

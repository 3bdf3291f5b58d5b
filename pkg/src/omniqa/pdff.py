"""Progressive deformation-aware feature fusion over the backbone pyramid."""

from __future__ import annotations

from typing import Dict, List, Sequence

import torch
import torch.nn as nn

from .deform import DeformConv2d, fan_in_init_


class DAA(nn.Module):
    """Distortion-aware attention.

    deformable conv -> 1x1 conv -> channel gate (avg-pool, FC, ReLU, FC,
    sigmoid) -> spatial gate (7x7 conv to one channel, sigmoid) -> 2x2 max-pool.
    """

    def __init__(self, in_channels: int, out_channels: int, reduction: int = 4,
                 dcn_kernel: int = 3, dcn_groups: int = 4):
        super().__init__()
        self.dcn = DeformConv2d(in_channels, in_channels, dcn_kernel, dcn_groups)
        self.pw = nn.Conv2d(in_channels, out_channels, 1)
        hidden = max(4, out_channels // reduction)
        self.fc1 = nn.Linear(out_channels, hidden)
        self.fc2 = nn.Linear(hidden, out_channels)
        self.spatial = nn.Conv2d(out_channels, 1, 7, stride=1, padding=3)
        self.pool = nn.MaxPool2d(2, 2)
        fan_in_init_(self.pw, self.fc1, self.fc2, self.spatial)

    def forward(self, x: torch.Tensor, return_gates: bool = False):
        if x.shape[-1] < 2 or x.shape[-2] < 2:
            raise ValueError(f"DAA needs spatial dims >= 2, got {tuple(x.shape[-2:])}")
        fn = self.pw(self.dcn(x))
        ch_gate = torch.sigmoid(self.fc2(torch.relu(self.fc1(fn.mean(dim=(2, 3))))))
        fc = fn * ch_gate[:, :, None, None]
        sp_gate = torch.sigmoid(self.spatial(fc))
        out = self.pool(fc * sp_gate)
        if return_gates:
            return out, {"channel": ch_gate, "spatial": sp_gate, "f_n": fn, "f_c": fc}
        return out


def _stride(src_red: int, dst_red: int) -> int:
    if dst_red % src_red:
        raise ValueError(f"cannot align reduction {src_red} onto {dst_red}")
    return dst_red // src_red


class PDFF(nn.Module):
    """Adjust F_0..F_3 with deformable convs, fuse adjacent levels, and merge
    the fused maps through two DAA blocks into F_m with C(F_4) channels."""

    def __init__(self, channels: Sequence[int], reductions: Sequence[int],
                 dcn_kernel: int = 3, dcn_groups: int = 4):
        super().__init__()
        c, r = list(channels), list(reductions)
        dcn = dict(kernel=dcn_kernel, groups=dcn_groups)
        self.adjust = nn.ModuleList(DeformConv2d(c[i], c[i], **dcn) for i in range(4))
        self.fuse_proj = nn.ModuleList(
            nn.Conv2d(c[i], c[i + 1], 1, stride=_stride(r[i], r[i + 1])) for i in range(3)
        )
        fan_in_init_(*self.fuse_proj)
        self.fuse_dcn = nn.ModuleList(DeformConv2d(c[i + 1], c[i + 1], **dcn) for i in (1, 2))
        self.daa_inner = DAA(c[1], c[1], dcn_kernel=dcn_kernel, dcn_groups=dcn_groups)
        # DAA halves the resolution of Fuse_{0,1}
        self.align_inner = nn.Conv2d(c[1], c[3], 1, stride=_stride(2 * r[1], r[3]))
        self.align_12 = nn.Conv2d(c[2], c[3], 1, stride=_stride(r[2], r[3]))
        self.daa_outer = DAA(c[3], c[4], dcn_kernel=dcn_kernel, dcn_groups=dcn_groups)
        fan_in_init_(self.align_inner, self.align_12)

    def deform_adjust(self, maps: List[torch.Tensor]) -> List[torch.Tensor]:
        return [self.adjust[i](maps[i]) for i in range(4)]

    def fuse_adjacent(self, adjusted: List[torch.Tensor], i: int) -> torch.Tensor:
        a = self.fuse_proj[i](adjusted[i])
        b = adjusted[i + 1]
        assert a.shape == b.shape, f"fuse {i},{i + 1}: {tuple(a.shape)} vs {tuple(b.shape)}"
        return a + b

    def forward(self, maps: List[torch.Tensor], return_intermediates: bool = False):
        fd = self.deform_adjust(maps)
        fuse = [self.fuse_adjacent(fd, i) for i in range(3)]
        fuse_d12 = self.fuse_dcn[0](fuse[1])
        fuse_d23 = self.fuse_dcn[1](fuse[2])
        inner = self.daa_inner(fuse[0])
        total = self.align_inner(inner) + self.align_12(fuse_d12) + fuse_d23
        f_m = self.daa_outer(total)
        if not return_intermediates:
            return f_m
        out: Dict[str, torch.Tensor] = {}
        for i, t in enumerate(fd):
            out[f"F_d{i}"] = t
        for i, t in enumerate(fuse):
            out[f"Fuse_{i}{i + 1}"] = t
        out.update({"Fuse^d_12": fuse_d12, "Fuse^d_23": fuse_d23, "DAA(Fuse_01)": inner,
                    "PDFF_sum": total, "F_m": f_m})
        return f_m, out

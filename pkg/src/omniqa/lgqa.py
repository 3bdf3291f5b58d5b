"""Local-to-global quality aggregation: HPA block, patch tokens, patch
self-attention, feed-forward block and the mean-over-patches score head."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .deform import DeformConv2d, fan_in_init_
from .errors import CheckpointError, ConfigError


class HPA(nn.Module):
    """Hierarchical pooling attention over channel groups.

    The enhanced map is split into ``groups`` channel groups (folded into the
    batch axis). Height- and width-pooled context is mixed by a shared 1x1
    conv and used as sigmoid gates (branch 1, then group-normalised); a 3x3
    conv gives branch 2. Each branch's pooled channel descriptor is softmaxed
    into channel weights that project the *other* branch to a spatial map,
    which rescales the grouped input.
    """

    def __init__(self, channels: int, out_channels: int, groups: int = 8, gn_groups: int = 4,
                 dcn_kernel: int = 3, dcn_groups: int = 4):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"HPA groups {groups} do not divide {channels} channels")
        cg = channels // groups
        if cg % gn_groups:
            raise ConfigError(f"group-norm groups {gn_groups} do not divide {cg} channels per group")
        self.groups = groups
        self.dcn = DeformConv2d(channels, channels, dcn_kernel, dcn_groups)
        self.conv_a = nn.Conv2d(channels, channels, 3, padding=1)
        self.mix = nn.Conv2d(cg, cg, 1)
        self.gn = nn.GroupNorm(gn_groups, cg)
        self.conv_local = nn.Conv2d(cg, cg, 3, padding=1)
        self.proj = nn.Conv2d(channels, out_channels, 1)
        fan_in_init_(self.conv_a, self.mix, self.conv_local, self.proj)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        f_a = self.conv_a(self.dcn(x))
        b, c, h, w = f_a.shape
        xg = f_a.reshape(b * self.groups, c // self.groups, h, w)

        x_h = xg.mean(dim=3, keepdim=True)                   # (n, cg, h, 1)
        x_w = xg.mean(dim=2, keepdim=True).transpose(2, 3)   # (n, cg, w, 1)
        x_h, x_w = torch.split(self.mix(torch.cat([x_h, x_w], dim=2)), [h, w], dim=2)
        x1 = self.gn(xg * torch.sigmoid(x_h) * torch.sigmoid(x_w.transpose(2, 3)))
        x2 = self.conv_local(xg)

        w1 = torch.softmax(x1.mean(dim=(2, 3)), dim=1)  # (n, cg)
        w2 = torch.softmax(x2.mean(dim=(2, 3)), dim=1)
        attn = torch.einsum("nc,nchw->nhw", w2, x1) + torch.einsum("nc,nchw->nhw", w1, x2)
        out = self.proj((xg * attn.unsqueeze(1)).reshape(b, c, h, w))
        if return_weights:
            return out, {"W1": w1, "W2": w2, "X1": x1, "X2": x2}
        return out


def patch_vector(f4: torch.Tensor, f_hpa: torch.Tensor) -> torch.Tensor:
    """Global-average-pooled F_4 plus pooled HPA output, one vector per patch."""
    if f4.shape[1] != f_hpa.shape[1]:
        raise ValueError(f"channel mismatch {f4.shape[1]} vs {f_hpa.shape[1]}")
    return f4.mean(dim=(2, 3)) + f_hpa.mean(dim=(2, 3))


class PatchEmbedding(nn.Module):
    """Linear token embedding plus a learned positional table ~ N(0, 1)."""

    def __init__(self, in_dim: int, embed_dim: int, n_patches: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, embed_dim)
        self.pos = nn.Parameter(torch.randn(1, n_patches, embed_dim))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[1] != self.pos.shape[1]:
            raise CheckpointError(
                f"{v.shape[1]} patches given but the positional table holds {self.pos.shape[1]}"
            )
        return self.proj(v) + self.pos


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 8):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.d_k = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.heads, self.d_k).transpose(1, 2)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.d_k), dim=-1)
        y = self.out((attn @ v).transpose(1, 2).reshape(b, n, d))
        return (y, attn) if return_attention else y


class FeedForward(nn.Module):
    """h = LN1(V_m + X_p); V_o = LN2(MLP(h) + h)."""

    def __init__(self, dim: int, ratio: int = 4, affine: bool = True):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, elementwise_affine=affine)
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)
        self.ln2 = nn.LayerNorm(dim, elementwise_affine=affine)

    def forward(self, v_m: torch.Tensor, x_p: torch.Tensor) -> torch.Tensor:
        h = self.ln1(v_m + x_p)
        return self.ln2(self.fc2(F.gelu(self.fc1(h))) + h)


class ScoreHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(dim, 1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, K, D) -> (B,) mean of per-token scores."""
        return self.fc(tokens).squeeze(-1).mean(dim=1)

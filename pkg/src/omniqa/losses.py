"""Training losses. The default is the norm-in-norm loss, which compares
z-scored label and prediction vectors and is therefore invariant to any
positive affine rescaling of either."""

from __future__ import annotations

import torch

from .config import LossConfig


def _zscore(v: torch.Tensor, eps: float) -> torch.Tensor:
    centred = v - v.mean()
    # population std floored at eps; max() rather than sigma + eps keeps exact
    # scale invariance whenever sigma > eps, and clamping before the sqrt keeps
    # the gradient finite for constant predictions
    sigma = torch.sqrt(torch.clamp(torch.mean(centred * centred), min=eps * eps))
    return centred / sigma


def norm_in_norm_loss(s, s_hat, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    s = torch.as_tensor(s)
    s_hat = torch.as_tensor(s_hat)
    if s.dtype != s_hat.dtype:
        s = s.to(s_hat.dtype)
    s, s_hat = s.reshape(-1), s_hat.reshape(-1)
    n = s.numel()
    if n < 2 or s_hat.numel() != n:
        raise ValueError(f"need two equal-length vectors with N >= 2, got {n} and {s_hat.numel()}")
    diff = _zscore(s, cfg.epsilon) - _zscore(s_hat, cfg.epsilon)
    return torch.sum(torch.abs(diff) ** cfg.gamma) / (cfg.omega * n)


def make_loss(cfg: LossConfig):
    """Return ``loss(mos, pred)`` for the configured kind."""
    if cfg.kind == "norm_in_norm":
        return lambda s, p: norm_in_norm_loss(s, p, cfg)
    if cfg.kind == "l1":
        return lambda s, p: torch.mean(torch.abs(s.to(p.dtype) - p))
    return lambda s, p: torch.mean((s.to(p.dtype) - p) ** 2)

"""Full no-reference quality model: backbone -> PDFF -> HPA -> patch attention -> score."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import torch
import torch.nn as nn

from .backbone import BackboneSpec, build_backbone, extract_features
from .config import ModelConfig
from .lgqa import HPA, FeedForward, MultiHeadSelfAttention, PatchEmbedding, ScoreHead, patch_vector
from .pdff import PDFF


class QualityModel(nn.Module):
    """Scores a batch of patch sets.

    Input is (B, K, C, S, S); output is (B,). The ablation switches in
    :class:`ModelConfig` drop PDFF (and with it HPA), HPA alone (pooled F_m
    is used instead) or the patch-attention stage (tokens go straight to the
    score head).
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone_spec = BackboneSpec(
            cfg.backbone_channels, cfg.backbone_reductions, cfg.input_side, 3, cfg.freeze_backbone
        )
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.init_seed)
        try:
            self._build(cfg)
        finally:
            torch.random.set_rng_state(gen_state)

    def _build(self, cfg: ModelConfig):
        ch = cfg.backbone_channels
        dcn = dict(dcn_kernel=cfg.dcn_kernel, dcn_groups=cfg.dcn_groups)
        self.backbone = build_backbone(cfg.backbone, self.backbone_spec)
        if cfg.use_pdff:
            self.pdff = PDFF(ch, cfg.backbone_reductions, **dcn)
        if cfg.use_hpa:
            self.hpa = HPA(ch[4], ch[4], cfg.hpa_groups, cfg.hpa_gn_groups, **dcn)
        if cfg.use_pa:
            self.embed = PatchEmbedding(ch[4], cfg.embed_dim, cfg.k_patches)
            self.attn = MultiHeadSelfAttention(cfg.embed_dim, cfg.heads)
            self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_ratio)
            self.head = ScoreHead(cfg.embed_dim)
        else:
            self.head = ScoreHead(ch[4])

    def train(self, mode: bool = True):
        super().train(mode)
        if self.cfg.freeze_backbone:
            self.backbone.eval()
        return self

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        return (p for p in self.parameters() if p.requires_grad)

    def patch_vectors(self, x: torch.Tensor) -> torch.Tensor:
        """(N, C, S, S) patches -> (N, C4) patch vectors."""
        maps = extract_features(x, self.backbone, self.backbone_spec)
        f4 = maps[4]
        if not self.cfg.use_pdff:
            return f4.mean(dim=(2, 3))
        f_m = self.pdff(maps)
        f_local = self.hpa(f_m) if self.cfg.use_hpa else f_m
        return patch_vector(f4, f_local)

    def tokens(self, v: torch.Tensor) -> torch.Tensor:
        if not self.cfg.use_pa:
            return v
        x_p = self.embed(v)
        return self.ffn(self.attn(x_p), x_p)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.ndim != 5:
            raise ValueError(f"expected (B, K, C, S, S), got {tuple(patches.shape)}")
        b, k = patches.shape[:2]
        v = self.patch_vectors(patches.flatten(0, 1)).view(b, k, -1)
        return self.head(self.tokens(v))

    def shape_ledger(self, batch: int = 1) -> Dict[str, Tuple[int, ...]]:
        """Shapes of every named intermediate for a (batch, K) input at the configured side."""
        s = self.cfg.input_side
        x = torch.zeros(batch * self.cfg.k_patches, 3, s, s)
        ledger: Dict[str, Tuple[int, ...]] = {}
        with torch.no_grad():
            maps = extract_features(x, self.backbone, self.backbone_spec)
            for i, m in enumerate(maps):
                ledger[f"F_{i}"] = tuple(m.shape)
            f4 = maps[4]
            if self.cfg.use_pdff:
                f_m, inter = self.pdff(maps, return_intermediates=True)
                ledger.update({k: tuple(v.shape) for k, v in inter.items()})
                f_local = self.hpa(f_m) if self.cfg.use_hpa else f_m
                ledger["F_hpa"] = tuple(f_local.shape)
                v = patch_vector(f4, f_local)
            else:
                v = f4.mean(dim=(2, 3))
            v = v.view(batch, self.cfg.k_patches, -1)
            ledger["V"] = tuple(v.shape)
            if self.cfg.use_pa:
                x_p = self.embed(v)
                v_m = self.attn(x_p)
                ledger["X_p"] = tuple(x_p.shape)
                ledger["V_m"] = tuple(v_m.shape)
                ledger["V_o"] = tuple(self.ffn(v_m, x_p).shape)
            ledger["score"] = tuple(self.head(self.tokens(v)).shape)
        return ledger

    def named_state(self) -> Dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}


def score_patch_sets(model: QualityModel, batches: List[torch.Tensor]) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return torch.cat([model(b) for b in batches])

"""Full counting network: audio embedder, visual backbone, patch heads,
co-attention density head, and the multi-task loss.

Ablation flags reshape the graph:

  no_pir / no_pce      drop that stream (parameters included) and its loss;
                       with BOTH set, the streams stay wired into the
                       attention combiner but neither is supervised
  no_avt               no patch heads at all; the co-attention consumes the
                       raw visual embeddings
  no_ccm               the attended features are used directly as the
                       density-head input
  no_audio_in_fusion   backbone fusion drops its audio projections
  single_branch        backbone keeps only the first branch, no fusion
  cc_v                 image-only variant: no audio path anywhere; both patch
                       streams reduce the visual Gram matrix, and the
                       co-attention keys become the visual transpose
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioEmbedder
from .backbone import VisualBackbone
from .config import Config
from .density import DensityAssembler, combine_losses, density_loss
from .heads import (AttendedModality, PatchCountHead, PatchImportance,
                    PatchImportanceHead, count_loss, importance_ground_truth,
                    importance_kl_loss)
from .nn import Module, seed_stream
from .tensor import Tensor


@dataclass
class ModelOutput:
    visual: Tensor                       # (P, Z)
    audio_emb: Tensor | None             # (Z, 1)
    importance: PatchImportance | None   # probs/logits, (P, 1)
    counts_est: Tensor | None            # (P, 1)
    attended: Tensor                     # (P, Z)
    attention_weights: Tensor | None     # (P, 1)
    dm_pre: Tensor                       # (P, Z)
    density: Tensor                      # (W, H)

    @property
    def count(self) -> float:
        return float(self.density.data.sum())


class CrowdCounter(Module):
    def __init__(self, cfg: Config, seed=None):
        super().__init__()
        self.cfg = cfg
        geo = cfg.geo
        dtype = cfg.np_dtype()
        seeds = seed_stream(cfg.seed if seed is None else seed).spawn(6)
        n = geo.patch_grid.n_patches

        use_audio = cfg.uses_audio
        self.audio_net = None
        if use_audio:
            self.audio_net = AudioEmbedder(geo.embed_dim, seeds[0],
                                           stages=cfg.afe_stages,
                                           base_channels=cfg.afe_base_channels,
                                           dropout=cfg.dropout, dtype=dtype)
        self.backbone = VisualBackbone(
            geo, cfg.stages, geo.embed_dim, seeds[1],
            use_audio_in_fusion=use_audio and not cfg.no_audio_in_fusion,
            dropout=cfg.dropout, dtype=dtype)

        both_unsupervised = cfg.no_pir and cfg.no_pce
        keep_importance = not cfg.no_avt and (not cfg.no_pir or both_unsupervised)
        keep_counts = not cfg.no_avt and (not cfg.no_pce or both_unsupervised)
        self.importance_head = None
        self.count_head = None
        self.combiner = None
        if keep_importance:
            self.importance_head = PatchImportanceHead(
                n, seeds[2], dropout=cfg.dropout, use_audio=use_audio, dtype=dtype)
        if keep_counts:
            self.count_head = PatchCountHead(
                n, seeds[3], dropout=cfg.dropout, use_audio=use_audio, dtype=dtype)
        if not cfg.no_avt:
            self.combiner = AttendedModality(
                n, seeds[4], dropout=cfg.dropout, dtype=dtype,
                use_importance=keep_importance, use_counts=keep_counts)

        self.supervise_pir = not cfg.no_avt and not cfg.no_pir
        self.supervise_pce = not cfg.no_avt and not cfg.no_pce
        self.assembler = DensityAssembler(geo)
        self.grid = geo.patch_grid

    def __call__(self, image: Tensor, log_mel: Tensor | None) -> ModelOutput:
        from .density import co_attention

        audio_emb = self.audio_net(log_mel) if self.audio_net is not None else None
        visual = self.backbone(image, audio_emb)

        importance = None
        counts_est = None
        if self.importance_head is not None:
            importance = self.importance_head(visual, audio_emb)
        if self.count_head is not None:
            counts_est = self.count_head(visual, audio_emb)

        if self.combiner is not None:
            attended, weights = self.combiner(
                visual,
                importance.logits if importance is not None else None,
                counts_est)
        else:
            attended, weights = visual, None

        if self.cfg.no_ccm:
            dm_pre = attended
        else:
            dm_pre = co_attention(attended, audio_emb, visual)
        density = self.assembler(dm_pre)
        return ModelOutput(visual, audio_emb, importance, counts_est,
                           attended, weights, dm_pre, density)

    def loss(self, output: ModelOutput, gt_density: np.ndarray,
             gt_patch_counts: np.ndarray):
        """Multi-task total for one sample; returns (scalar Tensor, LossReport)."""
        pir_term = None
        pce_term = None
        if self.supervise_pir and output.importance is not None:
            target = importance_ground_truth(gt_patch_counts)
            pir_term = importance_kl_loss(output.importance.probs, target)
        if self.supervise_pce and output.counts_est is not None:
            pce_term = count_loss(output.counts_est, gt_patch_counts)
        dm_term = density_loss(output.density, gt_density)
        return combine_losses(pir_term, pce_term, dm_term)


def build_model(cfg: Config, seed=None) -> CrowdCounter:
    return CrowdCounter(cfg, seed=seed)

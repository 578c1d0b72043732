"""Auxiliary patch heads and the run-time attended modality.

Two streams read the patch embeddings: a patch-importance ranking (a
probability over patches, trained with scaled KL divergence against the
per-patch share of the total count) and a patch-wise count estimate (trained
with a squared difference normalized by the image total).  Their raw outputs
are projected and combined into a softmax weight per patch that re-scales the
visual embeddings, forming the attended features consumed downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import InputError
from .nn import Dropout, Linear, Module
from .tensor import Tensor

KL_CLAMP = 1e-12


@dataclass
class PatchImportance:
    probs: Tensor   # (P, 1), sums to 1
    logits: Tensor  # (P, 1)


def _as_column(x: Tensor, n: int) -> Tensor:
    return ops.reshape(x, (n, 1))


class PatchImportanceHead(Module):
    """Importance logits from visual x audio agreement (or visual only).

    Audio-visual mode: project the (P,) vector V @ a through a P->P linear.
    Image-only mode: the same row-wise reduction used for the count stream,
    applied to V V^T.
    """

    def __init__(self, n_patches, seed, dropout=0.3, use_audio=True, dtype=np.float64):
        super().__init__()
        self.n = n_patches
        self.use_audio = use_audio
        seeds = seed.spawn(2)
        out_dim = n_patches if use_audio else 1
        self.proj = Linear(n_patches, out_dim, seeds[0], dtype=dtype)
        self.drop = Dropout(dropout, seeds[1])

    def __call__(self, visual: Tensor, audio_emb: Tensor | None) -> PatchImportance:
        if self.use_audio:
            scores = ops.reshape(ops.matmul(visual, audio_emb), (1, self.n))
            logits = self.drop(self.proj(scores))  # (1, P)
            logits = ops.transpose(logits)
        else:
            gram = ops.matmul(visual, ops.transpose(visual))  # (P, P)
            logits = self.drop(self.proj(gram))  # (P, 1)
        logits = _as_column(logits, self.n)
        return PatchImportance(ops.softmax(logits, axis=0), logits)


class PatchCountHead(Module):
    """Per-patch count regression via a shared row-wise linear reduction."""

    def __init__(self, n_patches, seed, dropout=0.3, use_audio=True, dtype=np.float64):
        super().__init__()
        self.n = n_patches
        self.use_audio = use_audio
        seeds = seed.spawn(2)
        self.reduce = Linear(n_patches, 1, seeds[0], dtype=dtype)
        self.drop = Dropout(dropout, seeds[1])

    def __call__(self, visual: Tensor, audio_emb: Tensor | None) -> Tensor:
        keyed = visual
        if self.use_audio and audio_emb is not None:
            keyed = ops.add(visual, ops.transpose(audio_emb))  # broadcast row onto rows
        gram = ops.matmul(keyed, ops.transpose(visual))  # (P, P)
        return _as_column(self.drop(self.reduce(gram)), self.n)


class AttendedModality(Module):
    """Combine both streams into one weight per patch and rescale the embeddings.

    The two raw vectors each get their own P->P projection; the summed logits
    go through one softmax.  Weights are multiplied by P so that uniform
    attention leaves the visual features unchanged.
    """

    def __init__(self, n_patches, seed, dropout=0.3, dtype=np.float64,
                 use_importance=True, use_counts=True):
        super().__init__()
        if not (use_importance or use_counts):
            raise InputError("attended modality needs at least one input stream")
        self.n = n_patches
        seeds = seed.spawn(4)
        self.proj_importance = None
        self.proj_counts = None
        if use_importance:
            self.proj_importance = Linear(n_patches, n_patches, seeds[0], dtype=dtype)
            self.drop_importance = Dropout(dropout, seeds[2])
        if use_counts:
            self.proj_counts = Linear(n_patches, n_patches, seeds[1], dtype=dtype)
            self.drop_counts = Dropout(dropout, seeds[3])

    def weights(self, importance_logits: Tensor | None,
                count_estimates: Tensor | None) -> Tensor:
        terms = []
        if self.proj_importance is not None and importance_logits is not None:
            row = ops.reshape(importance_logits, (1, self.n))
            terms.append(self.drop_importance(self.proj_importance(row)))
        if self.proj_counts is not None and count_estimates is not None:
            row = ops.reshape(count_estimates, (1, self.n))
            terms.append(self.drop_counts(self.proj_counts(row)))
        logits = terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])
        return ops.transpose(ops.softmax(logits, axis=1))  # (P, 1)

    def __call__(self, visual: Tensor, importance_logits: Tensor | None,
                 count_estimates: Tensor | None) -> tuple[Tensor, Tensor]:
        weights = self.weights(importance_logits, count_estimates)
        scaled = ops.affine(ops.reshape(weights, (1, self.n)), scale=float(self.n))
        attended = ops.transpose(ops.mul(ops.transpose(visual), scaled))
        return attended, weights


def importance_ground_truth(counts: np.ndarray) -> np.ndarray:
    """Per-patch share of the total count; uniform when the image is empty."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 0).any():
        raise InputError(f"negative patch count in {counts}")
    total = counts.sum()
    if total == 0:
        return np.full(counts.shape, 1.0 / counts.size)
    return counts / total


def importance_kl_loss(probs: Tensor, target: np.ndarray) -> Tensor:
    """(1/sqrt(P)) * KL(target || probs), with 0 log 0 taken as 0."""
    n = probs.size
    target = np.asarray(target, dtype=np.float64).reshape(n, 1)
    log_probs = ops.log(ops.clamp_min(ops.reshape(probs, (n, 1)), KL_CLAMP))
    cross = ops.sum_all(ops.mul(Tensor(target.astype(log_probs.dtype)), log_probs))
    entropy = float(np.sum(np.where(target > 0, target * np.log(target,
                    where=target > 0, out=np.zeros_like(target)), 0.0)))
    scale = 1.0 / math.sqrt(n)
    return ops.affine(cross, scale=-scale, shift=scale * entropy)


def count_loss(estimates: Tensor, target_counts: np.ndarray) -> Tensor | None:
    """Sum of squared per-patch errors over the squared image total.

    Returns None when the image total is zero (the term is skipped; callers
    count these events).
    """
    target = np.asarray(target_counts, dtype=np.float64).reshape(-1, 1)
    total = float(target.sum())
    if total <= 0:
        return None
    diff = ops.add(estimates, Tensor((-target).astype(estimates.dtype)))
    return ops.affine(ops.sum_all(ops.mul(diff, diff)), scale=1.0 / total**2)

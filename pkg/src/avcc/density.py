"""Cross-modality co-attention, the density map head, and the loss stack.

The co-attention forms a row-stochastic (P x P) matrix from the attended
features against the audio embedding tiled across patches (the visual
transpose stands in for the tiled audio in image-only mode) and mixes the
visual embeddings with it.  The result is reshaped into per-patch tiles,
assembled on the coarse grid and bilinearly resized to the full image;
summing pixels gives the count.  No activation is applied before the resize,
so early-training counts may be negative; they are reported as-is.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .config import Geometry
from .errors import DivergenceError, ShapeError
from .tensor import Tensor


@dataclass
class DensityMap:
    values: np.ndarray  # (W, H)

    @property
    def count(self) -> float:
        return float(self.values.sum())


def co_attention(attended: Tensor, audio_emb: Tensor | None, visual: Tensor,
                 return_attention: bool = False):
    """softmax(attended @ keys) @ visual with keys = audio tiled per patch.

    Image-only mode (audio_emb None) uses visual^T as the key matrix.
    """
    n, width = attended.shape
    if audio_emb is not None:
        keys = ops.matmul(audio_emb, Tensor(np.ones((1, n), dtype=audio_emb.dtype)))
    else:
        keys = ops.transpose(visual)
    # logits scaled by the inner dimension, as in the backbone fusion
    logits = ops.affine(ops.matmul(attended, keys), scale=1.0 / width)
    attn = ops.softmax(logits, axis=1)  # (P, P)
    mixed = ops.matmul(attn, visual)
    if return_attention:
        return mixed, attn
    return mixed


class DensityAssembler:
    """(P, Z) patch embeddings -> (W, H) density map.

    Each patch row becomes a (tile_w, tile_h) tile at the patch's grid cell;
    the coarse mosaic is bilinearly resized to the full image (a factor of 8
    in the full geometry, the generalized ratio elsewhere).
    """

    def __init__(self, geo: Geometry):
        self.geo = geo

    def __call__(self, patch_map: Tensor) -> Tensor:
        gw, gh = self.geo.grid
        tw, th = self.geo.tile
        tiles = ops.reshape(patch_map, (gw, gh, tw, th))
        coarse = ops.reshape(ops.permute(tiles, (0, 2, 1, 3)), (gw * tw, gh * th))
        return ops.bilinear_resize(coarse, (self.geo.width, self.geo.height))


def density_loss(predicted: Tensor, target: np.ndarray) -> Tensor:
    """Sum over all pixels of the squared difference."""
    if predicted.shape != tuple(np.shape(target)):
        raise ShapeError(f"density_loss: predicted {predicted.shape} vs "
                         f"target {np.shape(target)}")
    diff = ops.add(predicted, Tensor((-np.asarray(target)).astype(predicted.dtype)))
    return ops.sum_all(ops.mul(diff, diff))


def final_count(density) -> float:
    if isinstance(density, Tensor):
        return float(density.data.sum())
    return float(np.asarray(density).sum())


@dataclass
class LossReport:
    """The three loss terms for one sample; ablated terms are 0 and flagged."""

    loss_pir: float = 0.0
    loss_pce: float = 0.0
    loss_dm: float = 0.0
    total: float = 0.0
    has_pir: bool = False
    has_pce: bool = False

    def __add__(self, other: "LossReport") -> "LossReport":
        return LossReport(self.loss_pir + other.loss_pir,
                          self.loss_pce + other.loss_pce,
                          self.loss_dm + other.loss_dm,
                          self.total + other.total,
                          self.has_pir or other.has_pir,
                          self.has_pce or other.has_pce)

    def scaled(self, factor: float) -> "LossReport":
        return LossReport(self.loss_pir * factor, self.loss_pce * factor,
                          self.loss_dm * factor, self.total * factor,
                          self.has_pir, self.has_pce)


def combine_losses(pir_term: Tensor | None, pce_term: Tensor | None,
                   dm_term: Tensor) -> tuple[Tensor, LossReport]:
    """Unweighted sum of the present terms; aborts on non-finite values."""
    report = LossReport(loss_dm=float(dm_term.data))
    total = dm_term
    if pir_term is not None:
        report.loss_pir = float(pir_term.data)
        report.has_pir = True
        total = ops.add(total, pir_term)
    if pce_term is not None:
        report.loss_pce = float(pce_term.data)
        report.has_pce = True
        total = ops.add(total, pce_term)
    report.total = float(total.data)
    for name, value in (("pir", report.loss_pir), ("pce", report.loss_pce),
                        ("dm", report.loss_dm)):
        if not np.isfinite(value):
            raise DivergenceError(f"loss term '{name}' is not finite: {value}")
    return total, report


DENSITY_MAGIC = b"DMP1"


def write_density_bin(path: str, density: np.ndarray) -> None:
    """Binary dump: magic 'DMP1', u32 W, u32 H, float32 LE pixels."""
    arr = np.asarray(density, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DENSITY_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_density_bin(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DENSITY_MAGIC:
        raise ShapeError(f"{path}: bad magic {blob[:4]!r}")
    w, h = struct.unpack("<II", blob[4:12])
    return np.frombuffer(blob[12:], dtype="<f4").reshape(w, h).copy()


def write_pgm(path: str, density: np.ndarray) -> None:
    """8-bit PGM normalized to [0, 255] for quick visual inspection."""
    arr = np.asarray(density, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((arr - lo) * scale).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[0], img.shape[1]))
        fh.write(img.T.tobytes())  # PGM rows are image rows (height)

"""Ground-truth construction, count metrics, and image degradations.

Density targets place a 15x15 Gaussian kernel (variance 4.0) of unit mass on
every head point; kernels clipped by the image border are renormalized so
each head always contributes exactly one count.  Patch-count targets tally
head points into the patch grid.  Degradations are deterministic under a
given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PatchGrid
from .errors import InputError, UsageError
from .ops import bilinear_resize
from .tensor import Tensor

KERNEL_SIZE = 15
KERNEL_VAR = 4.0


def _gaussian_kernel() -> np.ndarray:
    half = KERNEL_SIZE // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * KERNEL_VAR))
    return g / g.sum()


_KERNEL = _gaussian_kernel()


def make_density_map(points, width: int, height: int) -> np.ndarray:
    """Head points -> (width, height) density map summing to len(points)."""
    dm = np.zeros((width, height), dtype=np.float64)
    half = KERNEL_SIZE // 2
    for x, y in np.atleast_2d(np.asarray(points, dtype=np.float64)) if len(points) else []:
        if not (0 <= x < width and 0 <= y < height):
            raise InputError(f"head point ({x}, {y}) outside {width}x{height} image")
        cx = min(int(round(x)), width - 1)
        cy = min(int(round(y)), height - 1)
        x0, x1 = max(0, cx - half), min(width, cx + half + 1)
        y0, y1 = max(0, cy - half), min(height, cy + half + 1)
        window = _KERNEL[x0 - cx + half : x1 - cx + half, y0 - cy + half : y1 - cy + half]
        dm[x0:x1, y0:y1] += window / window.sum()
    return dm


def patch_counts(points, grid: PatchGrid) -> np.ndarray:
    """Per-patch head tally; boundary points fall to the lower-index patch."""
    counts = np.zeros(grid.n_patches, dtype=np.float64)
    for x, y in np.atleast_2d(np.asarray(points, dtype=np.float64)) if len(points) else []:
        counts[grid.patch_index(x, y)] += 1.0
    return counts


def mae_rmse(estimates, truths) -> tuple[float, float]:
    """Mean absolute and root-mean-square count error.

    Sequential summation on purpose, so the values are reproducible and
    directly comparable against a plain-loop reference.
    """
    est = [float(v) for v in estimates]
    tru = [float(v) for v in truths]
    if len(est) == 0 or len(est) != len(tru):
        raise UsageError(f"mae_rmse: got {len(est)} estimates vs {len(tru)} truths")
    abs_sum = 0.0
    sq_sum = 0.0
    for e, c in zip(est, tru):
        abs_sum += abs(e - c)
        sq_sum += (e - c) ** 2
    n = len(est)
    return abs_sum / n, (sq_sum / n) ** 0.5


DEGRADATION_KINDS = ("gaussian_noise", "low_illumination", "occlusion", "low_resolution")


@dataclass(frozen=True)
class DegradationSpec:
    """One image-corruption setting.

    sigma and illum_noise are stds on the [0, 1] pixel scale (a table value
    of 25 means 25/255 here); decay_bound is the maximum brightness decay;
    occlusion_rate is the covered image fraction.
    """

    kind: str
    sigma: float = 0.0
    decay_bound: float = 0.0
    illum_noise: float = 0.0
    occlusion_rate: float = 0.0
    target_size: tuple[int, int] | None = None

    def validate(self) -> None:
        if self.kind not in DEGRADATION_KINDS:
            raise InputError(f"unknown degradation kind '{self.kind}'")
        if self.kind == "gaussian_noise" and self.sigma < 0:
            raise InputError(f"noise sigma must be >= 0, got {self.sigma}")
        if self.kind == "low_illumination" and not 0 <= self.decay_bound <= 1:
            raise InputError(f"decay bound must be in [0, 1], got {self.decay_bound}")
        if self.kind == "occlusion" and not 0 <= self.occlusion_rate <= 1:
            raise InputError(f"occlusion rate must be in [0, 1], "
                             f"got {self.occlusion_rate}")
        if self.kind == "low_resolution" and (
            self.target_size is None or min(self.target_size) < 1
        ):
            raise InputError(f"low_resolution needs a positive target size, "
                             f"got {self.target_size}")


def _occlusion_rect(rng: np.random.Generator, width: int, height: int,
                    rate: float) -> tuple[int, int, int, int]:
    """Choose an exact-area black rectangle when the target area factors.

    Aspect w/h is drawn in [0.5, 2]; the width is snapped to the divisor of
    the target pixel count nearest the ideal width (so the covered area is
    exact whenever some divisor pair fits the image), else rounded.
    """
    target = int(np.floor(rate * width * height))
    if target <= 0:
        return 0, 0, 0, 0
    aspect = rng.uniform(0.5, 2.0)
    ideal_w = np.sqrt(target * aspect)
    best_w = 0
    best_gap = None
    d = 1
    while d * d <= target:
        if target % d == 0:
            for w in (d, target // d):
                if w <= width and target // w <= height:
                    gap = abs(w - ideal_w)
                    if best_gap is None or gap < best_gap:
                        best_gap, best_w = gap, w
        d += 1
    if best_w:
        w, h = best_w, target // best_w
    else:
        w = int(np.clip(round(ideal_w), 1, width))
        h = int(np.clip(round(target / w), 1, height))
    x0 = int(rng.integers(0, width - w + 1))
    y0 = int(rng.integers(0, height - h + 1))
    return x0, y0, w, h


def degrade(image: np.ndarray, spec: DegradationSpec, seed: int) -> np.ndarray:
    """Apply one degradation to a (3, W, H) image with values in [0, 1]."""
    spec.validate()
    img = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if spec.kind == "gaussian_noise":
        if spec.sigma == 0.0:
            return img.copy()
        return np.clip(img + rng.normal(0.0, spec.sigma, img.shape), 0.0, 1.0)
    if spec.kind == "low_illumination":
        decay = rng.uniform(1.0 - spec.decay_bound, 1.0)
        out = img * decay
        if spec.illum_noise > 0:
            out = out + rng.normal(0.0, spec.illum_noise, img.shape)
        return np.clip(out, 0.0, 1.0)
    if spec.kind == "occlusion":
        out = img.copy()
        _, width, height = img.shape
        x0, y0, w, h = _occlusion_rect(rng, width, height, spec.occlusion_rate)
        out[:, x0 : x0 + w, y0 : y0 + h] = 0.0
        return out
    # low_resolution
    return bilinear_resize(Tensor(img), spec.target_size).data


def read_points(path: str) -> np.ndarray:
    """Annotation file: one 'x y' pair per line."""
    pts = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'x y', got '{line}'")
            pts.append((float(parts[0]), float(parts[1])))
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def write_points(path: str, points) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for x, y in np.atleast_2d(np.asarray(points, dtype=np.float64)) if len(points) else []:
            fh.write(f"{x:.3f} {y:.3f}\n")

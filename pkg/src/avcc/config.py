"""Run configuration: geometry modes, fusion schedule, ablation flags.

Image tensors are laid out (channels, width, height) and density maps
(width, height) throughout the repo.  Three geometries are supported:

  full     1024x576 input, stride-2 stem, 8x8 patch grid, 144-d embeddings
  low_res  128x72 input, stride-1 stem, 4x4 grid, 144-d embeddings
  toy      64x36 input, stride-1 stem, 2x2 grid, 36-d embeddings (test size)

The patch grid partitions the image exactly; a head-point on a patch boundary
belongs to the lower-index patch.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

from .errors import ConfigError

BRANCH_CHANNELS = (32, 64, 128)


@dataclass(frozen=True)
class PatchGrid:
    gw: int
    gh: int
    patch_w: int
    patch_h: int

    @property
    def n_patches(self) -> int:
        return self.gw * self.gh

    def column_of(self, x: float) -> int:
        return min(max(0, math.ceil(x) - 1), self.gw * self.patch_w - 1) // self.patch_w

    def row_of(self, y: float) -> int:
        return min(max(0, math.ceil(y) - 1), self.gh * self.patch_h - 1) // self.patch_h

    def patch_index(self, x: float, y: float) -> int:
        return self.column_of(x) * self.gh + self.row_of(y)


@dataclass(frozen=True)
class Geometry:
    name: str
    width: int
    height: int
    stem_stride: int          # 2 halves twice; 1 keeps full resolution
    grid: tuple[int, int]     # patches per axis (gw, gh)
    embed_dim: int            # per-patch embedding width
    tile: tuple[int, int]     # per-patch density tile (tile_w, tile_h)
    merge_pool: tuple[int, int, int]  # avg-pool factor per branch at the merge

    @property
    def patch_grid(self) -> PatchGrid:
        gw, gh = self.grid
        return PatchGrid(gw, gh, self.width // gw, self.height // gh)

    @property
    def stem_down(self) -> int:
        return self.stem_stride * self.stem_stride

    def branch_shape(self, branch: int) -> tuple[int, int, int]:
        down = self.stem_down * (1 << branch)
        return (BRANCH_CHANNELS[branch], self.width // down, self.height // down)

    @property
    def merge_shape(self) -> tuple[int, int]:
        c, w, h = self.branch_shape(0)
        f = self.merge_pool[0]
        return (w // f, h // f)

    @property
    def coarse_shape(self) -> tuple[int, int]:
        gw, gh = self.grid
        return (gw * self.tile[0], gh * self.tile[1])

    def validate(self) -> None:
        gw, gh = self.grid
        if self.width % gw or self.height % gh:
            raise ConfigError(f"{self.name}: grid {self.grid} does not divide "
                              f"{self.width}x{self.height}")
        if self.tile[0] * self.tile[1] != self.embed_dim:
            raise ConfigError(f"{self.name}: tile {self.tile} does not factor "
                              f"embed_dim {self.embed_dim}")
        for b in range(3):
            _, w, h = self.branch_shape(b)
            down = self.stem_down * (1 << b)
            if w * down != self.width or h * down != self.height:
                raise ConfigError(f"{self.name}: image {self.width}x{self.height} "
                                  f"not divisible by branch factor {down}")
            f = self.merge_pool[b]
            if w % f or h % f or (w // f, h // f) != self.merge_shape:
                raise ConfigError(f"{self.name}: merge pool {self.merge_pool} does "
                                  f"not align branch {b}")


GEOMETRIES = {
    "full": Geometry("full", 1024, 576, 2, (8, 8), 144, (16, 9), (8, 4, 2)),
    "low_res": Geometry("low_res", 128, 72, 1, (4, 4), 144, (16, 9), (8, 4, 2)),
    # tile (4, 9) keeps both coarse-to-image resize ratios integral (8x, 2x),
    # which makes the density head's pixel-mass factor exactly uniform
    "toy": Geometry("toy", 64, 36, 1, (2, 2), 36, (4, 9), (4, 2, 1)),
}
for _g in GEOMETRIES.values():
    _g.validate()


@dataclass(frozen=True)
class FusionSpec:
    srcs: tuple[int, ...]
    dst: int


@dataclass(frozen=True)
class StageSpec:
    branches: tuple[int, ...]
    fusions: tuple[FusionSpec, ...]


_THREE_WAY = (
    FusionSpec((0, 1), 2),
    FusionSpec((1, 2), 0),
    FusionSpec((0, 2), 1),
)

SCHEDULES = {
    "default": (
        StageSpec((0, 1), (FusionSpec((0,), 1), FusionSpec((1,), 0))),
        StageSpec((0, 1, 2), _THREE_WAY),
        StageSpec((0, 1, 2), _THREE_WAY),
    ),
    "none": (
        StageSpec((0, 1), ()),
        StageSpec((0, 1, 2), ()),
        StageSpec((0, 1, 2), ()),
    ),
    "single": (
        StageSpec((0,), ()),
        StageSpec((0,), ()),
        StageSpec((0,), ()),
    ),
}


def validate_schedule(stages) -> None:
    alive: set[int] = set()
    for i, stage in enumerate(stages):
        for b in stage.branches:
            if b not in (0, 1, 2):
                raise ConfigError(f"stage {i}: unknown branch {b}")
            if b > 0 and b - 1 not in alive and b - 1 not in stage.branches:
                raise ConfigError(f"stage {i}: branch {b} opened before branch {b - 1}")
        alive |= set(stage.branches)
        for fus in stage.fusions:
            for b in fus.srcs + (fus.dst,):
                if b not in alive:
                    raise ConfigError(
                        f"stage {i}: fusion {fus.srcs}->{fus.dst} references "
                        f"branch {b} before it exists")
            if fus.dst in fus.srcs:
                raise ConfigError(f"stage {i}: fusion target {fus.dst} is a source")


for _s in SCHEDULES.values():
    validate_schedule(_s)


@dataclass
class Config:
    """Everything the harness needs; mirrored one-to-one by CLI flags."""

    geometry: str = "toy"
    schedule: str = "default"

    # ablation switches
    no_pir: bool = False
    no_pce: bool = False
    no_avt: bool = False
    no_ccm: bool = False
    no_audio_in_fusion: bool = False
    single_branch: bool = False
    cc_v: bool = False

    # optimizer / training
    lr: float = 1e-5
    lr_decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    dropout: float = 0.3
    batch_size: int = 4
    epochs: int = 500
    eval_every: int = 1
    checkpoint_every: int = 0  # 0 = only final
    threads: int = 1
    occlude_prob: float = 0.0  # train-time occlusion augmentation probability
    occlude_max: float = 1.0

    # audio CNN
    afe_stages: int = 3
    afe_base_channels: int = 16
    afe_checkpoint: str = ""

    seed: int = 0
    dtype: str = "float32"

    data_dir: str = "data/train"
    val_dir: str = ""
    out_dir: str = "runs/run0"

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"unknown geometry '{self.geometry}'; "
                              f"choose from {sorted(GEOMETRIES)}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule '{self.schedule}'; "
                              f"choose from {sorted(SCHEDULES)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        env_seed = os.environ.get("AVCC_SEED")
        if env_seed is not None:
            self.seed = int(env_seed)

    @property
    def geo(self) -> Geometry:
        return GEOMETRIES[self.geometry]

    @property
    def stages(self):
        if self.single_branch:
            return SCHEDULES["single"]
        return SCHEDULES[self.schedule]

    @property
    def uses_audio(self) -> bool:
        return not self.cc_v

    def active_losses(self) -> tuple[str, ...]:
        names = []
        if not self.no_pir and not self.no_avt:
            names.append("pir")
        if not self.no_pce and not self.no_avt:
            names.append("pce")
        names.append("dm")
        return tuple(names)

    def np_dtype(self):
        import numpy as np

        return np.float32 if self.dtype == "float32" else np.float64


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"config key '{name}': cannot parse boolean from '{raw}'")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key '{name}': {exc}") from None


def load_config_file(path: str) -> dict:
    """Parse a flat key=value file into typed Config overrides."""
    fields = {f.name: f.type for f in dataclasses.fields(Config)}
    types = {"bool": bool, "int": int, "float": float, "str": str}
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            kind = fields[key]
            if isinstance(kind, str):
                kind = types[kind]
            overrides[key] = _coerce(key, kind, raw.strip())
    return overrides


def make_config(file: str | None = None, **overrides) -> Config:
    """Build a Config from an optional key=value file plus explicit overrides."""
    values = load_config_file(file) if file else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return Config(**values)

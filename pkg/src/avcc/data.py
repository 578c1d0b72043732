"""Synthetic scenes and on-disk dataset handling.

A scene is a textured background with small rendered person blobs, a one
second crowd-noise waveform, and the blob centers as the annotation.  The
waveform is unit-power babble noise scaled by log1p(count) plus fixed-level
distractor tones; the babble is orthogonalized against the tones, so for a
fixed audio seed the signal RMS is strictly increasing in the count.

Disk layout per dataset directory:

  manifest.txt              generation settings + one scene id per line
  scene_000000.ppm          binary P6 image
  scene_000000.wav          16-bit PCM mono, 16 kHz
  scene_000000.pts          'x y' head points, one per line
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE, compute_log_mel, read_wav, write_wav
from .config import Geometry
from .errors import InputError
from .groundtruth import read_points, write_points

AUDIO_GAIN = 0.05
DISTRACTOR_LEVEL = 0.02
N_DISTRACTORS = 3


@dataclass
class Scene:
    image: np.ndarray    # (3, W, H) float in [0, 1]
    samples: np.ndarray  # waveform in [-1, 1]
    points: np.ndarray   # (N, 2) head coordinates


def synth_crowd_audio(count: int, rng: np.random.Generator,
                      n_samples: int = SAMPLE_RATE) -> np.ndarray:
    """Crowd-noise proxy: RMS = sqrt((g*log1p(count))^2 + distractor power)."""
    t = np.arange(n_samples) / SAMPLE_RATE
    distractor = np.zeros(n_samples)
    for _ in range(N_DISTRACTORS):
        freq = rng.uniform(200.0, 4000.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        distractor += DISTRACTOR_LEVEL * np.sin(2.0 * np.pi * freq * t + phase)
    babble = rng.normal(0.0, 1.0, n_samples)
    norm = distractor / np.linalg.norm(distractor)
    babble -= (babble @ norm) * norm  # exact power law needs orthogonality
    babble /= np.sqrt(np.mean(babble**2))
    return AUDIO_GAIN * np.log1p(count) * babble + distractor


def _paint_blob(img: np.ndarray, x: float, y: float, radius: float,
                color: np.ndarray) -> None:
    _, width, height = img.shape
    r = int(np.ceil(3 * radius))
    x0, x1 = max(0, int(x) - r), min(width, int(x) + r + 1)
    y0, y1 = max(0, int(y) - r), min(height, int(y) + r + 1)
    gx = np.arange(x0, x1) - x
    gy = np.arange(y0, y1) - y
    bump = np.exp(-(gx[:, None] ** 2 + gy[None, :] ** 2) / (2 * radius**2))
    img[:, x0:x1, y0:y1] += color[:, None, None] * bump


def generate_scene(count: int, geo: Geometry, rng: np.random.Generator) -> Scene:
    width, height = geo.width, geo.height
    gx = np.linspace(0.0, 1.0, width)
    gy = np.linspace(0.0, 1.0, height)
    base = 0.35 + 0.25 * np.outer(gx, 1.0 - gy)
    tint = np.array([0.9, 1.0, 0.8])
    img = tint[:, None, None] * base[None]
    img += rng.normal(0.0, 0.02, img.shape)

    margin = 2.0
    points = rng.uniform([margin, margin],
                         [width - margin, height - margin], size=(count, 2))
    person = np.array([0.45, -0.25, -0.2])
    for x, y in points:
        _paint_blob(img, x, y, rng.uniform(1.2, 2.2), person)
    img = np.clip(img, 0.0, 1.0)
    samples = np.clip(synth_crowd_audio(count, rng), -1.0, 1.0)
    return Scene(img, samples, points)


def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary P6; image is (3, W, H) in [0, 1]."""
    arr = (np.clip(np.asarray(image), 0.0, 1.0) * 255.0).round().astype(np.uint8)
    _, width, height = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (width, height))
        fh.write(arr.transpose(2, 1, 0).tobytes())  # rows, cols, rgb


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise InputError(f"{path}: not a binary PPM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise InputError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    data = np.frombuffer(blob[pos : pos + 3 * width * height], dtype=np.uint8)
    img = data.reshape(height, width, 3).transpose(2, 1, 0)
    return img.astype(np.float64) / 255.0


def scene_id(index: int) -> str:
    return f"scene_{index:06d}"


def generate_dataset(out_dir: str, n: int, count_range: tuple[int, int],
                     seed: int, geo: Geometry) -> str:
    """Write n scenes plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence((seed, 0xDA7A))
    lo, hi = count_range
    ids = []
    for i, child in enumerate(root.spawn(n)):
        rng = np.random.default_rng(child)
        count = int(rng.integers(lo, hi + 1))
        scene = generate_scene(count, geo, rng)
        sid = scene_id(i)
        write_ppm(os.path.join(out_dir, sid + ".ppm"), scene.image)
        write_wav(os.path.join(out_dir, sid + ".wav"), scene.samples)
        write_points(os.path.join(out_dir, sid + ".pts"), scene.points)
        ids.append(sid)
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="ascii") as fh:
        fh.write(f"geometry={geo.name}\n")
        fh.write(f"seed={seed}\n")
        fh.write(f"count_range={lo},{hi}\n")
        fh.write(f"n={n}\n")
        for sid in ids:
            fh.write(sid + "\n")
    return manifest


class SceneDataset:
    """Lazy scene loader with an audit counter for audio file opens.

    Log-mel features are computed on first access and cached; image-only
    runs must never open a .wav file (checked by tests via audio_opens).
    """

    def __init__(self, directory: str, load_audio: bool = True):
        self.directory = directory
        self.load_audio = load_audio
        self.audio_opens = 0
        manifest = os.path.join(directory, "manifest.txt")
        if not os.path.exists(manifest):
            raise InputError(f"no manifest.txt in {directory}")
        self.meta = {}
        self.ids: list[str] = []
        with open(manifest, "r", encoding="ascii") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if "=" in line:
                    key, _, value = line.partition("=")
                    self.meta[key] = value
                else:
                    self.ids.append(line)
        self._lms_cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def image(self, index: int) -> np.ndarray:
        return read_ppm(os.path.join(self.directory, self.ids[index] + ".ppm"))

    def points(self, index: int) -> np.ndarray:
        return read_points(os.path.join(self.directory, self.ids[index] + ".pts"))

    def log_mel(self, index: int) -> np.ndarray | None:
        if not self.load_audio:
            return None
        if index not in self._lms_cache:
            self.audio_opens += 1
            wav = read_wav(os.path.join(self.directory, self.ids[index] + ".wav"))
            self._lms_cache[index] = compute_log_mel(wav)
        return self._lms_cache[index]

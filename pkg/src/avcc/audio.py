"""Audio pipeline: WAV input, 64x96 log-mel features, audio embedding CNN.

Fixed front-end constants (documented conventions, not tunables): 16 kHz
mono, periodic Hann window of 400 samples, hop 160, 64 triangular mel bands
spanning 0 Hz to Nyquist, log floor 1e-10.  One second of audio yields 98
frames which are cropped (or edge-padded) to exactly 96.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ops
from .errors import InputError
from .nn import ConvBnRelu, Dropout, Linear, Module
from .tensor import Tensor

SAMPLE_RATE = 16000
WINDOW = 400
HOP = 160
N_MELS = 64
N_FRAMES = 96
LOG_FLOOR = 1e-10
LMS_MAGIC = b"LMS1"


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1], mono
    sample_rate: int


def read_wav(path: str) -> Waveform:
    """Read 16-bit signed little-endian mono PCM."""
    with wave.open(str(path), "rb") as wav:
        if wav.getnchannels() != 1:
            raise InputError(f"{path}: expected mono audio, got "
                             f"{wav.getnchannels()} channels")
        if wav.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit PCM, got "
                             f"{8 * wav.getsampwidth()}-bit")
        n = wav.getnframes()
        if n == 0:
            raise InputError(f"{path}: empty waveform")
        raw = wav.readframes(n)
        rate = wav.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path: str, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip((pcm * 32768.0).round(), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(sample_rate)
        wav.writeframes(pcm.tobytes())


def hann_window(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = WINDOW,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular (peak 1) filters over rfft bins, 0 Hz to Nyquist."""
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (center - lo)
        fall = (hi - freqs) / (hi - center)
        bank[m] = np.maximum(0.0, np.minimum(rise, fall))
    return bank


def compute_log_mel(wave_or_samples, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Waveform -> (64, 96) log mel-power spectrogram.

    STFT frames are taken without centering; the frame axis is cropped or
    edge-padded to exactly N_FRAMES columns.
    """
    if isinstance(wave_or_samples, Waveform):
        samples = wave_or_samples.samples
        sample_rate = wave_or_samples.sample_rate
    else:
        samples = np.asarray(wave_or_samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise InputError("compute_log_mel expects a non-empty mono waveform")
    if samples.size < WINDOW:
        samples = np.pad(samples, (0, WINDOW - samples.size))
    n_frames = 1 + (samples.size - WINDOW) // HOP
    idx = np.arange(WINDOW)[None, :] + HOP * np.arange(n_frames)[:, None]
    frames = samples[idx] * hann_window(WINDOW)[None, :]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2  # (frames, bins)
    mel = mel_filterbank(N_MELS, WINDOW, sample_rate) @ power.T  # (mels, frames)
    if mel.shape[1] >= N_FRAMES:
        mel = mel[:, :N_FRAMES]
    else:
        mel = np.pad(mel, ((0, 0), (0, N_FRAMES - mel.shape[1])), mode="edge")
    return np.log(mel + LOG_FLOOR)


def dump_lms(path: str, lms: np.ndarray) -> None:
    """Binary dump: magic 'LMS1', u16 rows, u16 cols, float32 LE data."""
    arr = np.asarray(lms, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(LMS_MAGIC)
        fh.write(struct.pack("<HH", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_lms(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != LMS_MAGIC:
        raise InputError(f"{path}: bad magic {blob[:4]!r}")
    rows, cols = struct.unpack("<HH", blob[4:8])
    return np.frombuffer(blob[8:], dtype="<f4").reshape(rows, cols).copy()


class _ResidualPair(Module):
    """Two 3x3 convs with batchnorm and an identity skip."""

    def __init__(self, channels, seeds, dtype):
        super().__init__()
        self.a = ConvBnRelu(channels, channels, 3, seeds[0], padding=(1, 1), dtype=dtype)
        self.b = ConvBnRelu(channels, channels, 3, seeds[1], padding=(1, 1), dtype=dtype)

    def __call__(self, x):
        return ops.add(self.b(self.a(x)), x)


class AudioEmbedder(Module):
    """Small residual CNN turning the log-mel image into a (Z, 1) embedding.

    Stages halve the resolution and double the channels; a global average
    pool and a linear map produce the embedding.
    """

    def __init__(self, embed_dim, seed, stages=3, base_channels=16,
                 dropout=0.3, dtype=np.float64):
        super().__init__()
        seeds = seed.spawn(2 * stages + stages + 2)
        self.stages = []
        c_in = 1
        c = base_channels
        k = 0
        blocks = []
        for _ in range(stages):
            entry = ConvBnRelu(c_in, c, 3, seeds[k], stride=(2, 2), padding=(1, 1),
                               dtype=dtype)
            res = _ResidualPair(c, seeds[k + 1 : k + 3], dtype)
            blocks.append(entry)
            blocks.append(res)
            k += 3
            c_in, c = c, c * 2
        self.blocks = blocks
        self.head = Linear(c_in, embed_dim, seeds[k], dtype=dtype)
        self.drop = Dropout(dropout, seeds[k + 1])
        self.embed_dim = embed_dim

    def __call__(self, log_mel: Tensor) -> Tensor:
        x = ops.reshape(log_mel, (1,) + tuple(log_mel.shape))
        for block in self.blocks:
            x = block(x)
        pooled = ops.avg_pool2d(x, (x.shape[1], x.shape[2]))  # (c, 1, 1)
        flat = ops.reshape(pooled, (1, x.shape[0]))
        emb = self.drop(self.head(flat))  # (1, Z)
        return ops.transpose(emb)  # (Z, 1)

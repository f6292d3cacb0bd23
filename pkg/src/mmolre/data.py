"""Seeded synthetic multi-task data and the ``MOLR`` feature-file format.

Feature file layout (all little-endian)::

    b"MOLR"  u16 version  u32 O  u32 T_t  u32 T_a  u32 d  u32 C
    O times: f32[T_t*d] x_t, f32[T_a*d] x_a, f32 y_r, u8[C] y_c

Arrays are row-major. Files are float32 on disk and float64 in memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Sample

MAGIC = b"MOLR"
VERSION = 1
_HEADER = struct.Struct("<4sH5I")
HEADER_SIZE = _HEADER.size


class FeatureFormatError(ValueError):
    """Base class for malformed feature files."""


class BadMagicError(FeatureFormatError):
    pass


class UnsupportedVersionError(FeatureFormatError):
    pass


class LengthMismatchError(FeatureFormatError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: header implies {expected} bytes, file has {actual} bytes")
        self.expected = expected
        self.actual = actual


class TruncatedFileError(LengthMismatchError):
    pass


class InvalidPayloadError(FeatureFormatError):
    pass


@dataclass
class DatasetConfig:
    n_samples: int = 256
    t_text: int = 8
    t_audio: int = 10
    d: int = 32
    n_classes: int = 6
    latent_dim: int = 8
    task_correlation: float = 0.7
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if not 0.0 <= self.task_correlation <= 1.0:
            raise ValueError(f"task_correlation must lie in [0, 1], got {self.task_correlation}")
        for name in ("t_text", "t_audio", "d", "n_classes", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass
class Latents:
    shared: np.ndarray  # [O, L]
    drive_sa: np.ndarray  # [O, L]
    drive_er: np.ndarray  # [O, L]
    sentiment_score: np.ndarray  # [O]
    emotion_score: np.ndarray  # [O, C]
    sentiment_direction: np.ndarray  # [L]


def _render(rng, t_len: int, n_latent: int, d: int):
    """A modality renderer: fixed time modulation [T, n_latent] and a map [n_latent, d]."""
    freq = rng.uniform(0.2, 1.5, size=n_latent)
    phase = rng.uniform(0, 2 * np.pi, size=n_latent)
    t = np.arange(t_len)[:, None]
    modulation = 1.0 + 0.5 * np.cos(freq * t + phase)
    mixing = rng.normal(0.0, 1.0 / np.sqrt(n_latent), size=(n_latent, d))
    return modulation, mixing


def generate_dataset(cfg: DatasetConfig, return_latents: bool = False):
    """Draw ``cfg.n_samples`` samples; everything is a function of ``cfg.seed``.

    A shared latent ``u`` and task latents ``v_sa``/``v_er`` are mixed with
    weight ``task_correlation`` into each task's drive. Sentiment is a clipped
    projection of the SA drive, emotions are thresholded logits of the ER
    drive. Text and audio features render all three latents over time.
    """
    rng = np.random.default_rng(cfg.seed)
    L, C, rho = cfg.latent_dim, cfg.n_classes, cfg.task_correlation

    w_s = rng.normal(0.0, 2.0 / np.sqrt(L), size=L)
    polarity = rng.choice([-1.0, 1.0], size=C)
    w_e = 0.7 * np.outer(polarity, w_s) + rng.normal(0.0, 1.0 / np.sqrt(L), size=(C, L))
    b_e = rng.uniform(-0.5, 0.5, size=C)
    renderers = [_render(rng, cfg.t_text, 3 * L, cfg.d), _render(rng, cfg.t_audio, 3 * L, cfg.d)]

    O = cfg.n_samples
    u = rng.normal(size=(O, L))
    v_sa = rng.normal(size=(O, L))
    v_er = rng.normal(size=(O, L))
    drive_sa = rho * u + (1.0 - rho) * v_sa
    drive_er = rho * u + (1.0 - rho) * v_er
    s_score = drive_sa @ w_s
    e_score = drive_er @ w_e.T + b_e
    y_r = np.clip(s_score, -3.0, 3.0)
    y_c = (e_score >= 0.0).astype(np.uint8)

    z = np.concatenate([u, v_sa, v_er], axis=1)
    feats = []
    for modulation, mixing in renderers:
        x = (z[:, None, :] * modulation[None]) @ mixing
        x += rng.normal(0.0, cfg.noise_std, size=x.shape)
        feats.append(x)

    samples = [Sample(feats[0][i], feats[1][i], y_r[i], y_c[i]) for i in range(O)]
    if return_latents:
        return samples, Latents(u, drive_sa, drive_er, s_score, e_score, w_s)
    return samples


def split_dataset(samples: Sequence[Sample], val_fraction: float = 0.2):
    n_val = int(round(len(samples) * val_fraction))
    return list(samples[n_val:]), list(samples[:n_val])


def write_features(path: str | Path, samples: Sequence[Sample]) -> None:
    if samples:
        T_t, d = samples[0].x_t.shape
        T_a = samples[0].x_a.shape[0]
        C = samples[0].y_c.shape[0]
    else:
        T_t = T_a = d = C = 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(samples), T_t, T_a, d, C))
        for i, s in enumerate(samples):
            if s.x_t.shape != (T_t, d) or s.x_a.shape != (T_a, d) or s.y_c.shape != (C,):
                raise ValueError(f"sample {i} shapes differ from sample 0")
            fh.write(s.x_t.astype("<f4").tobytes())
            fh.write(s.x_a.astype("<f4").tobytes())
            fh.write(struct.pack("<f", s.y_r))
            fh.write(s.y_c.astype(np.uint8).tobytes())


def read_features(path: str | Path) -> list[Sample]:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, found {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(path, _HEADER.size, len(buf))
    _, version, O, T_t, T_a, d, C = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version} (expected {VERSION})")
    per_sample = 4 * (T_t * d + T_a * d + 1) + C
    expected = _HEADER.size + O * per_sample
    if len(buf) < expected:
        raise TruncatedFileError(path, expected, len(buf))
    if len(buf) != expected:
        raise LengthMismatchError(path, expected, len(buf))

    samples = []
    off = _HEADER.size
    for i in range(O):
        x_t = np.frombuffer(buf, "<f4", T_t * d, off).reshape(T_t, d)
        off += 4 * T_t * d
        x_a = np.frombuffer(buf, "<f4", T_a * d, off).reshape(T_a, d)
        off += 4 * T_a * d
        (y_r,) = struct.unpack_from("<f", buf, off)
        off += 4
        y_c = np.frombuffer(buf, np.uint8, C, off)
        off += C
        if not np.isfinite(y_r):
            raise InvalidPayloadError(f"{path}: sample {i} has non-finite y_r")
        if np.any(y_c > 1):
            raise InvalidPayloadError(f"{path}: sample {i} has emotion labels outside {{0, 1}}")
        samples.append(Sample(x_t.astype(np.float64), x_a.astype(np.float64), y_r, y_c.copy()))
    return samples

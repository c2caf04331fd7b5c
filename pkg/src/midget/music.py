"""Music feature tracks, beat curves and the learned music downsampler."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from midget.errors import FormatError, ValidationError

MUSIC_MAGIC = b"MIDM"
_HEADER = struct.Struct("<4sIII")  # magic, fps, frames, dim


@dataclass(frozen=True)
class MusicFeatureTrack:
    """Frame-aligned music features ``(T, C_m)`` plus annotated beat frames."""

    fps: float
    features: np.ndarray
    beat_frames: tuple

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValidationError(f"features must be a non-empty (T, C) matrix, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValidationError("music features contain non-finite values")
        if not (isinstance(self.fps, (int, float)) and math.isfinite(self.fps) and self.fps > 0):
            raise ValidationError(f"fps must be a positive number, got {self.fps!r}")
        beats = tuple(int(b) for b in self.beat_frames)
        if any(b < 0 or b >= feats.shape[0] for b in beats):
            raise ValidationError(f"beat frames must lie in [0, {feats.shape[0]})")
        if list(beats) != sorted(set(beats)):
            raise ValidationError("beat frames must be strictly increasing")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "beat_frames", beats)

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, MusicFeatureTrack):
            return NotImplemented
        return (
            self.fps == other.fps
            and self.beat_frames == other.beat_frames
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True)
class DownsampledMusic:
    features: np.ndarray  # (T', C_music)


def save_music(track: MusicFeatureTrack, path) -> Path:
    path = Path(path)
    if path.suffix == ".musbin":
        if float(track.fps) != int(track.fps):
            raise ValidationError("binary music files need an integer fps")
        payload = _HEADER.pack(MUSIC_MAGIC, int(track.fps), track.frames, track.dim)
        payload += track.features.astype("<f4").tobytes()
        payload += struct.pack("<I", len(track.beat_frames))
        payload += np.asarray(track.beat_frames, dtype="<u4").tobytes()
    else:
        payload = json.dumps(
            {
                "fps": track.fps,
                "dim": track.dim,
                "frames": track.frames,
                "data": track.features.reshape(-1).tolist(),
                "beats": list(track.beat_frames),
            }
        ).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    return path


def load_music(path) -> MusicFeatureTrack:
    path = Path(path)
    if path.suffix == ".musbin":
        return _load_music_bin(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    for key in ("fps", "dim", "frames", "data", "beats"):
        if key not in doc:
            raise FormatError(f"{path}: missing key {key!r}")
    dim, frames = doc["dim"], doc["frames"]
    if not isinstance(dim, int) or not isinstance(frames, int) or dim < 1 or frames < 1:
        raise FormatError(f"{path}: malformed header dim={dim!r} frames={frames!r}")
    try:
        data = np.asarray(doc["data"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: data is not a flat numeric array") from exc
    if data.ndim != 1 or data.size != frames * dim:
        raise FormatError(f"{path}: expected {frames * dim} values, found {data.size}")
    beats = doc["beats"]
    if not isinstance(beats, list) or not all(isinstance(b, int) for b in beats):
        raise FormatError(f"{path}: beats must be an integer array")
    return MusicFeatureTrack(doc["fps"], data.reshape(frames, dim), beats)


def _load_music_bin(path: Path) -> MusicFeatureTrack:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, fps, frames, dim = _HEADER.unpack_from(raw)
    if magic != MUSIC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    n_feat = frames * dim * 4
    off = _HEADER.size
    if len(raw) < off + n_feat + 4:
        raise FormatError(f"{path}: truncated feature block")
    data = np.frombuffer(raw[off:off + n_feat], dtype="<f4").astype(np.float64)
    (n_beats,) = struct.unpack_from("<I", raw, off + n_feat)
    beat_off = off + n_feat + 4
    if len(raw) != beat_off + 4 * n_beats:
        raise FormatError(f"{path}: beat block has wrong length")
    beats = np.frombuffer(raw[beat_off:], dtype="<u4").tolist()
    return MusicFeatureTrack(fps, data.reshape(frames, dim), beats)


# ------------------------------------------------------------------ beat curves


def gaussian_beat_curve(beats, length: int, sigma: float) -> np.ndarray:
    """Sum of unnormalized Gaussian bumps ``exp(-(t-b)^2 / 2 sigma^2)`` over beats."""
    t = np.arange(length, dtype=np.float64)[:, None]
    b = np.asarray(list(beats), dtype=np.float64)[None, :]
    if b.size == 0:
        return np.zeros(length)
    return np.exp(-((t - b) ** 2) / (2.0 * sigma**2)).sum(axis=1)


def beat_curve_from_annotations(track: MusicFeatureTrack, length: int, sigma: float = 2.0) -> np.ndarray:
    """Music beat probability curve, peak-normalized to 1 (all zeros without beats)."""
    curve = gaussian_beat_curve(track.beat_frames, length, sigma)
    peak = curve.max() if curve.size else 0.0
    if peak <= 0.0:
        return np.zeros(length)
    return curve / peak


# ------------------------------------------------------------------ downsampling


def _check_divisible(frames: int, rate: int) -> None:
    if frames % rate:
        raise ValidationError(f"{frames} frames is not divisible by the downsample rate {rate}")


def naive_downsample(track: MusicFeatureTrack, rate: int = 8) -> DownsampledMusic:
    """Keep every ``rate``-th frame. Parameter-free baseline for the learned extractor."""
    _check_divisible(track.frames, rate)
    return DownsampledMusic(track.features[::rate].copy())


class ResidualDownBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel_size=3, stride=2, padding=1)
        self.act = nn.GELU()
        self.proj = nn.Conv1d(c_in, c_out, kernel_size=1, stride=2)

    def forward(self, x):
        return self.act(self.conv(x)) + self.proj(x)


class MusicExtractor(nn.Module):
    """Strided 1-D conv + residual blocks mapping ``(B, T, C_m)`` to ``(B, T/rate, C_music)``."""

    def __init__(self, in_dim: int, out_dim: int, rate: int = 8, hidden: int | None = None):
        super().__init__()
        n_blocks = int(round(math.log2(rate)))
        if rate < 1 or 2**n_blocks != rate:
            raise ValidationError(f"downsample rate must be a power of two, got {rate}")
        hidden = hidden or out_dim
        widths = [in_dim] + [hidden] * (n_blocks - 1) + [out_dim]
        self.rate = rate
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.blocks = nn.Sequential(*[ResidualDownBlock(a, b) for a, b in zip(widths[:-1], widths[1:])])
        if n_blocks == 0:
            self.blocks = nn.Sequential(nn.Conv1d(in_dim, out_dim, kernel_size=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] % self.rate:
            raise ValidationError(f"{x.shape[1]} frames is not divisible by the downsample rate {self.rate}")
        return self.blocks(x.transpose(1, 2)).transpose(1, 2)


def extract(track: MusicFeatureTrack, extractor: MusicExtractor) -> DownsampledMusic:
    _check_divisible(track.frames, extractor.rate)
    param = next(extractor.parameters())
    x = torch.tensor(track.features, dtype=param.dtype).unsqueeze(0)
    with torch.no_grad():
        out = extractor(x)[0]
    return DownsampledMusic(out.numpy().astype(np.float64))

"""Skeletal motion sequences: validation, file formats, derivatives and body splits."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from midget.errors import FormatError, ValidationError

MOTION_MAGIC = b"MIDG"
_HEADER = struct.Struct("<4sIII")  # magic, fps, frames, joints

# SMPL ordering: pelvis, hips, knees, ankles, feet
DEFAULT_LOWER = (0, 1, 2, 4, 5, 7, 8, 10, 11)


@dataclass(frozen=True)
class MotionSequence:
    """World-space joint positions, shape ``(frames, joints, 3)`` in meters."""

    fps: float
    positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64, copy=True)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise ValidationError(f"positions must have shape (T, J, 3), got {pos.shape}")
        if pos.shape[0] < 1 or pos.shape[1] < 1:
            raise ValidationError(f"empty motion {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("motion contains non-finite values")
        if not (isinstance(self.fps, (int, float)) and math.isfinite(self.fps) and self.fps > 0):
            raise ValidationError(f"fps must be a positive number, got {self.fps!r}")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def frames(self) -> int:
        return self.positions.shape[0]

    @property
    def joints(self) -> int:
        return self.positions.shape[1]

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.positions, other.positions)

    __hash__ = None


@dataclass(frozen=True)
class DerivativeTrack:
    velocity: np.ndarray  # (T-1, J, 3), meters per frame
    acceleration: np.ndarray  # (T-2, J, 3), meters per frame^2


@dataclass(frozen=True)
class BodySplit:
    upper_indices: tuple
    lower_indices: tuple
    joints: int = field(default=24)

    def __post_init__(self):
        upper = tuple(int(i) for i in self.upper_indices)
        lower = tuple(int(i) for i in self.lower_indices)
        object.__setattr__(self, "upper_indices", upper)
        object.__setattr__(self, "lower_indices", lower)
        if not upper or not lower:
            raise ValidationError("both halves of a body split must be non-empty")
        for idx in upper + lower:
            if not 0 <= idx < self.joints:
                raise ValidationError(f"joint index {idx} out of range for J={self.joints}")
        if len(set(upper)) != len(upper) or len(set(lower)) != len(lower):
            raise ValidationError("duplicate joint index in body split")
        if set(upper) & set(lower):
            raise ValidationError(f"overlapping split indices: {sorted(set(upper) & set(lower))}")
        if set(upper) | set(lower) != set(range(self.joints)):
            raise ValidationError("body split must cover every joint")

    @classmethod
    def default(cls, joints: int = 24) -> "BodySplit":
        if joints != 24:
            raise ValidationError("the default split is defined for the 24-joint SMPL skeleton only")
        lower = DEFAULT_LOWER
        upper = tuple(i for i in range(joints) if i not in lower)
        return cls(upper, lower, joints)


def derivatives(m: MotionSequence) -> DerivativeTrack:
    """Forward-difference velocity and acceleration."""
    if m.frames < 3:
        raise ValidationError(f"derivatives need at least 3 frames, got {m.frames}")
    vel = np.diff(m.positions, axis=0)
    acc = np.diff(vel, axis=0)
    return DerivativeTrack(vel, acc)


def split_body(m: MotionSequence, split: BodySplit) -> tuple[MotionSequence, MotionSequence]:
    if m.joints != split.joints:
        raise ValidationError(f"split is for J={split.joints}, motion has J={m.joints}")
    upper = m.positions[:, list(split.upper_indices)]
    lower = m.positions[:, list(split.lower_indices)]
    return MotionSequence(m.fps, upper), MotionSequence(m.fps, lower)


def merge_body(upper: MotionSequence, lower: MotionSequence, split: BodySplit) -> MotionSequence:
    """Inverse of :func:`split_body`."""
    if upper.frames != lower.frames:
        raise ValidationError("upper and lower halves differ in length")
    if upper.joints != len(split.upper_indices) or lower.joints != len(split.lower_indices):
        raise ValidationError("joint counts do not match the split")
    pos = np.empty((upper.frames, split.joints, 3))
    pos[:, list(split.upper_indices)] = upper.positions
    pos[:, list(split.lower_indices)] = lower.positions
    return MotionSequence(upper.fps, pos)


def speed_curve(m: MotionSequence) -> np.ndarray:
    """Per-frame speed ``||x[t+1] - x[t]||`` over all joints, length T-1."""
    diff = np.diff(m.positions, axis=0).reshape(m.frames - 1, -1)
    return np.sqrt(np.sum(diff * diff, axis=1))


# --------------------------------------------------------------------------- I/O


def save_motion(m: MotionSequence, path) -> Path:
    """Write ``.mjson`` (exact float64 text) or ``.mbin`` (float32 binary) by suffix."""
    path = Path(path)
    if path.suffix == ".mbin":
        if float(m.fps) != int(m.fps):
            raise ValidationError("binary motion files need an integer fps")
        payload = _HEADER.pack(MOTION_MAGIC, int(m.fps), m.frames, m.joints)
        payload += m.positions.astype("<f4").tobytes()
        _atomic_write(path, payload)
    else:
        doc = {
            "fps": m.fps,
            "joints": m.joints,
            "frames": m.frames,
            "data": m.positions.reshape(-1).tolist(),
        }
        _atomic_write(path, json.dumps(doc).encode())
    return path


def load_motion(path) -> MotionSequence:
    path = Path(path)
    if path.suffix == ".mbin":
        return _load_motion_bin(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    for key in ("fps", "joints", "frames", "data"):
        if key not in doc:
            raise FormatError(f"{path}: missing header key {key!r}")
    fps, joints, frames = doc["fps"], doc["joints"], doc["frames"]
    if not isinstance(joints, int) or not isinstance(frames, int) or joints < 1 or frames < 1:
        raise FormatError(f"{path}: malformed header joints={joints!r} frames={frames!r}")
    if isinstance(fps, bool) or not isinstance(fps, (int, float)) or fps <= 0:
        raise FormatError(f"{path}: malformed header fps={fps!r}")
    try:
        data = np.asarray(doc["data"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: data is not a flat numeric array") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: data must be a flat array")
    expected = frames * joints * 3
    if data.size < expected:
        raise FormatError(f"{path}: truncated data, header needs {expected} values, found {data.size}")
    if data.size > expected:
        raise FormatError(f"{path}: {data.size - expected} trailing values beyond header size")
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: non-finite values in motion data")
    return MotionSequence(fps, data.reshape(frames, joints, 3))


def _load_motion_bin(path: Path) -> MotionSequence:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the 16-byte header")
    magic, fps, frames, joints = _HEADER.unpack_from(raw)
    if magic != MOTION_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if fps == 0 or frames == 0 or joints == 0:
        raise FormatError(f"{path}: malformed header fps={fps} frames={frames} joints={joints}")
    expected = frames * joints * 3 * 4
    body = raw[_HEADER.size:]
    if len(body) < expected:
        raise FormatError(f"{path}: truncated data, expected {expected} bytes, found {len(body)}")
    if len(body) > expected:
        raise FormatError(f"{path}: {len(body) - expected} trailing bytes")
    data = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: non-finite values in motion data")
    return MotionSequence(fps, data.reshape(frames, joints, 3))


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


# --------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    frames: int = 64
    fps: int = 30
    beat_period: int = 8
    seed: int = 0
    joints: int = 24
    music_dim: int = 35
    beat_offset: int = 0
    pose_seed: int | None = None
    tempo_jitter: int = 0


def generate_synthetic(spec: SyntheticSpec):
    """Beat-locked synthetic dance and its paired music track.

    Every joint shuttles back and forth along its own direction. The step taken
    from frame ``t`` to ``t+1`` has length ``base + 1 - cos(2*pi*phase)``
    (scaled per joint), where ``phase`` is the position of ``t`` inside its
    beat interval. The whole-body speed curve therefore has a strict minimum
    at every beat frame, where the shuttle direction also reverses. With
    ``tempo_jitter`` > 0 each interval is ``beat_period`` plus a uniform
    integer in ``[-jitter, jitter]``.

    Draws from ``default_rng(seed)`` in this order: rest pose (J, 3), shuttle
    directions (J, 3), per-joint amplitudes (J,), beat intervals (only when
    jittered), music noise (T, dim - 2).
    With ``pose_seed`` set, the three skeleton draws come from
    ``default_rng(pose_seed)`` instead, so one dancer can be paired with
    several tracks.
    """
    from midget.music import MusicFeatureTrack, gaussian_beat_curve

    if spec.beat_period < 2:
        raise ValidationError(f"beat period must be at least 2 frames, got {spec.beat_period}")
    if spec.frames < 2 or spec.music_dim < 2:
        raise ValidationError("synthetic data needs frames >= 2 and music_dim >= 2")
    rng = np.random.default_rng(spec.seed)
    pose_rng = rng if spec.pose_seed is None else np.random.default_rng(spec.pose_seed)
    T, J, P = spec.frames, spec.joints, spec.beat_period

    rest = pose_rng.normal(0.0, 0.3, size=(J, 3))
    dirs = pose_rng.normal(size=(J, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = pose_rng.uniform(0.01, 0.04, size=J)

    beats = _beat_frames(spec, rng)
    # phase within the surrounding beat interval, extended past both ends
    knots = np.asarray([beats[0] - P] + beats + [max(beats[-1] + P, T)])
    t = np.arange(T - 1)
    k = np.searchsorted(knots, t, side="right") - 1
    phase = (t - knots[k]) / (knots[k + 1] - knots[k])
    step = 0.1 + 1.0 - np.cos(2.0 * np.pi * phase)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    shuttle = np.concatenate([[0.0], np.cumsum(sign * step)])
    positions = rest[None] + shuttle[:, None, None] * (amps[:, None] * dirs)[None]
    motion = MotionSequence(spec.fps, positions)

    envelope = gaussian_beat_curve(beats, T, sigma=2.0)
    onehot = np.zeros(T)
    onehot[beats] = 1.0
    noise = rng.normal(0.0, 0.1, size=(T, spec.music_dim - 2))
    features = np.column_stack([envelope, onehot, noise])
    track = MusicFeatureTrack(spec.fps, features, beats)
    return motion, track


def _beat_frames(spec: SyntheticSpec, rng) -> list:
    P, j = spec.beat_period, spec.tempo_jitter
    if j == 0:
        return list(range(spec.beat_offset % P, spec.frames, P))
    if j < 0 or P - j < 2:
        raise ValidationError(f"tempo jitter {j} leaves beat intervals shorter than 2 frames")
    beats = [spec.beat_offset % P]
    while True:
        nxt = beats[-1] + P + int(rng.integers(-j, j + 1))
        if nxt >= spec.frames:
            return beats
        beats.append(nxt)


def as_array(seq: Sequence[MotionSequence]) -> np.ndarray:
    """Stack equal-length motions into ``(B, T, J, 3)``."""
    return np.stack([m.positions for m in seq])

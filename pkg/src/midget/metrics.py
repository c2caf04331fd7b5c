"""Evaluation metrics: Frechet distance, diversity, motion beats, BA/BC scores."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from midget import kernels
from midget.errors import ValidationError
from midget.motion import MotionSequence, derivatives, speed_curve

log = logging.getLogger(__name__)

# (joint a, joint b, threshold in meters, True if the descriptor fires when closer)
# SMPL joint ordering.
GEOMETRIC_DESCRIPTORS = (
    (22, 23, 0.30, True),  # hands together
    (22, 15, 0.35, True),  # left hand at head
    (23, 15, 0.35, True),  # right hand at head
    (22, 0, 0.30, True),  # left hand at pelvis
    (23, 0, 0.30, True),  # right hand at pelvis
    (10, 11, 0.50, False),  # wide stance
    (4, 5, 0.25, True),  # knees together
    (20, 16, 0.50, False),  # left arm stretched
    (21, 17, 0.50, False),  # right arm stretched
    (10, 0, 0.70, True),  # left leg drawn up
    (11, 0, 0.70, True),  # right leg drawn up
    (22, 11, 0.60, True),  # left hand to right foot
    (23, 10, 0.60, True),  # right hand to left foot
    (20, 21, 1.20, False),  # arms spread wide
)


@dataclass(frozen=True)
class FeatureSet:
    kind: str  # "kinetic" | "geometric"
    vectors: np.ndarray  # (M, F)

    def __post_init__(self):
        vec = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if not np.all(np.isfinite(vec)):
            raise ValidationError("feature vectors must be finite")
        object.__setattr__(self, "vectors", vec)


@dataclass(frozen=True)
class BeatSet:
    times: tuple
    fps: float = 30.0

    def __post_init__(self):
        times = tuple(int(t) for t in self.times)
        if any(t < 0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("beat times must be nonnegative and strictly increasing")
        object.__setattr__(self, "times", times)

    def __len__(self):
        return len(self.times)


def kinetic_features(m: MotionSequence) -> np.ndarray:
    """Per-joint mean squared speed, then per-joint mean squared acceleration (2J values)."""
    d = derivatives(m)
    vel = np.mean(np.sum(d.velocity**2, axis=-1), axis=0)
    acc = np.mean(np.sum(d.acceleration**2, axis=-1), axis=0)
    return np.concatenate([vel, acc])


def geometric_features(m: MotionSequence, descriptors=GEOMETRIC_DESCRIPTORS) -> np.ndarray:
    """Fraction of frames on which each thresholded inter-joint distance descriptor fires."""
    if m.joints != 24:
        raise ValidationError(f"geometric descriptors are defined for 24 joints, got {m.joints}")
    out = np.empty(len(descriptors))
    for i, (a, b, thr, closer) in enumerate(descriptors):
        dist = np.linalg.norm(m.positions[:, a] - m.positions[:, b], axis=-1)
        fired = dist < thr if closer else dist > thr
        out[i] = fired.mean()
    return out


def feature_set(motions, kind: str) -> FeatureSet:
    fn = {"kinetic": kinetic_features, "geometric": geometric_features}[kind]
    return FeatureSet(kind, np.stack([fn(m) for m in motions]))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """``||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` for PSD covariances.

    The trace of the square root is taken from the eigenvalues of the
    symmetric product ``S1^(1/2) S2 S1^(1/2)``, which share the spectrum of
    ``S1 S2``.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    root1 = _psd_sqrt(sigma1)
    prod = root1 @ sigma2 @ root1
    eig = np.linalg.eigvalsh((prod + prod.T) / 2)
    scale = max(1.0, float(np.abs(eig).max(initial=0.0)))
    if np.any(eig < -1e-8 * scale):
        log.warning(
            "covariance product has negative eigenvalue %.3g; clamping to zero (ill-conditioned covariance)",
            eig.min(),
        )
    eig = np.clip(eig, 0.0, None)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.sum(np.sqrt(eig)))
    return max(value, 0.0)


def fid(real, gen) -> float:
    if isinstance(real, FeatureSet) and isinstance(gen, FeatureSet) and real.kind != gen.kind:
        raise ValidationError(f"cannot compare {real.kind} and {gen.kind} features")
    x = real.vectors if isinstance(real, FeatureSet) else np.atleast_2d(np.asarray(real, dtype=np.float64))
    y = gen.vectors if isinstance(gen, FeatureSet) else np.atleast_2d(np.asarray(gen, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValidationError(f"feature widths differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValidationError("FID needs at least two vectors per set")
    return frechet_distance(
        x.mean(0), np.cov(x, rowvar=False, ddof=1), y.mean(0), np.cov(y, rowvar=False, ddof=1)
    )


def diversity(fs) -> float:
    """Mean Euclidean distance over all unordered pairs of rows."""
    x = fs.vectors if isinstance(fs, FeatureSet) else np.atleast_2d(np.asarray(fs, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValidationError("diversity needs at least two feature vectors")
    return float(pdist(x).mean())


# ------------------------------------------------------------------ beats


def extract_motion_beats(m: MotionSequence) -> BeatSet:
    """Dance beats at interior strict minima of the speed curve (plateaus: first frame)."""
    if m.frames < 3:
        raise ValidationError(f"beat extraction needs at least 3 frames, got {m.frames}")
    return BeatSet(tuple(kernels.speed_minima(speed_curve(m)).tolist()), m.fps)


def detectable_beats(beats, frames: int) -> tuple:
    """Beats that a speed-minimum detector could report for a ``frames``-long motion.

    The speed curve has ``frames - 1`` samples and only interior samples can
    be strict minima, so frames ``1 .. frames - 3`` are detectable.
    """
    return tuple(int(b) for b in beats if 1 <= b <= frames - 3)


def _times(b) -> np.ndarray:
    if isinstance(b, BeatSet):
        return np.asarray(b.times, dtype=np.float64)
    return np.asarray(sorted(b), dtype=np.float64)


def _kernel_mean(src, tgt, sigma, squared, negate) -> float:
    src, tgt = _times(src), _times(tgt)
    if src.size == 0 or tgt.size == 0:
        return 0.0
    dist = kernels.nearest_distance(src, tgt)
    if squared:
        dist = dist * dist
    expo = dist / (2.0 * sigma**2)
    return float(np.mean(np.exp(-expo if negate else expo)))


def ba_score(music, dance, sigma: float = 3.0, squared: bool = True, negate: bool = True) -> float:
    """Mean over music beats of ``exp(-d^2 / 2 sigma^2)``, d = distance to the nearest dance beat.

    ``squared`` and ``negate`` switch to the literal printed form for
    comparison experiments; the defaults give a score in [0, 1].
    """
    return _kernel_mean(music, dance, sigma, squared, negate)


def bc_score(music, dance, sigma: float = 3.0, squared: bool = True, negate: bool = True) -> float:
    """Like :func:`ba_score` with the roles swapped: averaged over dance beats."""
    return _kernel_mean(dance, music, sigma, squared, negate)

"""Desk-scale overfit runs and directional ablations on synthetic data.

Every protocol here is fixed ahead of time and parameterized only by a seed,
so the acceptance suite and the benchmark notes run exactly the same thing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from midget.gpt import GptConfig, generate, teacher_forced_accuracy, train_gpt, generate_codes
from midget.metrics import ba_score, detectable_beats, extract_motion_beats
from midget.motion import SyntheticSpec, generate_synthetic
from midget.music import beat_curve_from_annotations
from midget.vqvae import MotionVQVAE, VqvaeConfig, reconstruction_mse, train_vqvae


@dataclass
class SyntheticSplit:
    motion: np.ndarray  # (B, T, J, 3)
    music: np.ndarray  # (B, T, C)
    curves: np.ndarray  # (B, T-1)
    tracks: list


def synthetic_split(specs, sigma_b: float = 2.0) -> SyntheticSplit:
    pairs = [generate_synthetic(s) for s in specs]
    T = specs[0].frames
    return SyntheticSplit(
        np.stack([m.positions for m, _ in pairs]),
        np.stack([t.features for _, t in pairs]),
        np.stack([beat_curve_from_annotations(t, T, sigma_b)[: T - 1] for _, t in pairs]),
        [t for _, t in pairs],
    )


@dataclass
class AblationProtocol:
    """Held-out protocol shared by all three ablations.

    Train and test tracks come from the same four dancers with irregular
    beats, so the test set asks for new timing rather than new skeletons.
    """

    train_pairs: int = 8
    test_pairs: int = 8
    dancers: int = 4
    tempo_jitter: int = 2
    vqvae_epochs: int = 1200
    gpt_epochs: int = 300
    vqvae: VqvaeConfig = field(default_factory=VqvaeConfig)
    gpt: GptConfig = field(default_factory=GptConfig)

    def specs(self, seed: int):
        base = 1000 * seed
        def spec(i, offset):
            return SyntheticSpec(
                seed=base + offset + i,
                pose_seed=base + 900 + i % self.dancers,
                tempo_jitter=self.tempo_jitter,
                beat_offset=i % 3,
            )
        return [spec(i, 0) for i in range(self.train_pairs)], [spec(i, 500) for i in range(self.test_pairs)]


def encode_all(vqvae: MotionVQVAE, motion: np.ndarray) -> dict:
    vqvae.eval()
    with torch.no_grad():
        x = torch.tensor(motion, dtype=torch.float32)
        return {s: idx.numpy() for s, idx in vqvae.quantize(vqvae.encode(x)).items()}


def rollout_ba(gpt, vqvae, split: SyntheticSplit, codes: dict, seed_length: int = 1) -> float:
    """Mean BA of rollouts seeded with the first ground-truth codes, over detectable music beats."""
    horizon = split.motion.shape[1] // vqvae.cfg.downsample_rate
    scores = []
    for i, track in enumerate(split.tracks):
        motion, _ = generate(gpt, vqvae, {s: c[i, :seed_length] for s, c in codes.items()}, split.music[i], horizon)
        scores.append(ba_score(detectable_beats(track.beat_frames, motion.frames), extract_motion_beats(motion)))
    return float(np.mean(scores))


@dataclass
class AblationResult:
    seed: int
    ba_default: float
    ba_no_ba_loss: float
    ba_no_extractor: float
    err_split: float
    err_whole: float
    seconds: float


def run_ablations(seed: int, protocol: AblationProtocol | None = None) -> AblationResult:
    """One seed of the three directional comparisons.

    (a) default GPT vs ``lambda_ba = 0``; (b) learned extractor vs strided
    music; (c) split vs whole-body VQ-VAE held-out reconstruction MSE, the
    whole-body model holding the same ``2N`` code vectors. Both GPT arms of a
    comparison share the VQ-VAE and the model seed.
    """
    p = protocol or AblationProtocol()
    clock = time.perf_counter()
    train_specs, test_specs = p.specs(seed)
    train, test = synthetic_split(train_specs, p.gpt.sigma_b), synthetic_split(test_specs, p.gpt.sigma_b)

    vq, _ = train_vqvae(train.motion, p.vqvae, p.vqvae_epochs, seed=seed)
    whole_cfg = replace(p.vqvae, split_body=False)
    vq_whole, _ = train_vqvae(train.motion, whole_cfg, p.vqvae_epochs, seed=seed)
    err_split = reconstruction_mse(vq, test.motion)
    err_whole = reconstruction_mse(vq_whole, test.motion)

    train_codes, test_codes = encode_all(vq, train.motion), encode_all(vq, test.motion)
    arms = {
        "default": p.gpt,
        "no_ba_loss": replace(p.gpt, lambda_ba=0.0),
        "no_extractor": replace(p.gpt, use_extractor=False),
    }
    ba = {}
    for name, cfg in arms.items():
        gpt, _ = train_gpt(train.music, train_codes, train.curves, vq, cfg, p.gpt_epochs, seed=seed)
        ba[name] = rollout_ba(gpt, vq, test, test_codes)
    return AblationResult(
        seed, ba["default"], ba["no_ba_loss"], ba["no_extractor"], err_split, err_whole, time.perf_counter() - clock
    )


def majority(flags) -> bool:
    flags = list(flags)
    return sum(bool(f) for f in flags) * 2 > len(flags)


# ------------------------------------------------------------------ overfit


@dataclass
class OverfitResult:
    vqvae_mse: float
    vqvae_seconds: float
    gpt_accuracy: float
    gpt_seconds: float
    rollout_match: float
    first_losses: list


def run_overfit(
    seed: int = 0, pairs: int = 8, vqvae_epochs: int = 1500, gpt_epochs: int = 600, vqvae_cfg=None, gpt_cfg=None
) -> OverfitResult:
    """Fit 8 synthetic sequences, then the GPT on their codes; roll out from one seed code."""
    split = synthetic_split([SyntheticSpec(seed=1000 * seed + i) for i in range(pairs)])
    vcfg = vqvae_cfg or VqvaeConfig()
    clock = time.perf_counter()
    vq, hist = train_vqvae(split.motion, vcfg, vqvae_epochs, seed=seed)
    vq_seconds = time.perf_counter() - clock
    mse = reconstruction_mse(vq, split.motion)

    codes = encode_all(vq, split.motion)
    gcfg = gpt_cfg or GptConfig()
    clock = time.perf_counter()
    gpt, _ = train_gpt(split.music, codes, split.curves, vq, gcfg, gpt_epochs, seed=seed)
    gpt_seconds = time.perf_counter() - clock
    acc = teacher_forced_accuracy(gpt, split.music, codes)

    horizon = split.motion.shape[1] // vcfg.downsample_rate
    hits, total = 0, 0
    for i in range(pairs):
        out = generate_codes(gpt, {s: c[i, :1] for s, c in codes.items()}, split.music[i], horizon)
        for s in codes:
            hits += int((out[s][1:] == codes[s][i, 1:]).sum())
            total += horizon - 1
    return OverfitResult(mse, vq_seconds, acc, gpt_seconds, hits / total, [h["loss"] for h in hist[:10]])

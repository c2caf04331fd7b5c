"""Pipeline configuration and the two shipped profiles."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from midget.errors import ConfigError
from midget.gpt import GptConfig
from midget.vqvae import VqvaeConfig


@dataclass
class DataConfig:
    pairs: int = 8
    test_pairs: int = 0
    frames: int = 64
    fps: int = 30
    beat_period: int = 8
    music_dim: int = 35
    dancers: int = 0  # distinct skeletons; 0 gives every pair its own
    vary_offset: bool = False
    tempo_jitter: int = 0  # max per-interval deviation from beat_period


@dataclass
class OptimConfig:
    lr: float = 3e-4
    batch_size: int = 8
    vqvae_epochs: int = 1500
    gpt_epochs: int = 300
    checkpoint_every: int = 50
    seed: int = 0


@dataclass
class PathConfig:
    dataset_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_path: str = "report.json"


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vqvae: VqvaeConfig = field(default_factory=VqvaeConfig)
    gpt: GptConfig = field(default_factory=GptConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    @property
    def window(self) -> int:
        return self.data.frames

    def validate(self) -> "PipelineConfig":
        d = self.vqvae.downsample_rate
        self.vqvae.validate(self.window)
        self.gpt.validate()
        if self.gpt.downsample_rate != d:
            raise ConfigError(f"GPT downsample rate {self.gpt.downsample_rate} differs from VQ-VAE rate {d}")
        if self.window // d != self.gpt.window:
            raise ConfigError(f"GPT window {self.gpt.window} != frames / d = {self.window // d}")
        if self.gpt.music_dim != self.data.music_dim:
            raise ConfigError("GPT music_dim must match the data music_dim")
        expected_n = self.vqvae.codebook_size * (1 if self.vqvae.split_body else 2)
        if self.gpt.codebook_size != expected_n:
            raise ConfigError(f"GPT codebook_size {self.gpt.codebook_size} != VQ-VAE code count {expected_n}")
        if self.data.beat_period < 2 or self.data.pairs < 1 or self.data.frames < 3:
            raise ConfigError("data needs pairs >= 1, frames >= 3 and beat_period >= 2")
        if not 0 <= self.data.tempo_jitter <= self.data.beat_period - 2:
            raise ConfigError("data.tempo_jitter must lie in [0, beat_period - 2]")
        for name in ("lr", "batch_size"):
            if getattr(self.optim, name) <= 0:
                raise ConfigError(f"optim.{name} must be positive")
        for name in ("lambda_ce", "lambda_ba", "sigma_beat", "sigma_b"):
            if getattr(self.gpt, name) < 0:
                raise ConfigError(f"gpt.{name} must be nonnegative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        sections = {f.name: f.type for f in fields(cls)}
        kinds = {"data": DataConfig, "vqvae": VqvaeConfig, "gpt": GptConfig, "optim": OptimConfig, "paths": PathConfig}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, kind in kinds.items():
            sub = doc.get(name, {})
            known = {f.name for f in fields(kind)}
            bad = set(sub) - known
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            parts[name] = kind(**sub)
        return cls(**parts)

    def copy(self) -> "PipelineConfig":
        return copy.deepcopy(self)


def desk_profile() -> PipelineConfig:
    return PipelineConfig()


def full_profile() -> PipelineConfig:
    """240-frame windows, downsample 8, 512-entry codebooks, 12 layers, batch 64."""
    return PipelineConfig(
        data=DataConfig(pairs=64, frames=240, fps=60, beat_period=30),
        vqvae=VqvaeConfig(channels=512, codebook_size=512, hidden=512),
        gpt=GptConfig(layers=12, heads=12, d_attn=768, c_pose=768, c_music=768, codebook_size=512, window=30),
        optim=OptimConfig(batch_size=64),
    )


PROFILES = {"desk": desk_profile, "full": full_profile}


def load_config(path=None, profile: str = "desk") -> PipelineConfig:
    """Read a JSON config over the chosen profile; ``MIDGET_SEED`` overrides the seed."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = PROFILES[profile]()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = cfg.to_dict()
        for section, values in doc.items():
            if section not in base or not isinstance(values, dict):
                raise ConfigError(f"unknown or malformed config section {section!r}")
            base[section].update(values)
        cfg = PipelineConfig.from_dict(base)
    seed = os.environ.get("MIDGET_SEED")
    if seed:
        try:
            cfg.optim.seed = int(seed)
        except ValueError as exc:
            raise ConfigError(f"MIDGET_SEED must be an integer, got {seed!r}") from exc
    return cfg.validate()


def save_config(cfg: PipelineConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path

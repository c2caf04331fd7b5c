"""Motion VQ-VAE: temporal conv encoder, EMA codebook, deconv decoder, losses."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from midget import kernels
from midget.errors import ConfigError, DivergenceError, ValidationError
from midget.motion import BodySplit, MotionSequence

log = logging.getLogger(__name__)


@dataclass
class VqvaeConfig:
    downsample_rate: int = 8
    channels: int = 32
    codebook_size: int = 64
    beta: float = 0.25
    alpha1: float = 1.0
    alpha2: float = 1.0
    hidden: int = 64
    kernel_size: int = 3
    decay: float = 0.99
    eps: float = 1e-5
    split_body: bool = True

    def validate(self, window: int | None = None) -> None:
        d = self.downsample_rate
        if d < 1 or d & (d - 1):
            raise ConfigError(f"downsample rate must be a positive power of two, got {d}")
        if window is not None and window % d:
            raise ConfigError(f"window of {window} frames is not divisible by downsample rate {d}")
        if self.channels < 1 or self.codebook_size < 1 or self.hidden < 1:
            raise ConfigError("channels, codebook_size and hidden must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError(f"decay must lie in [0, 1), got {self.decay}")
        for name in ("beta", "alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


@dataclass
class LatentSequence:
    features: np.ndarray  # (T', C)
    quantized: bool = False
    indices: np.ndarray | None = None


# ------------------------------------------------------------------ codebook


class Codebook(nn.Module):
    """N code vectors of width C, re-estimated by exponential moving averages.

    Accumulators start at ``cluster_size = 1`` and ``embed_sum = codes`` so a
    code that is never assigned keeps its value until the stale accumulators
    have decayed below ``eps``.
    """

    def __init__(self, size: int, channels: int, decay: float = 0.99, eps: float = 1e-5, generator=None):
        super().__init__()
        if size < 1 or channels < 1:
            raise ValidationError("codebook needs at least one entry and one channel")
        bound = 1.0 / size
        codes = (torch.rand(size, channels, generator=generator, dtype=torch.float64) * 2 - 1) * bound
        self.register_buffer("codes", codes.float())
        self.register_buffer("ema_cluster_size", torch.ones(size))
        self.register_buffer("ema_embed_sum", codes.float().clone())
        self.decay = decay
        self.eps = eps

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def channels(self) -> int:
        return self.codes.shape[1]

    def nearest(self, e: torch.Tensor) -> torch.Tensor:
        flat = e.detach().reshape(-1, e.shape[-1]).cpu().numpy()
        idx = kernels.nearest_code(flat, self.codes.detach().cpu().numpy())
        return torch.from_numpy(idx).to(e.device).reshape(e.shape[:-1])

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        return F.embedding(indices, self.codes)

    @torch.no_grad()
    def ema_update(self, e: torch.Tensor, indices: torch.Tensor) -> None:
        flat = e.detach().reshape(-1, e.shape[-1]).to(self.codes.dtype)
        idx = indices.reshape(-1)
        if idx.numel() and (idx.min() < 0 or idx.max() >= self.size):
            raise ValidationError("assignment index out of range for the codebook")
        onehot = F.one_hot(idx, self.size).to(flat.dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ flat
        d = self.decay
        self.ema_cluster_size.mul_(d).add_((1 - d) * counts)
        self.ema_embed_sum.mul_(d).add_((1 - d) * sums)
        self.codes.copy_(self.ema_embed_sum / self.ema_cluster_size.clamp_min(self.eps).unsqueeze(1))

    def usage(self, indices: torch.Tensor) -> int:
        return int(torch.unique(indices).numel())


def quantize(e: LatentSequence, cb: Codebook) -> LatentSequence:
    """Snap each row to its nearest code (Euclidean, ties to the lowest index)."""
    if e.quantized:
        raise ValidationError("latent sequence is already quantized")
    feats = np.asarray(e.features, dtype=np.float64)
    codes = cb.codes.detach().cpu().numpy().astype(np.float64)
    if feats.ndim != 2 or feats.shape[1] != codes.shape[1]:
        raise ValidationError(f"channel mismatch: latent {feats.shape} vs codebook {codes.shape}")
    idx = kernels.nearest_code(feats, codes)
    return LatentSequence(codes[idx], quantized=True, indices=idx)


def ema_update(cb: Codebook, e: LatentSequence, assignments) -> Codebook:
    cb.ema_update(
        torch.tensor(np.asarray(e.features), dtype=cb.codes.dtype),
        torch.tensor(np.asarray(assignments), dtype=torch.long),
    )
    return cb


# ------------------------------------------------------------------ losses


def _positions(x):
    if isinstance(x, MotionSequence):
        return torch.tensor(x.positions)
    return torch.as_tensor(x)


def reconstruction_loss(p, phat, alpha1: float = 1.0, alpha2: float = 1.0) -> torch.Tensor:
    """Mean-squared position, velocity and acceleration error along the frame axis.

    Inputs are ``(..., T, J, 3)``; the frame axis is third from last.
    """
    p, phat = _positions(p), _positions(phat)
    if p.shape != phat.shape:
        raise ValidationError(f"shape mismatch {tuple(p.shape)} vs {tuple(phat.shape)}")
    loss = F.mse_loss(phat, p)
    if p.shape[-3] >= 2 and alpha1:
        v, vhat = torch.diff(p, dim=-3), torch.diff(phat, dim=-3)
        loss = loss + alpha1 * F.mse_loss(vhat, v)
    if p.shape[-3] >= 3 and alpha2:
        a, ahat = torch.diff(p, n=2, dim=-3), torch.diff(phat, n=2, dim=-3)
        loss = loss + alpha2 * F.mse_loss(ahat, a)
    return loss


def commitment_loss(e: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Mean-squared distance to the stop-gradient code; only ``e`` receives gradient."""
    if e.shape != q.shape:
        raise ValidationError(f"shape mismatch {tuple(e.shape)} vs {tuple(q.shape)}")
    return F.mse_loss(e, q.detach())


# ------------------------------------------------------------------ networks


def _n_stages(rate: int) -> int:
    return int(round(math.log2(rate)))


class MotionEncoder(nn.Module):
    """1-D temporal conv net, ``(B, T, in_dim) -> (B, T/rate, channels)``."""

    def __init__(self, in_dim: int, channels: int, hidden: int, rate: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        layers = [nn.Conv1d(in_dim, hidden, kernel_size, padding=pad), nn.ReLU()]
        for _ in range(_n_stages(rate)):
            layers += [nn.Conv1d(hidden, hidden, 4, stride=2, padding=1), nn.ReLU()]
        layers.append(nn.Conv1d(hidden, channels, kernel_size, padding=pad))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x.transpose(1, 2)).transpose(1, 2)


class MotionDecoder(nn.Module):
    """Transposed-conv mirror of :class:`MotionEncoder`."""

    def __init__(self, out_dim: int, channels: int, hidden: int, rate: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        layers = [nn.Conv1d(channels, hidden, kernel_size, padding=pad), nn.ReLU()]
        for _ in range(_n_stages(rate)):
            layers += [nn.ConvTranspose1d(hidden, hidden, 4, stride=2, padding=1), nn.ReLU()]
        layers.append(nn.Conv1d(hidden, out_dim, kernel_size, padding=pad))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z.transpose(1, 2)).transpose(1, 2)


class BodyPartVQ(nn.Module):
    """Encoder, codebook and decoder for one group of joints."""

    def __init__(self, joint_indices, cfg: VqvaeConfig, codebook_size: int, generator=None):
        super().__init__()
        self.joint_indices = tuple(joint_indices)
        n_in = 3 * len(self.joint_indices)
        self.encoder = MotionEncoder(n_in, cfg.channels, cfg.hidden, cfg.downsample_rate, cfg.kernel_size)
        self.decoder = MotionDecoder(n_in, cfg.channels, cfg.hidden, cfg.downsample_rate, cfg.kernel_size)
        self.codebook = Codebook(codebook_size, cfg.channels, cfg.decay, cfg.eps, generator=generator)
        self.register_buffer("offset", torch.zeros(n_in))
        self.register_buffer("scale", torch.ones(n_in))

    @property
    def joints(self) -> int:
        return len(self.joint_indices)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, T, J_part, 3)`` positions to ``(B, T', C)`` latents."""
        flat = x.reshape(*x.shape[:-2], -1)
        return self.encoder((flat - self.offset) / self.scale)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        out = self.decoder(z) * self.scale + self.offset
        return out.reshape(*out.shape[:-1], self.joints, 3)


class MotionVQVAE(nn.Module):
    """Upper/lower (or single whole-body) VQ-VAE over ``(B, T, J, 3)`` positions.

    The whole-body variant gets a codebook of ``2 * codebook_size`` entries so
    both layouts hold the same number of code vectors.
    """

    def __init__(self, cfg: VqvaeConfig, joints: int = 24, split: BodySplit | None = None, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.n_joints = joints
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        if cfg.split_body:
            split = split or BodySplit.default(joints)
            self.split = split
            self.parts = nn.ModuleDict(
                {
                    "upper": BodyPartVQ(split.upper_indices, cfg, cfg.codebook_size, gen),
                    "lower": BodyPartVQ(split.lower_indices, cfg, cfg.codebook_size, gen),
                }
            )
        else:
            self.split = None
            self.parts = nn.ModuleDict({"whole": BodyPartVQ(range(joints), cfg, 2 * cfg.codebook_size, gen)})

    @property
    def part_names(self) -> list[str]:
        return list(self.parts.keys())

    def fit_normalization(self, data: torch.Tensor) -> None:
        """Per-channel standardization from a ``(B, T, J, 3)`` training set."""
        for part in self.parts.values():
            flat = data[:, :, list(part.joint_indices)].reshape(-1, 3 * part.joints).to(part.offset.dtype)
            part.offset.copy_(flat.mean(0))
            part.scale.copy_(flat.std(0).clamp_min(1e-3))

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[-2:] != (self.n_joints, 3):
            raise ValidationError(f"expected (B, T, {self.n_joints}, 3) positions, got {tuple(x.shape)}")
        if x.shape[1] % self.cfg.downsample_rate:
            raise ConfigError(
                f"{x.shape[1]} frames is not divisible by the downsample rate {self.cfg.downsample_rate}"
            )

    def encode(self, x: torch.Tensor) -> dict:
        self._check(x)
        return {name: part.encode(x[:, :, list(part.joint_indices)]) for name, part in self.parts.items()}

    def quantize(self, latents: dict) -> dict:
        return {name: self.parts[name].codebook.nearest(e) for name, e in latents.items()}

    def decode_codes(self, codes: dict) -> torch.Tensor:
        """Decode per-part index sequences ``(B, T')`` to merged positions."""
        feats = {name: self.parts[name].codebook.lookup(idx) for name, idx in codes.items()}
        return self.decode_features(feats)

    def decode_features(self, feats: dict) -> torch.Tensor:
        outs = {name: self.parts[name].decode(z) for name, z in feats.items()}
        return self.merge(outs)

    def merge(self, outs: dict) -> torch.Tensor:
        first = next(iter(outs.values()))
        full = first.new_zeros(first.shape[0], first.shape[1], self.n_joints, 3)
        for name, out in outs.items():
            full[:, :, list(self.parts[name].joint_indices)] = out
        return full

    def forward(self, x: torch.Tensor, update_codebook: bool | None = None) -> dict:
        """Encode, quantize (straight-through to the decoder), decode and score."""
        update = self.training if update_codebook is None else update_codebook
        latents = self.encode(x)
        outs, indices, com, vq = {}, {}, 0.0, 0.0
        for name, e in latents.items():
            part = self.parts[name]
            idx = part.codebook.nearest(e)
            if update:
                part.codebook.ema_update(e, idx)
            q = part.codebook.lookup(idx).to(e.dtype)
            com = com + commitment_loss(e, q)
            vq = vq + F.mse_loss(e.detach(), q)
            outs[name] = part.decode(q + (e - e.detach()))  # value q, gradient to e
            indices[name] = idx
        recon = self.merge(outs)
        rec = reconstruction_loss(x, recon, self.cfg.alpha1, self.cfg.alpha2)
        total = rec + self.cfg.beta * com if self.cfg.beta else rec
        return {
            "recon": recon,
            "indices": indices,
            "loss": total,
            "rec": rec,
            "com": com,
            "vq": vq,
            "mse": F.mse_loss(recon, x),
        }


# ------------------------------------------------------------------ public ops


def _part(model: MotionVQVAE, m: MotionSequence, part: str | None):
    if part is None:
        part = "whole" if "whole" in model.parts else None
        if part is None:
            raise ValidationError("specify which body part to encode")
    if part not in model.parts:
        raise ValidationError(f"unknown body part {part!r}; have {model.part_names}")
    return part, model.parts[part]


def encode(m: MotionSequence, model: MotionVQVAE, part: str | None = None) -> LatentSequence:
    """Encode one body half (``m`` holds that half's joints) to ``T/d`` latent rows."""
    name, mod = _part(model, m, part)
    if m.frames % model.cfg.downsample_rate:
        raise ConfigError(f"{m.frames} frames is not divisible by {model.cfg.downsample_rate}")
    if m.joints != mod.joints:
        raise ValidationError(f"part {name!r} expects {mod.joints} joints, got {m.joints}")
    dtype = mod.offset.dtype
    with torch.no_grad():
        e = mod.encode(torch.tensor(m.positions, dtype=dtype).unsqueeze(0))[0]
    return LatentSequence(e.numpy().astype(np.float64))


def decode(q: LatentSequence, model: MotionVQVAE, part: str | None = None, fps: float = 30) -> MotionSequence:
    name, mod = _part(model, None, part)
    feats = np.asarray(q.features)
    if feats.ndim != 2 or feats.shape[1] != model.cfg.channels:
        raise ValidationError(f"expected (T', {model.cfg.channels}) features, got {feats.shape}")
    with torch.no_grad():
        out = mod.decode(torch.as_tensor(feats, dtype=mod.offset.dtype).unsqueeze(0))[0]
    return MotionSequence(fps, out.numpy().astype(np.float64))


# ------------------------------------------------------------------ training


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def append(self, **record) -> None:
        self.epochs.append(record)


def train_vqvae(
    data,
    cfg: VqvaeConfig,
    epochs: int,
    lr: float = 3e-4,
    batch_size: int = 8,
    seed: int = 0,
    model: MotionVQVAE | None = None,
    optimizer=None,
    start_epoch: int = 0,
    history: list | None = None,
    on_epoch=None,
):
    """Train encoder/decoder with Adam while codebooks follow EMA updates.

    ``data`` is ``(B, T, J, 3)``. Batches are drawn from a generator seeded by
    ``seed + epoch``, so a resumed run replays the same order. ``on_epoch`` is
    called as ``on_epoch(epoch, model, optimizer, history)`` after every
    finite epoch. Returns ``(model, history)``.
    """
    data = torch.tensor(np.asarray(data), dtype=torch.float32)
    cfg.validate(data.shape[1])
    if model is None:
        model = MotionVQVAE(cfg, joints=data.shape[2], seed=seed)
        model.fit_normalization(data)
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    history = list(history or [])
    n = data.shape[0]
    for epoch in range(start_epoch, epochs):
        model.train()
        gen = torch.Generator().manual_seed(seed * 100003 + epoch)
        order = torch.randperm(n, generator=gen)
        sums = {"loss": 0.0, "rec": 0.0, "com": 0.0, "vq": 0.0, "mse": 0.0}
        for start in range(0, n, batch_size):
            batch = data[order[start:start + batch_size]]
            out = model(batch)
            loss = out["loss"]
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite VQ-VAE loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            w = batch.shape[0] / n
            for key in sums:
                sums[key] += float(out[key].detach() if torch.is_tensor(out[key]) else out[key]) * w
        record = {"epoch": epoch, **sums}
        history.append(record)
        log.debug("vqvae epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(epoch, model, optimizer, history)
    return model, history


@torch.no_grad()
def reconstruction_mse(model: MotionVQVAE, data) -> float:
    """Mean-squared position error of encode -> quantize -> decode."""
    model.eval()
    x = torch.tensor(np.asarray(data), dtype=next(model.parameters()).dtype)
    return float(model(x, update_codebook=False)["mse"])

"""Motion GPT over concatenated [music | upper | lower] token streams.

Every stream has one token per code step. Attention is cross-conditional and
causal: a token at step ``t`` sees all streams at steps ``<= t``. Pose inputs
are teacher-forced and shifted right by one step (a learned start token fills
step 0), so the head at step ``t`` predicts the code at ``t``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from midget.errors import ConfigError, DivergenceError, ValidationError
from midget.music import MusicExtractor

log = logging.getLogger(__name__)


@dataclass
class GptConfig:
    layers: int = 2
    heads: int = 4
    d_attn: int = 64
    c_pose: int = 64
    c_music: int = 64
    codebook_size: int = 64
    window: int = 8
    music_dim: int = 35
    downsample_rate: int = 8
    lambda_ce: float = 1.0
    lambda_ba: float = 0.1
    sigma_beat: float = 0.4
    sigma_b: float = 2.0
    loss: str = "mse"
    use_extractor: bool = True
    single_step: bool = False
    dropout: float = 0.0

    def validate(self) -> None:
        if self.d_attn % self.heads:
            raise ConfigError(f"d_attn={self.d_attn} is not divisible by heads={self.heads}")
        if self.window < 1 or self.layers < 1 or self.codebook_size < 1:
            raise ConfigError("window, layers and codebook_size must be positive")
        if self.loss not in ("mse", "ce"):
            raise ConfigError(f"unknown GPT loss {self.loss!r}")
        for name in ("lambda_ce", "lambda_ba"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.sigma_beat <= 0 or self.sigma_b <= 0:
            raise ConfigError("beat widths must be positive")


# ------------------------------------------------------------------ attention


def build_mask(window: int, streams: int = 3, dtype=torch.float64) -> torch.Tensor:
    """Additive mask over ``streams * window`` tokens laid out stream-major.

    Entry ``(s*T' + t, s2*T' + t2)`` is 0 when ``t2 <= t`` and ``-inf`` otherwise.
    """
    if window < 1:
        raise ValidationError("window must be at least 1")
    t = torch.arange(window)
    allowed = (t[None, :] <= t[:, None]).repeat(streams, streams)
    mask = torch.zeros(streams * window, streams * window, dtype=dtype)
    return mask.masked_fill(~allowed, float("-inf"))


def attention(q, k, v, mask=None, d: int | None = None) -> torch.Tensor:
    """``softmax((q k^T + M) / sqrt(d)) v`` over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValidationError(f"non-conformable q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    d = q.shape[-1] if d is None else d
    scores = q @ k.transpose(-2, -1)
    if mask is not None:
        scores = scores + mask
    return torch.softmax(scores / math.sqrt(d), dim=-1) @ v


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        B, L, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(B, L, 3, h, D // h).permute(2, 0, 3, 1, 4)
        y = attention(q, k, v, mask, d=D // h)
        return self.drop(self.out(y.transpose(1, 2).reshape(B, L, D)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim), nn.Dropout(dropout))

    def forward(self, x, mask):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


# ------------------------------------------------------------------ model


class MotionGPT(nn.Module):
    def __init__(self, cfg: GptConfig, streams=("upper", "lower"), seed: int = 0):
        super().__init__()
        cfg.validate()
        torch.manual_seed(seed)
        self.cfg = cfg
        self.streams = tuple(streams)
        N, D = cfg.codebook_size, cfg.d_attn
        if cfg.use_extractor:
            self.extractor = MusicExtractor(cfg.music_dim, cfg.c_music, cfg.downsample_rate)
            music_in = cfg.c_music
        else:
            self.extractor = None
            music_in = cfg.music_dim
        self.music_embed = nn.Linear(music_in, D)
        # index N is the start token
        self.pose_embed = nn.ModuleDict({s: nn.Embedding(N + 1, cfg.c_pose) for s in self.streams})
        self.pose_proj = nn.ModuleDict({s: nn.Linear(cfg.c_pose, D) for s in self.streams})
        n_tok = (1 + len(self.streams)) * cfg.window
        self.pos_embed = nn.Parameter(torch.randn(n_tok, D) * 0.02)
        self.blocks = nn.ModuleList([Block(D, cfg.heads, cfg.dropout) for _ in range(cfg.layers)])
        self.ln_f = nn.LayerNorm(D)
        self.heads = nn.ModuleDict({s: nn.Linear(D, N) for s in ("music",) + self.streams})

    @property
    def start_token(self) -> int:
        return self.cfg.codebook_size

    def downsample_music(self, music: torch.Tensor) -> torch.Tensor:
        """Raw ``(B, T, C_m)`` frames to ``(B, T/d, C)`` tokens (learned or strided)."""
        d = self.cfg.downsample_rate
        if music.shape[1] % d:
            raise ValidationError(f"{music.shape[1]} music frames is not divisible by {d}")
        if self.extractor is not None:
            return self.extractor(music)
        return music[:, ::d]

    def logits(self, music_tokens: torch.Tensor, inputs: dict) -> torch.Tensor:
        """``(B, (1+S) L, N)`` logits from downsampled music and shifted pose inputs."""
        B, L = music_tokens.shape[:2]
        if L > self.cfg.window:
            raise ValidationError(f"sequence of {L} steps exceeds the window of {self.cfg.window}")
        for s in self.streams:
            if s not in inputs:
                raise ValidationError(f"missing input stream {s!r}")
            if tuple(inputs[s].shape) != (B, L):
                raise ValidationError(f"stream {s!r} has shape {tuple(inputs[s].shape)}, expected {(B, L)}")
        parts = [self.music_embed(music_tokens)]
        parts += [self.pose_proj[s](self.pose_embed[s](inputs[s])) for s in self.streams]
        x = torch.cat(parts, dim=1)
        W = self.cfg.window
        pos = torch.cat([self.pos_embed[i * W:i * W + L] for i in range(1 + len(self.streams))])
        x = x + pos
        mask = build_mask(L, 1 + len(self.streams), dtype=x.dtype).to(x.device)
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_f(x)
        names = ("music",) + self.streams
        return torch.cat([self.heads[n](x[:, i * L:(i + 1) * L]) for i, n in enumerate(names)], dim=1)

    def forward(self, music_tokens: torch.Tensor, inputs: dict) -> torch.Tensor:
        """Code probabilities ``p``, rows ``[0, L)`` music, then one block per pose stream."""
        return torch.softmax(self.logits(music_tokens, inputs), dim=-1)

    def stream_slice(self, p: torch.Tensor, stream: str) -> torch.Tensor:
        L = p.shape[1] // (1 + len(self.streams))
        i = 1 + self.streams.index(stream)
        return p[:, i * L:(i + 1) * L]

    def shift_right(self, codes: torch.Tensor, prev: torch.Tensor | None = None) -> torch.Tensor:
        """Teacher-forcing inputs: step ``t`` carries code ``t-1``."""
        first = torch.full_like(codes[:, :1], self.start_token) if prev is None else prev.reshape(-1, 1)
        return torch.cat([first, codes[:, :-1]], dim=1)


# ------------------------------------------------------------------ losses


def gpt_loss(p_streams: dict, targets: dict, kind: str = "mse", last_only: bool = False) -> torch.Tensor:
    """Per-step loss summed over streams and averaged over steps and batch.

    ``mse``: squared distance between each probability row and the one-hot
    target. ``ce``: negative log-probability of the target code.
    """
    total = 0.0
    for s, p in p_streams.items():
        tgt = targets[s]
        N = p.shape[-1]
        if tgt.numel() and (int(tgt.min()) < 0 or int(tgt.max()) >= N):
            raise ValidationError(f"target index out of range [0, {N})")
        if last_only:
            p, tgt = p[:, -1:], tgt[:, -1:]
        if kind == "mse":
            per_step = ((p - F.one_hot(tgt, N).to(p.dtype)) ** 2).sum(-1)
        elif kind == "ce":
            per_step = -torch.log(p.gather(-1, tgt.unsqueeze(-1)).squeeze(-1).clamp_min(1e-12))
        else:
            raise ValidationError(f"unknown loss kind {kind!r}")
        total = total + per_step.mean()
    return total


def straight_through_features(p: torch.Tensor, codes: torch.Tensor):
    """Hard top-1 code features in the forward pass, soft ``p @ Z`` gradient backward.

    Returns ``(features, indices)``.
    """
    soft = p @ codes.to(p.dtype)
    idx = p.argmax(dim=-1)
    hard = F.embedding(idx, codes.to(p.dtype))
    # soft - soft.detach() is exactly zero, so the forward value is bit-identical to hard
    return hard + (soft - soft.detach()), idx


def straight_through_decode(p_streams: dict, vqvae) -> torch.Tensor:
    """Decode per-stream code probabilities to merged ``(B, T, J, 3)`` positions.

    Codebooks and decoders are used as-is (freeze them by excluding their
    parameters from the optimizer); gradient reaches ``p`` through ``p @ Z``.
    """
    feats = {}
    for s, p in p_streams.items():
        feats[s], _ = straight_through_features(p, vqvae.parts[s].codebook.codes)
    return vqvae.decode_features(feats)


def dance_beat_curve(xhat: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """``exp(-||x[t] - x[t+1]|| / sigma^2)`` over all joints, ``(..., T, J, 3) -> (..., T-1)``."""
    if xhat.shape[-3] < 2:
        raise ValidationError("dance beat curve needs at least 2 frames")
    diff = (xhat[..., 1:, :, :] - xhat[..., :-1, :, :]).flatten(-2)
    return torch.exp(-torch.linalg.vector_norm(diff, dim=-1) / sigma**2)


def beat_align_loss(bd: torch.Tensor, bm: torch.Tensor) -> torch.Tensor:
    bm = torch.as_tensor(bm, dtype=bd.dtype)
    if bd.shape != bm.shape:
        raise ValidationError(f"beat curve lengths differ: {tuple(bd.shape)} vs {tuple(bm.shape)}")
    return F.mse_loss(bd, bm)


# ------------------------------------------------------------------ training


def train_gpt(
    music: np.ndarray,
    codes: dict,
    music_curves: np.ndarray,
    vqvae,
    cfg: GptConfig,
    epochs: int,
    lr: float = 3e-4,
    batch_size: int = 8,
    seed: int = 0,
    model: MotionGPT | None = None,
    optimizer=None,
    start_epoch: int = 0,
    history: list | None = None,
    on_epoch=None,
):
    """Teacher-forced training with ``lambda_ce * L_code + lambda_ba * L_beat``.

    ``music`` is ``(B, T, C_m)`` raw frames, ``codes`` maps stream name to
    ``(B, T')`` ground-truth indices and ``music_curves`` is the ``(B, T-1)``
    music beat curve. The VQ-VAE stays frozen.
    """
    music = torch.tensor(np.asarray(music), dtype=torch.float32)
    codes = {s: torch.tensor(np.asarray(c), dtype=torch.long) for s, c in codes.items()}
    curves = torch.tensor(np.asarray(music_curves), dtype=torch.float32)
    if model is None:
        model = MotionGPT(cfg, streams=tuple(codes), seed=seed)
    if set(model.streams) != set(vqvae.parts):
        raise ConfigError(f"GPT streams {model.streams} do not match VQ-VAE parts {vqvae.part_names}")
    for s in model.streams:
        if vqvae.parts[s].codebook.size != cfg.codebook_size:
            raise ConfigError(
                f"codebook size mismatch for {s!r}: VQ-VAE {vqvae.parts[s].codebook.size}, GPT {cfg.codebook_size}"
            )
    vqvae.eval()
    for prm in vqvae.parameters():
        prm.requires_grad_(False)
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    history = list(history or [])
    n = music.shape[0]
    for epoch in range(start_epoch, epochs):
        model.train()
        gen = torch.Generator().manual_seed(seed * 100003 + epoch)
        order = torch.randperm(n, generator=gen)
        sums = {"loss": 0.0, "code": 0.0, "ba": 0.0, "acc": 0.0}
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tokens = model.downsample_music(music[idx])
            tgt = {s: c[idx] for s, c in codes.items()}
            p = model(tokens, {s: model.shift_right(t) for s, t in tgt.items()})
            p_streams = {s: model.stream_slice(p, s) for s in model.streams}
            code_loss = gpt_loss(p_streams, tgt, cfg.loss, last_only=cfg.single_step)
            loss = cfg.lambda_ce * code_loss
            ba = torch.zeros(())
            if cfg.lambda_ba > 0:
                xhat = straight_through_decode(p_streams, vqvae)
                bd = dance_beat_curve(xhat, cfg.sigma_beat)
                bm = curves[idx]
                if cfg.single_step:
                    d = cfg.downsample_rate
                    bd, bm = bd[:, -(d - 1):], bm[:, -(d - 1):]
                ba = beat_align_loss(bd, bm)
                loss = loss + cfg.lambda_ba * ba
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite GPT loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                acc = torch.stack([(p_streams[s].argmax(-1) == tgt[s]).float().mean() for s in model.streams]).mean()
            w = len(idx) / n
            sums["loss"] += float(loss.detach()) * w
            sums["code"] += float(code_loss.detach()) * w
            sums["ba"] += float(ba.detach()) * w
            sums["acc"] += float(acc) * w
        record = {"epoch": epoch, **sums}
        history.append(record)
        log.debug("gpt epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(epoch, model, optimizer, history)
    return model, history


@torch.no_grad()
def teacher_forced_accuracy(model: MotionGPT, music, codes: dict) -> float:
    model.eval()
    dtype = next(model.parameters()).dtype
    music = torch.tensor(np.asarray(music), dtype=dtype)
    codes = {s: torch.tensor(np.asarray(c), dtype=torch.long) for s, c in codes.items()}
    p = model(model.downsample_music(music), {s: model.shift_right(c) for s, c in codes.items()})
    hits = [(model.stream_slice(p, s).argmax(-1) == codes[s]).float().mean() for s in model.streams]
    return float(torch.stack(hits).mean())


# ------------------------------------------------------------------ generation


@torch.no_grad()
def generate_codes(model: MotionGPT, seed_codes: dict, music, horizon: int) -> dict:
    """Top-1 autoregressive rollout to ``horizon`` code steps (seed included).

    ``music`` is raw ``(T, C_m)`` frames. Windows of ``cfg.window`` steps
    slide forward once the sequence outgrows the context.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    music = torch.tensor(np.asarray(music), dtype=dtype).unsqueeze(0)
    tokens = model.downsample_music(music)
    M = tokens.shape[1]
    if horizon > M:
        raise ValidationError(f"horizon of {horizon} steps exceeds the {M} steps of available music")
    seqs = {s: [int(c) for c in seed_codes[s]] for s in model.streams}
    lengths = {len(v) for v in seqs.values()}
    if len(lengths) != 1 or 0 in lengths:
        raise ValidationError("seed code sequences must be non-empty and of equal length")
    if lengths.pop() > horizon:
        raise ValidationError("seed is longer than the requested horizon")
    W = model.cfg.window
    k = len(seqs[model.streams[0]])
    while k < horizon:
        s0 = max(0, k - W + 1)
        L = min(W, M - s0)
        inputs = {}
        for s in model.streams:
            row = [seqs[s][s0 + i - 1] if 0 <= s0 + i - 1 < k else model.start_token for i in range(L)]
            inputs[s] = torch.tensor([row], dtype=torch.long)
        p = model(tokens[:, s0:s0 + L], inputs)
        for s in model.streams:
            seqs[s].append(int(model.stream_slice(p, s)[0, k - s0].argmax()))
        k += 1
    return {s: np.asarray(v, dtype=np.int64) for s, v in seqs.items()}


@torch.no_grad()
def generate(model: MotionGPT, vqvae, seed_codes: dict, music, horizon: int, fps: float = 30):
    """Roll out codes and decode them with the frozen VQ-VAE.

    Returns ``(MotionSequence, codes)`` with ``horizon * d`` frames.
    """
    from midget.motion import MotionSequence

    codes = generate_codes(model, seed_codes, music, horizon)
    vqvae.eval()
    pos = vqvae.decode_codes({s: torch.as_tensor(c).unsqueeze(0) for s, c in codes.items()})[0]
    return MotionSequence(fps, pos.double().numpy()), codes

"""Stage orchestration behind the command-line tool.

Each stage reads and writes files only: a dataset directory of paired motion
and music files, checkpoint archives, an append-only ``manifest.json`` in the
checkpoint directory, per-epoch ``*_log.jsonl`` training logs, reports and
plots.
"""
from __future__ import annotations

import json
import logging
import time
import xml.etree.ElementTree as ET
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from midget import checkpoint as ckpt
from midget.config import PipelineConfig
from midget.errors import ConfigError, FormatError, ValidationError
from midget.gpt import GptConfig, MotionGPT, generate, train_gpt
from midget.metrics import (
    bc_score,
    ba_score,
    detectable_beats,
    diversity,
    extract_motion_beats,
    feature_set,
    fid,
)
from midget.motion import MotionSequence, SyntheticSpec, generate_synthetic, load_motion, save_motion, speed_curve
from midget.music import MusicFeatureTrack, beat_curve_from_annotations, load_music, save_music
from midget.vqvae import MotionVQVAE, VqvaeConfig, train_vqvae

log = logging.getLogger(__name__)

ABLATION_ROWS = {
    "no_extractor": "w/o Extractor",
    "no_ba_loss": "w/o L_BA",
    "single_step": "Single Generated",
    "no_split": "w/o. upper/lower",
}


# ------------------------------------------------------------------ data


def synthetic_specs(cfg: PipelineConfig) -> list[tuple[str, str, SyntheticSpec]]:
    """Deterministic (name, split, spec) list for the configured dataset."""
    d = cfg.data
    base = cfg.optim.seed * 100_003
    rng = np.random.default_rng(base)
    offsets = rng.integers(0, d.beat_period, size=d.pairs + d.test_pairs)
    out = []
    for i in range(d.pairs + d.test_pairs):
        split, j = ("train", i) if i < d.pairs else ("test", i - d.pairs)
        pose_seed = base + 50_000 + (i % d.dancers) if d.dancers else None
        spec = SyntheticSpec(
            frames=d.frames,
            fps=d.fps,
            beat_period=d.beat_period,
            seed=base + i,
            music_dim=d.music_dim,
            beat_offset=int(offsets[i]) if d.vary_offset else 0,
            pose_seed=pose_seed,
            tempo_jitter=d.tempo_jitter,
        )
        out.append((f"{split}_{j:03d}", split, spec))
    return out


def make_data(cfg: PipelineConfig, out_dir=None) -> Path:
    out = Path(out_dir or cfg.paths.dataset_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create dataset directory {out}: {exc}") from exc
    entries = []
    for name, split, spec in synthetic_specs(cfg):
        motion, track = generate_synthetic(spec)
        save_motion(motion, out / f"{name}.mjson")
        save_music(track, out / f"{name}.musjson")
        entries.append({"name": name, "split": split, "motion": f"{name}.mjson", "music": f"{name}.musjson"})
    (out / "index.json").write_text(json.dumps({"pairs": entries}, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(dataset_dir, split: str | None = "train") -> list[tuple[str, MotionSequence, MusicFeatureTrack]]:
    root = Path(dataset_dir)
    index = root / "index.json"
    if not index.exists():
        raise ValidationError(f"no dataset index at {index}; run make-data first")
    pairs = []
    for entry in json.loads(index.read_text())["pairs"]:
        if split is not None and entry["split"] != split:
            continue
        motion = load_motion(root / entry["motion"])
        music = load_music(root / entry["music"])
        if motion.frames != music.frames or motion.fps != music.fps:
            raise ValidationError(f"{entry['name']}: motion and music are not frame-aligned")
        pairs.append((entry["name"], motion, music))
    if not pairs:
        raise ValidationError(f"dataset {root} has no {split!r} pairs")
    return pairs


def dataset_arrays(pairs, sigma_b: float = 2.0):
    """Stack pairs into motion ``(B, T, J, 3)``, music ``(B, T, C)`` and beat curves ``(B, T-1)``."""
    motion = np.stack([m.positions for _, m, _ in pairs])
    music = np.stack([t.features for _, _, t in pairs])
    T = motion.shape[1]
    curves = np.stack([beat_curve_from_annotations(t, T, sigma_b)[: T - 1] for _, _, t in pairs])
    return motion, music, curves


@torch.no_grad()
def encode_codes(vqvae: MotionVQVAE, motion: np.ndarray) -> dict:
    vqvae.eval()
    x = torch.tensor(np.asarray(motion), dtype=next(vqvae.parameters()).dtype)
    return {s: idx.numpy() for s, idx in vqvae.quantize(vqvae.encode(x)).items()}


# ------------------------------------------------------------------ manifest


def append_manifest(ckpt_dir, record: dict) -> Path:
    path = Path(ckpt_dir) / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {"runs": []}
    doc["runs"].append(record)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def verify_manifest(ckpt_dir) -> bool:
    """True when every recorded artifact still hashes to its recorded digest."""
    root = Path(ckpt_dir)
    doc = json.loads((root / "manifest.json").read_text())
    for run in doc["runs"]:
        for name, digest in run.get("artifacts", {}).items():
            target = root / name
            if not target.exists() or ckpt.sha256(target) != digest:
                return False
    return True


def _append_log(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


# ------------------------------------------------------------------ checkpoints


def save_vqvae(model: MotionVQVAE, path, epoch: int, history: list, optimizer=None, extra=None) -> Path:
    tensors = ckpt.module_tensors(model)
    manifest = {
        "kind": "vqvae",
        "config": asdict(model.cfg),
        "joints": model.n_joints,
        "split": None if model.split is None else [list(model.split.upper_indices), list(model.split.lower_indices)],
        "epoch": epoch,
        "history": history,
        **(extra or {}),
    }
    if optimizer is not None:
        opt_t, groups = ckpt.optimizer_tensors(optimizer)
        tensors.update(opt_t)
        manifest["optimizer"] = groups
    return ckpt.save_checkpoint(path, tensors, manifest)


def load_vqvae(path) -> tuple[MotionVQVAE, dict, dict]:
    from midget.motion import BodySplit

    tensors, manifest = ckpt.load_checkpoint(path)
    if manifest.get("kind") != "vqvae":
        raise FormatError(f"{path} is not a VQ-VAE checkpoint")
    cfg = VqvaeConfig(**manifest["config"])
    split = None
    if manifest["split"] is not None:
        split = BodySplit(*manifest["split"], joints=manifest["joints"])
    model = MotionVQVAE(cfg, joints=manifest["joints"], split=split)
    ckpt.load_module_tensors(model, tensors)
    model.eval()
    return model, manifest, tensors


def save_gpt(model: MotionGPT, path, epoch: int, history: list, optimizer=None, extra=None) -> Path:
    tensors = ckpt.module_tensors(model)
    manifest = {
        "kind": "gpt",
        "config": asdict(model.cfg),
        "streams": list(model.streams),
        "epoch": epoch,
        "history": history,
        **(extra or {}),
    }
    if optimizer is not None:
        opt_t, groups = ckpt.optimizer_tensors(optimizer)
        tensors.update(opt_t)
        manifest["optimizer"] = groups
    return ckpt.save_checkpoint(path, tensors, manifest)


def load_gpt(path) -> tuple[MotionGPT, dict, dict]:
    tensors, manifest = ckpt.load_checkpoint(path)
    if manifest.get("kind") != "gpt":
        raise FormatError(f"{path} is not a GPT checkpoint")
    model = MotionGPT(GptConfig(**manifest["config"]), streams=tuple(manifest["streams"]))
    ckpt.load_module_tensors(model, tensors)
    model.eval()
    return model, manifest, tensors


# ------------------------------------------------------------------ stages


def train_vqvae_stage(cfg: PipelineConfig, resume: bool = False) -> Path:
    torch.manual_seed(cfg.optim.seed)
    out_dir = Path(cfg.paths.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = load_dataset(cfg.paths.dataset_dir, "train")
    motion, _, _ = dataset_arrays(pairs)
    if motion.shape[1] != cfg.window:
        raise ConfigError(f"dataset windows have {motion.shape[1]} frames, config expects {cfg.window}")
    last = out_dir / "vqvae_last.ckpt"
    log_path = out_dir / "vqvae_log.jsonl"
    model, optimizer, start, history = None, None, 0, []
    if resume and last.exists():
        model, manifest, tensors = load_vqvae(last)
        if manifest["config"] != asdict(cfg.vqvae):
            raise ConfigError("cannot resume: checkpoint config differs from the current config")
        model.train()
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.optim.lr)
        ckpt.load_optimizer_tensors(optimizer, tensors, manifest["optimizer"])
        start, history = manifest["epoch"] + 1, manifest["history"]
        log.info("resuming VQ-VAE training at epoch %d", start)
    elif log_path.exists():
        log_path.unlink()
    clock = time.perf_counter()

    def on_epoch(epoch, m, opt, hist):
        _append_log(log_path, {**hist[-1], "seconds": round(time.perf_counter() - clock, 3)})
        if (epoch + 1) % cfg.optim.checkpoint_every == 0:
            save_vqvae(m, last, epoch, hist, opt)

    if model is None:
        model = MotionVQVAE(cfg.vqvae, joints=motion.shape[2], seed=cfg.optim.seed)
        model.fit_normalization(torch.as_tensor(motion, dtype=torch.float32))
    model, history = train_vqvae(
        motion,
        cfg.vqvae,
        cfg.optim.vqvae_epochs,
        lr=cfg.optim.lr,
        batch_size=cfg.optim.batch_size,
        seed=cfg.optim.seed,
        model=model,
        optimizer=optimizer,
        start_epoch=start,
        history=history,
        on_epoch=on_epoch,
    )
    final = out_dir / "vqvae.ckpt"
    save_vqvae(model, final, cfg.optim.vqvae_epochs - 1, history)
    append_manifest(
        out_dir,
        {
            "stage": "vqvae",
            "config": cfg.to_dict(),
            "ablation": None if cfg.vqvae.split_body else ABLATION_ROWS["no_split"],
            "epoch_losses": [h["loss"] for h in history],
            "artifacts": {final.name: ckpt.sha256(final)},
        },
    )
    return final


def check_compatible(cfg: PipelineConfig, vq_manifest: dict) -> None:
    have = vq_manifest["config"]
    for key in ("codebook_size", "channels", "downsample_rate", "split_body"):
        if have[key] != getattr(cfg.vqvae, key):
            raise ConfigError(f"VQ-VAE checkpoint has {key}={have[key]!r}, config wants {getattr(cfg.vqvae, key)!r}")


def train_gpt_stage(cfg: PipelineConfig, vqvae_path=None, resume: bool = False, ablations=()) -> Path:
    torch.manual_seed(cfg.optim.seed)
    out_dir = Path(cfg.paths.checkpoint_dir)
    vqvae_path = Path(vqvae_path or out_dir / "vqvae.ckpt")
    if not vqvae_path.exists():
        raise ValidationError(f"no VQ-VAE checkpoint at {vqvae_path}; run train-vqvae first")
    vqvae, vq_manifest, _ = load_vqvae(vqvae_path)
    check_compatible(cfg, vq_manifest)
    pairs = load_dataset(cfg.paths.dataset_dir, "train")
    motion, music, curves = dataset_arrays(pairs, cfg.gpt.sigma_b)
    codes = encode_codes(vqvae, motion)
    last = out_dir / "gpt_last.ckpt"
    log_path = out_dir / "gpt_log.jsonl"
    model, optimizer, start, history = None, None, 0, []
    if resume and last.exists():
        model, manifest, tensors = load_gpt(last)
        if manifest["config"] != asdict(cfg.gpt):
            raise ConfigError("cannot resume: checkpoint config differs from the current config")
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.optim.lr)
        ckpt.load_optimizer_tensors(optimizer, tensors, manifest["optimizer"])
        start, history = manifest["epoch"] + 1, manifest["history"]
    elif log_path.exists():
        log_path.unlink()
    clock = time.perf_counter()

    def on_epoch(epoch, m, opt, hist):
        _append_log(log_path, {**hist[-1], "seconds": round(time.perf_counter() - clock, 3)})
        if (epoch + 1) % cfg.optim.checkpoint_every == 0:
            save_gpt(m, last, epoch, hist, opt)

    model, history = train_gpt(
        music,
        codes,
        curves,
        vqvae,
        cfg.gpt,
        cfg.optim.gpt_epochs,
        lr=cfg.optim.lr,
        batch_size=cfg.optim.batch_size,
        seed=cfg.optim.seed,
        model=model,
        optimizer=optimizer,
        start_epoch=start,
        history=history,
        on_epoch=on_epoch,
    )
    final = out_dir / "gpt.ckpt"
    vq_digest = ckpt.sha256(vqvae_path)
    save_gpt(model, final, cfg.optim.gpt_epochs - 1, history, extra={"vqvae_sha256": vq_digest})
    append_manifest(
        out_dir,
        {
            "stage": "gpt",
            "config": cfg.to_dict(),
            "ablation": [ABLATION_ROWS[a] for a in ablations],
            "vqvae_sha256": vq_digest,
            "epoch_losses": [h["loss"] for h in history],
            "artifacts": {final.name: ckpt.sha256(final)},
        },
    )
    return final


def generate_motion(
    gpt_path, vqvae_path, music_path, seed_motion_path, horizon: int, out_path, seed_length: int | None = None
) -> tuple[Path, dict]:
    """Encode the seed motion, keep its first ``seed_length`` codes and roll out to ``horizon`` codes."""
    gpt, gpt_manifest, _ = load_gpt(gpt_path)
    vqvae, _, _ = load_vqvae(vqvae_path)
    expected = gpt_manifest.get("vqvae_sha256")
    if expected is not None and expected != ckpt.sha256(vqvae_path):
        raise ConfigError("GPT checkpoint was trained against a different VQ-VAE checkpoint")
    music = load_music(music_path)
    seed = load_motion(seed_motion_path)
    if seed.joints != vqvae.n_joints:
        raise ValidationError(f"seed motion has {seed.joints} joints, VQ-VAE expects {vqvae.n_joints}")
    d = vqvae.cfg.downsample_rate
    usable = music.frames - music.frames % d
    if horizon * d > usable:
        raise ValidationError(f"horizon of {horizon} codes needs {horizon * d} music frames, have {music.frames}")
    if seed.frames % d:
        raise ValidationError(f"seed motion has {seed.frames} frames, not a multiple of {d}")
    seed_codes = encode_codes(vqvae, seed.positions[None])
    available = seed.frames // d
    k = available if seed_length is None else seed_length
    if not 1 <= k <= available:
        raise ValidationError(f"seed length must be in [1, {available}] codes, got {k}")
    seed_codes = {s: c[0, :k] for s, c in seed_codes.items()}
    motion, codes = generate(gpt, vqvae, seed_codes, music.features[:usable], horizon, fps=music.fps)
    out_path = save_motion(motion, out_path)
    used = {s: c.tolist() for s, c in codes.items()}
    log.info("generated codes: %s", used)
    return out_path, used


# ------------------------------------------------------------------ evaluation


def _motion_files(directory) -> list[Path]:
    files = sorted(Path(directory).glob("*.mjson")) + sorted(Path(directory).glob("*.mbin"))
    if not files:
        raise ValidationError(f"no motion files in {directory}")
    return files


def _music_for(stem: str, *dirs) -> MusicFeatureTrack | None:
    for d in dirs:
        for suffix in (".musjson", ".musbin"):
            cand = Path(d) / f"{stem}{suffix}"
            if cand.exists():
                return load_music(cand)
    return None


def beat_scores(motion: MotionSequence, music: MusicFeatureTrack, sigma: float = 3.0) -> tuple[float, float]:
    """BA and BC of one motion against the music beats it could have hit."""
    music_beats = detectable_beats(music.beat_frames, motion.frames)
    dance_beats = extract_motion_beats(motion)
    return ba_score(music_beats, dance_beats, sigma), bc_score(music_beats, dance_beats, sigma)


def evaluate(generated_dir, reference_dir, report_path=None) -> dict:
    gen_files, ref_files = _motion_files(generated_dir), _motion_files(reference_dir)
    gen = [load_motion(p) for p in gen_files]
    ref = [load_motion(p) for p in ref_files]
    report = {}
    for kind, key in (("kinetic", "k"), ("geometric", "g")):
        gf, rf = feature_set(gen, kind), feature_set(ref, kind)
        report[f"fid_{key}"] = fid(rf, gf) if len(gen) > 1 and len(ref) > 1 else float("nan")
        report[f"div_{key}"] = diversity(gf) if len(gen) > 1 else float("nan")
    bas, bcs = [], []
    for path, motion in zip(gen_files, gen):
        track = _music_for(path.stem, generated_dir, reference_dir)
        if track is None:
            continue
        ba, bc = beat_scores(motion, track)
        bas.append(ba)
        bcs.append(bc)
    report["ba"] = float(np.mean(bas)) if bas else float("nan")
    report["bc"] = float(np.mean(bcs)) if bcs else float("nan")
    # undefined entries (too few motions, no music) are null rather than NaN
    report = {k: None if np.isnan(report[k]) else report[k] for k in ("fid_k", "fid_g", "div_k", "div_g", "ba", "bc")}
    if report_path is not None:
        entry = {"generated": str(generated_dir), "reference": str(reference_dir), **report}
        write_report(report_path, [entry])
    return report


def write_report(path, entries: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(entries, indent=1, sort_keys=True, allow_nan=False) + "\n")
    tmp.replace(path)
    return path


def read_report(path) -> list:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list) or not all(isinstance(e, dict) for e in doc):
        raise FormatError(f"{path}: a report is a JSON array of objects")
    return doc


# ------------------------------------------------------------------ plotting


def plot_beats(motion_path, music_path, out_path) -> tuple[Path, Path]:
    """SVG of the speed curve with dance beats (purple) and music beats (green), plus a CSV twin."""
    motion = load_motion(motion_path)
    track = load_music(music_path)
    speed = speed_curve(motion)
    dance = list(extract_motion_beats(motion).times)
    music = list(track.beat_frames)
    out = Path(out_path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot write to {out}: {exc}") from exc

    rows = ["series,frame,value"]
    rows += [f"speed,{t},{v!r}" for t, v in enumerate(speed.tolist())]
    rows += [f"dance_beat,{t},1" for t in dance]
    rows += [f"music_beat,{t},1" for t in music]
    csv_path = out.with_suffix(".csv")

    width, height, pad = 800, 240, 20
    n = max(motion.frames - 1, 1)
    top = float(speed.max()) if speed.size and speed.max() > 0 else 1.0

    def x(frame):
        return pad + (width - 2 * pad) * frame / n

    def y(value):
        return height - pad - (height - 2 * pad) * value / top

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height))
    ET.SubElement(svg, "title").text = "speed curve with dance and music beats"
    for frame in music:
        ET.SubElement(svg, "line", {"class": "music-beat", "x1": f"{x(frame):.3f}", "x2": f"{x(frame):.3f}",
                                    "y1": str(pad), "y2": str(height - pad), "stroke": "green",
                                    "stroke-dasharray": "4 3", "data-frame": str(frame)})
    for frame in dance:
        ET.SubElement(svg, "line", {"class": "dance-beat", "x1": f"{x(frame):.3f}", "x2": f"{x(frame):.3f}",
                                    "y1": str(pad), "y2": str(height - pad), "stroke": "purple",
                                    "stroke-dasharray": "2 3", "data-frame": str(frame)})
    points = " ".join(f"{x(t):.3f},{y(v):.3f}" for t, v in enumerate(speed.tolist()))
    ET.SubElement(svg, "polyline", {"class": "speed", "points": points, "fill": "none", "stroke": "black"})
    try:
        ET.ElementTree(svg).write(out, encoding="utf-8", xml_declaration=True)
        csv_path.write_text("\n".join(rows) + "\n")
    except OSError as exc:
        raise ValidationError(f"cannot write plot to {out}: {exc}") from exc
    return out, csv_path

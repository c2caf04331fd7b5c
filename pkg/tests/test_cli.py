"""End-to-end command-line runs on a tiny synthetic dataset."""
import csv
import hashlib
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from midget import cli, pipeline
from midget.config import load_config
from midget.errors import DivergenceError
from midget.motion import MotionSequence, load_motion, save_motion
from midget.music import MusicFeatureTrack, load_music, save_music


def write_config(root: Path, relative: bool = False, **overrides) -> Path:
    base = Path(".") if relative else root
    doc = {
        "data": {"pairs": 4, "test_pairs": 2, "tempo_jitter": 2},
        "optim": {"vqvae_epochs": 4, "gpt_epochs": 3, "checkpoint_every": 2, "batch_size": 4},
        "paths": {
            "dataset_dir": str(base / "data"),
            "checkpoint_dir": str(base / "ckpt"),
            "report_path": str(base / "report.json"),
        },
    }
    for section, values in overrides.items():
        doc.setdefault(section, {}).update(values)
    path = root / "config.json"
    path.write_text(json.dumps(doc))
    return path


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root)
    assert run("make-data", "--config", cfg) == 0
    assert run("train-vqvae", "--config", cfg) == 0
    assert run("train-gpt", "--config", cfg) == 0
    return root, cfg


def test_make_data_files_and_determinism(tmp_path):
    cfg = write_config(tmp_path, data={"pairs": 8, "test_pairs": 0})
    assert run("make-data", "--config", cfg) == 0
    files = sorted(p.name for p in (tmp_path / "data").iterdir())
    assert len(files) == 17 and "index.json" in files
    first = {f: digest(tmp_path / "data" / f) for f in files}
    assert run("make-data", "--config", cfg) == 0
    assert first == {f: digest(tmp_path / "data" / f) for f in files}
    for _, motion, music in pipeline.load_dataset(tmp_path / "data"):
        assert motion.frames == music.frames == 64


def test_seed_environment_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    monkeypatch.setenv("MIDGET_SEED", "7")
    assert load_config(cfg).optim.seed == 7
    monkeypatch.setenv("MIDGET_SEED", "seven")
    assert run("make-data", "--config", cfg) == 2


def test_full_profile_validates_without_training():
    cfg = load_config(None, "full")
    assert (cfg.window, cfg.vqvae.downsample_rate, cfg.vqvae.codebook_size) == (240, 8, 512)
    assert cfg.optim.batch_size == 64 and cfg.gpt.layers == 12


def test_bad_config_exits_with_validation_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {"frames": 60}}))
    assert run("make-data", "--config", bad) == 2
    bad.write_text(json.dumps({"nonsense": {}}))
    assert run("make-data", "--config", bad) == 2
    bad.write_text("{")
    assert run("make-data", "--config", bad) == 2


def test_stage_order_is_enforced(tmp_path):
    cfg = write_config(tmp_path)
    assert run("train-vqvae", "--config", cfg) == 2
    assert run("make-data", "--config", cfg) == 0
    assert run("train-gpt", "--config", cfg) == 2


def test_divergence_exit_code(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    assert run("make-data", "--config", cfg) == 0

    def explode(*args, **kwargs):
        raise DivergenceError("loss is nan")

    monkeypatch.setattr(pipeline, "train_vqvae", explode)
    assert run("train-vqvae", "--config", cfg) == 3


def test_training_writes_checkpoints_manifest_and_logs(trained):
    root, _ = trained
    ck = root / "ckpt"
    for name in ("vqvae.ckpt", "vqvae_last.ckpt", "gpt.ckpt", "gpt_last.ckpt", "vqvae_log.jsonl", "gpt_log.jsonl"):
        assert (ck / name).exists(), name
    doc = json.loads((ck / "manifest.json").read_text())
    assert [r["stage"] for r in doc["runs"]] == ["vqvae", "gpt"]
    assert len(doc["runs"][0]["epoch_losses"]) == 4
    assert pipeline.verify_manifest(ck)
    logs = [json.loads(line) for line in (ck / "gpt_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in logs] == [0, 1, 2] and all("seconds" in r for r in logs)


def test_rerun_gives_identical_manifest_and_checkpoints(tmp_path, monkeypatch):
    # relative paths keep the config echo in the manifest identical across directories
    digests = []
    for sub in ("a", "b"):
        (tmp_path / sub).mkdir()
        monkeypatch.chdir(tmp_path / sub)
        cfg = write_config(tmp_path / sub, relative=True, optim={"vqvae_epochs": 2, "gpt_epochs": 2})
        for cmd in ("make-data", "train-vqvae", "train-gpt"):
            assert run(cmd, "--config", cfg) == 0
        digests.append({n: digest(Path("ckpt") / n) for n in ("manifest.json", "vqvae.ckpt", "gpt.ckpt")})
    assert digests[0] == digests[1]


def test_resume_continues_from_last_checkpoint(tmp_path, trained):
    root, _ = trained
    cfg = write_config(tmp_path, optim={"vqvae_epochs": 2})
    assert run("make-data", "--config", cfg) == 0
    assert run("train-vqvae", "--config", cfg) == 0
    cfg = write_config(tmp_path)
    assert run("train-vqvae", "--config", cfg, "--resume") == 0
    # the resumed run reaches the same weights as the uninterrupted one
    assert digest(tmp_path / "ckpt" / "vqvae.ckpt") == digest(root / "ckpt" / "vqvae.ckpt")


def test_ablation_flags_are_recorded(tmp_path, trained):
    root, cfg = trained
    ck = tmp_path / "ck"
    cfg2 = write_config(tmp_path, paths={"dataset_dir": str(root / "data"), "checkpoint_dir": str(ck)})
    assert run("train-vqvae", "--config", cfg2, "--no-split") == 0
    assert run("train-gpt", "--config", cfg2, "--no-split", "--no-extractor", "--no-ba-loss", "--single-step") == 0
    runs = json.loads((ck / "manifest.json").read_text())["runs"]
    assert runs[0]["ablation"] == "w/o. upper/lower"
    assert sorted(runs[1]["ablation"]) == sorted(["w/o Extractor", "w/o L_BA", "Single Generated", "w/o. upper/lower"])
    assert runs[1]["config"]["gpt"]["codebook_size"] == 128
    # a split GPT cannot sit on the whole-body VQ-VAE
    assert run("train-gpt", "--config", cfg2) == 2


def test_mismatched_codebook_refused(tmp_path, trained):
    root, _ = trained
    cfg = write_config(
        tmp_path,
        paths={"dataset_dir": str(root / "data"), "checkpoint_dir": str(root / "ckpt")},
        vqvae={"codebook_size": 32},
        gpt={"codebook_size": 32},
    )
    assert run("train-gpt", "--config", cfg) == 2


def test_generate_length_and_determinism(trained):
    root, cfg = trained
    data = root / "data"
    args = ["generate", "--config", cfg, "--music", data / "test_000.musjson",
            "--seed-motion", data / "test_000.mjson", "--seed-length", 1, "--horizon", 8]
    assert run(*args, "--out", root / "gen" / "a.mjson") == 0
    assert run(*args, "--out", root / "gen" / "b.mjson") == 0
    a = load_motion(root / "gen" / "a.mjson")
    assert a.frames == 64 and a.joints == 24
    assert digest(root / "gen" / "a.mjson") == digest(root / "gen" / "b.mjson")
    common = ["generate", "--config", cfg, "--music", data / "test_000.musjson",
              "--seed-motion", data / "test_000.mjson", "--out", root / "gen" / "c.mjson"]
    assert run(*common, "--horizon", 9) == 2
    assert run(*common, "--seed-length", 9, "--horizon", 8) == 2


def test_evaluate_reference_against_itself(tmp_path, trained):
    root, cfg = trained
    report = tmp_path / "r.json"
    assert run("evaluate", "--config", cfg, "--generated", root / "data", "--reference", root / "data",
               "--report", report) == 0
    (entry,) = pipeline.read_report(report)
    assert set(entry) >= {"fid_k", "fid_g", "div_k", "div_g", "ba", "bc"}
    assert entry["fid_k"] < 1e-6 and entry["fid_g"] < 1e-6
    # synthetic ground truth: extracted dance beats equal the detectable annotations
    assert entry["ba"] == pytest.approx(1.0, abs=1e-6) and entry["bc"] == pytest.approx(1.0, abs=1e-6)
    first = report.read_bytes()
    assert run("evaluate", "--config", cfg, "--generated", root / "data", "--reference", root / "data",
               "--report", report) == 0
    assert report.read_bytes() == first


def test_evaluate_missing_inputs(tmp_path, trained):
    _, cfg = trained
    (tmp_path / "empty").mkdir()
    assert run("evaluate", "--config", cfg, "--generated", tmp_path / "empty", "--reference", tmp_path / "empty") == 2


def test_plot_beats_markers_match_annotations(tmp_path, trained):
    root, cfg = trained
    assert run("plot-beats", "--config", cfg, "--motion", root / "data" / "train_000.mjson",
               "--music", root / "data" / "train_000.musjson", "--out", tmp_path / "p.svg") == 0
    track = load_music(root / "data" / "train_000.musjson")
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.DictReader(fh))
    music = [int(r["frame"]) for r in rows if r["series"] == "music_beat"]
    dance = [int(r["frame"]) for r in rows if r["series"] == "dance_beat"]
    assert music == list(track.beat_frames)
    assert dance == [b for b in track.beat_frames if 1 <= b <= 61]
    svg = ET.parse(tmp_path / "p.svg").getroot()
    frames = sorted(int(e.get("data-frame")) for e in svg.iter("{http://www.w3.org/2000/svg}line")
                    if e.get("class") == "music-beat")
    assert frames == music


def test_plot_beats_without_beats_draws_curve_only(tmp_path, trained):
    _, cfg = trained
    save_motion(MotionSequence(30, np.zeros((8, 24, 3))), tmp_path / "still.mjson")
    save_music(MusicFeatureTrack(30, np.zeros((8, 2)), ()), tmp_path / "quiet.musjson")
    assert run("plot-beats", "--config", cfg, "--motion", tmp_path / "still.mjson",
               "--music", tmp_path / "quiet.musjson", "--out", tmp_path / "q.svg") == 0
    svg = ET.parse(tmp_path / "q.svg").getroot()
    assert not list(svg.iter("{http://www.w3.org/2000/svg}line"))
    assert len(list(svg.iter("{http://www.w3.org/2000/svg}polyline"))) == 1


def test_console_script_is_installed():
    import shutil
    import subprocess

    exe = shutil.which("midget")
    assert exe is not None
    out = subprocess.run([exe, "--help"], capture_output=True, text=True, check=True)
    assert "plot-beats" in out.stdout

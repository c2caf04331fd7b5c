import json

import numpy as np
import pytest
import torch

from midget.errors import FormatError, ValidationError
from midget.music import (
    MusicExtractor,
    MusicFeatureTrack,
    beat_curve_from_annotations,
    extract,
    gaussian_beat_curve,
    load_music,
    naive_downsample,
    save_music,
)


def track(rng, frames=64, dim=5, beats=(0, 8, 30)):
    return MusicFeatureTrack(30, rng.normal(size=(frames, dim)), beats)


def test_track_validation(rng):
    with pytest.raises(ValidationError):
        MusicFeatureTrack(30, rng.normal(size=(8, 2)), (3, 3))
    with pytest.raises(ValidationError):
        MusicFeatureTrack(30, rng.normal(size=(8, 2)), (8,))
    with pytest.raises(ValidationError):
        MusicFeatureTrack(30, np.full((8, 2), np.inf), ())


@pytest.mark.parametrize("suffix", [".musjson", ".musbin"])
def test_music_roundtrip_is_byte_stable(tmp_path, rng, suffix):
    t = track(rng)
    a = save_music(t, tmp_path / f"a{suffix}")
    loaded = load_music(a)
    b = save_music(loaded, tmp_path / f"b{suffix}")
    assert a.read_bytes() == b.read_bytes()
    assert loaded.beat_frames == t.beat_frames


def test_music_format_errors(tmp_path, rng):
    path = save_music(track(rng, frames=4, dim=2, beats=(1,)), tmp_path / "m.musjson")
    doc = json.loads(path.read_text())
    for name, bad in {"short": {**doc, "data": doc["data"][:-1]}, "beats": {**doc, "beats": [0.5]}}.items():
        p = tmp_path / f"{name}.musjson"
        p.write_text(json.dumps(bad))
        with pytest.raises(FormatError):
            load_music(p)
    raw = save_music(track(rng, frames=4, dim=2, beats=(1,)), tmp_path / "m.musbin").read_bytes()
    for name, payload in {"trunc": raw[:-1], "trail": raw + b"\0\0", "magic": b"ABCD" + raw[4:]}.items():
        p = tmp_path / f"{name}.musbin"
        p.write_bytes(payload)
        with pytest.raises(FormatError):
            load_music(p)


def test_beat_curve_peaks_at_annotations(rng):
    t = track(rng, beats=(5, 40))
    curve = beat_curve_from_annotations(t, 64, sigma=2.0)
    assert curve.max() == pytest.approx(1.0)
    assert curve[5] == pytest.approx(1.0) and curve[40] == pytest.approx(1.0)
    assert curve[20] < 1e-6
    empty = MusicFeatureTrack(30, np.zeros((10, 1)), ())
    np.testing.assert_array_equal(beat_curve_from_annotations(empty, 10), np.zeros(10))


def test_gaussian_curve_closed_form():
    curve = gaussian_beat_curve([3], 7, sigma=2.0)
    np.testing.assert_allclose(curve, np.exp(-((np.arange(7) - 3) ** 2) / 8.0))


def test_naive_downsample_keeps_every_rate_th_frame(rng):
    t = track(rng)
    out = naive_downsample(t, 8)
    np.testing.assert_array_equal(out.features, t.features[::8])
    with pytest.raises(ValidationError):
        naive_downsample(track(rng, frames=60), 8)


@pytest.mark.parametrize("rate", [1, 2, 4, 8])
def test_extractor_shapes(rng, rate):
    ext = MusicExtractor(5, 16, rate)
    out = extract(track(rng), ext)
    assert out.features.shape == (64 // rate, 16)
    if rate > 1:
        with pytest.raises(ValidationError):
            ext(torch.zeros(1, 65, 5))


def test_extractor_receptive_field_is_local(rng):
    # each output token depends only on a bounded neighbourhood of input frames
    ext = MusicExtractor(3, 4, 8).double()
    x = torch.tensor(rng.normal(size=(1, 64, 3)))
    base = ext(x)
    y = x.clone()
    y[0, 63] += 10.0
    diff = (ext(y) - base).abs().sum(-1)[0]
    assert diff[0] == 0 and diff[-1] > 0

import json

import numpy as np
import pytest

from midget.errors import FormatError, ValidationError
from midget.motion import (
    BodySplit,
    MotionSequence,
    SyntheticSpec,
    derivatives,
    generate_synthetic,
    load_motion,
    merge_body,
    save_motion,
    speed_curve,
    split_body,
)
from midget.metrics import extract_motion_beats


def random_motion(rng, frames=16, joints=24, fps=30):
    return MotionSequence(fps, rng.normal(size=(frames, joints, 3)))


def test_motion_validation():
    with pytest.raises(ValidationError):
        MotionSequence(30, np.zeros((4, 24)))
    with pytest.raises(ValidationError):
        MotionSequence(30, np.full((4, 2, 3), np.nan))
    with pytest.raises(ValidationError):
        MotionSequence(0, np.zeros((4, 2, 3)))
    m = MotionSequence(30, np.zeros((4, 2, 3)))
    with pytest.raises(ValueError):
        m.positions[0, 0, 0] = 1.0


def test_derivatives_are_forward_differences(rng):
    m = random_motion(rng)
    d = derivatives(m)
    np.testing.assert_array_equal(d.velocity[3], m.positions[4] - m.positions[3])
    np.testing.assert_allclose(d.acceleration[2], m.positions[4] - 2 * m.positions[3] + m.positions[2])
    with pytest.raises(ValidationError):
        derivatives(MotionSequence(30, np.zeros((2, 1, 3))))


def test_split_merge_roundtrip(rng):
    m = random_motion(rng)
    split = BodySplit.default()
    upper, lower = split_body(m, split)
    assert lower.joints == 9 and upper.joints == 15
    assert merge_body(upper, lower, split) == m


def test_body_split_validation():
    with pytest.raises(ValidationError):
        BodySplit((0, 1), (1, 2), joints=3)
    with pytest.raises(ValidationError):
        BodySplit((0,), (1,), joints=3)
    with pytest.raises(ValidationError):
        BodySplit.default(joints=22)


@pytest.mark.parametrize("suffix", [".mjson", ".mbin"])
def test_motion_file_roundtrip_is_byte_stable(tmp_path, rng, suffix):
    m = random_motion(rng)
    a = save_motion(m, tmp_path / f"a{suffix}")
    loaded = load_motion(a)
    b = save_motion(loaded, tmp_path / f"b{suffix}")
    assert a.read_bytes() == b.read_bytes()
    if suffix == ".mjson":
        assert loaded == m
    else:
        np.testing.assert_allclose(loaded.positions, m.positions, rtol=1e-6, atol=1e-6)


def test_motion_json_errors(tmp_path, rng):
    m = random_motion(rng, frames=3, joints=2)
    path = save_motion(m, tmp_path / "m.mjson")
    doc = json.loads(path.read_text())
    cases = {
        "trunc": {**doc, "data": doc["data"][:-1]},
        "trail": {**doc, "data": doc["data"] + [0.0]},
        "header": {**doc, "frames": -1},
        "missing": {k: v for k, v in doc.items() if k != "fps"},
    }
    for name, bad in cases.items():
        p = tmp_path / f"{name}.mjson"
        p.write_text(json.dumps(bad))
        with pytest.raises(FormatError):
            load_motion(p)
    p = tmp_path / "nan.mjson"
    p.write_text(json.dumps(doc).replace(str(doc["data"][0]), "NaN", 1))
    with pytest.raises(ValidationError):
        load_motion(p)
    p = tmp_path / "junk.mjson"
    p.write_text("{not json")
    with pytest.raises(FormatError):
        load_motion(p)


def test_motion_binary_errors(tmp_path, rng):
    path = save_motion(random_motion(rng, frames=3, joints=2), tmp_path / "m.mbin")
    raw = path.read_bytes()
    for name, payload in {"trunc": raw[:-2], "trail": raw + b"\0", "magic": b"XXXX" + raw[4:], "short": raw[:5]}.items():
        p = tmp_path / f"{name}.mbin"
        p.write_bytes(payload)
        with pytest.raises(FormatError):
            load_motion(p)


def test_speed_curve_length_and_value():
    pos = np.zeros((4, 1, 3))
    pos[1:, 0, 0] = [3.0, 3.0, 7.0]
    np.testing.assert_allclose(speed_curve(MotionSequence(30, pos)), [3.0, 0.0, 4.0])


@pytest.mark.parametrize("jitter,offset", [(0, 0), (0, 3), (2, 1), (3, 5)])
def test_synthetic_dance_beats_follow_music_beats(jitter, offset):
    motion, track = generate_synthetic(SyntheticSpec(seed=4, tempo_jitter=jitter, beat_offset=offset))
    beats = extract_motion_beats(motion).times
    detectable = tuple(b for b in track.beat_frames if 1 <= b <= motion.frames - 3)
    assert beats == detectable


def test_synthetic_is_deterministic_and_dancer_shared():
    a, ta = generate_synthetic(SyntheticSpec(seed=1, pose_seed=7))
    b, tb = generate_synthetic(SyntheticSpec(seed=1, pose_seed=7))
    c, _ = generate_synthetic(SyntheticSpec(seed=2, pose_seed=7))
    assert a == b and ta == tb
    np.testing.assert_array_equal(a.positions[0], c.positions[0])


def test_synthetic_rejects_bad_jitter():
    with pytest.raises(ValidationError):
        generate_synthetic(SyntheticSpec(beat_period=4, tempo_jitter=3))

"""Compiled and numpy kernels against brute-force references."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from midget import _pykernels, kernels

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])

finite = st.floats(-10, 10, allow_nan=False, width=64)


def brute_nearest(e, codes):
    dist = ((e[:, None, :] - codes[None, :, :]) ** 2).sum(-1)
    return dist.argmin(1)


def test_compiled_backend_is_active():
    # the build step is part of the install; a silent fallback would hide a broken wheel
    assert kernels.BACKEND == "cython"


@pytest.mark.parametrize("backend", BACKENDS)
def test_nearest_code_matches_brute_force(backend, rng):
    for _ in range(200):
        n, c, m = rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 17)
        codes = rng.normal(size=(n, c))
        e = rng.normal(size=(m, c))
        np.testing.assert_array_equal(kernels.nearest_code(e, codes, backend), brute_nearest(e, codes))


@pytest.mark.parametrize("backend", BACKENDS)
def test_nearest_code_ties_go_to_lowest_index(backend):
    codes = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    e = np.zeros((3, 2))
    np.testing.assert_array_equal(kernels.nearest_code(e, codes, backend), [0, 0, 0])
    e = np.array([[1.0, 0.0]])
    assert kernels.nearest_code(e, codes, backend)[0] == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.data())
def test_backends_agree_on_nearest_code(n, c, data):
    codes = data.draw(hnp.arrays(np.float64, (n, c), elements=finite))
    e = data.draw(hnp.arrays(np.float64, (4, c), elements=finite))
    expected = _pykernels.nearest_code(e, codes)
    for backend in BACKENDS:
        np.testing.assert_array_equal(kernels.nearest_code(e, codes, backend), expected)


def brute_minima(speed):
    out, t, n = [], 1, len(speed)
    while t < n - 1:
        # a plateau [t, end] is a minimum when both neighbours are strictly higher
        end = t
        while end + 1 < n and speed[end + 1] == speed[t]:
            end += 1
        if speed[t - 1] > speed[t] and end + 1 < n and speed[end + 1] > speed[t]:
            out.append(t)
        t = end + 1
    return out


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=0, max_size=40))
def test_speed_minima_backends_match_reference(values):
    speed = np.asarray(values, dtype=np.float64)
    for backend in BACKENDS:
        assert kernels.speed_minima(speed, backend).tolist() == brute_minima(speed)


@pytest.mark.parametrize("backend", BACKENDS)
def test_speed_minima_plateau_reports_first_frame(backend):
    speed = np.array([3.0, 1.0, 1.0, 1.0, 2.0, 0.5, 0.5])
    assert kernels.speed_minima(speed, backend).tolist() == [1]


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(0, 100), min_size=0, max_size=20),
    st.lists(st.integers(0, 100), min_size=1, max_size=20, unique=True),
)
def test_nearest_distance_backends_match_brute_force(src, targets):
    targets = sorted(targets)
    src_a = np.asarray(src, dtype=np.float64)
    expected = [min(abs(s - t) for t in targets) for s in src]
    for backend in BACKENDS:
        np.testing.assert_array_equal(kernels.nearest_distance(src_a, np.asarray(targets, float), backend), expected)


@pytest.mark.parametrize("backend", BACKENDS)
def test_nearest_distance_without_targets_is_infinite(backend):
    out = kernels.nearest_distance(np.array([1.0, 2.0]), np.array([]), backend)
    assert np.all(np.isinf(out))


def test_shape_validation():
    with pytest.raises(ValueError):
        kernels.nearest_code(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        kernels.nearest_code(np.zeros((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        kernels.nearest_code(np.zeros((2, 3)), np.zeros((1, 3)), backend="fortran")


def test_environment_switch_selects_fallback():
    import os
    import subprocess
    import sys

    env = {**os.environ, "MIDGET_PURE_PYTHON": "1"}
    out = subprocess.run(
        [sys.executable, "-c", "from midget import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"

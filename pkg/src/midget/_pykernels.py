"""Numpy fallback for the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def nearest_code(e, codes):
    e = np.asarray(e, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    # accumulate channel by channel so rounding matches the compiled loop
    dist = np.zeros((e.shape[0], codes.shape[0]))
    for c in range(e.shape[1]):
        diff = e[:, None, c] - codes[None, :, c]
        dist += diff * diff
    if codes.shape[0] == 0:
        return np.zeros(e.shape[0], dtype=np.int64)
    return np.argmin(dist, axis=1).astype(np.int64)


def speed_minima(speed):
    speed = np.asarray(speed, dtype=np.float64)
    n = speed.shape[0]
    found = []
    t = 1
    while t < n - 1:
        if speed[t] < speed[t - 1]:
            end = t
            while end + 1 < n and speed[end + 1] == speed[t]:
                end += 1
            if end + 1 < n and speed[end + 1] > speed[t]:
                found.append(t)
            t = end + 1
        else:
            t += 1
    return np.asarray(found, dtype=np.int64)


def nearest_distance(src, sorted_targets):
    src = np.asarray(src, dtype=np.float64)
    targets = np.asarray(sorted_targets, dtype=np.float64)
    if targets.size == 0:
        return np.full(src.shape, np.inf)
    pos = np.searchsorted(targets, src, side="left")
    right = np.abs(targets[np.minimum(pos, targets.size - 1)] - src)
    left = np.abs(src - targets[np.maximum(pos - 1, 0)])
    return np.minimum(left, right)

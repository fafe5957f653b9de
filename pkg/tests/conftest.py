"""Shared test helpers: brute-force oracles kept deliberately dumb so they
cannot share a bug with the implementations they check."""

import numpy as np
import pytest


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Direct quadruple-loop cross-correlation in float64. Slow on purpose."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c_in, h, hw = x.shape
    c_out, c_in2, kh, kw = w.shape
    assert c_in == c_in2
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (x.shape[2] - kh) // stride + 1
    w_out = (x.shape[3] - kw) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for ni in range(n):
        for oi in range(c_out):
            for yi in range(h_out):
                for xi in range(w_out):
                    patch = x[ni, :, yi * stride:yi * stride + kh,
                              xi * stride:xi * stride + kw]
                    out[ni, oi, yi, xi] = np.sum(patch * w[oi])
            if b is not None:
                out[ni, oi] += b[oi]
    return out


def flood_fill_components(mask):
    """Recursive-style 4-connected labeling oracle using an explicit queue,
    scanning in arbitrary (set, not raster) order."""
    mask = np.asarray(mask).astype(bool)
    labels = np.zeros(mask.shape, dtype=np.int32)
    todo = {(int(r), int(c)) for r, c in zip(*np.nonzero(mask))}
    count = 0
    while todo:
        seed = todo.pop()
        count += 1
        queue = [seed]
        while queue:
            r, c = queue.pop()
            labels[r, c] = count
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if (rr, cc) in todo:
                    todo.discard((rr, cc))
                    queue.append((rr, cc))
    return labels, count


def partitions_equal(labels_a, labels_b):
    """True when two labelings induce the same partition of the foreground,
    ignoring which integer each component got."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if np.any((a > 0) != (b > 0)):
        return False
    pairs = set(zip(a[a > 0].tolist(), b[a > 0].tolist()))
    return (len(pairs) == len({p[0] for p in pairs})
            and len(pairs) == len({p[1] for p in pairs}))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

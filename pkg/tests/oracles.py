"""Independent reference implementations shared by the unit and acceptance tests."""

import math

import numpy as np

from dualnda.data import LabelKind, LabelSpace


def oracle_keep(values, q):
    """Sort, interpolate the q-quantile between order statistics, keep values strictly above it."""
    v = [float(x) for x in values]
    s = sorted(v)
    h = (len(s) - 1) * q
    lo = math.floor(h)
    c = s[lo] if lo + 1 >= len(s) else s[lo] + (h - lo) * (s[lo + 1] - s[lo])
    return [i for i, x in enumerate(v) if x > c]


def score_pixel(images):
    """Stub scorer: the score is the first pixel, so tests control every score exactly."""
    return images[:, 0, 0, 0].astype(np.float64), 0


def stub_generator(score_fn):
    def gen(labels, rng):
        s = score_fn(labels, rng)
        return s.reshape(-1, 1, 1, 1).astype(np.float32)
    return gen


def integer_space(n_labels):
    return LabelSpace(1.0, float(n_labels), LabelKind.INTEGER_VALUED, np.linspace(0, 1, n_labels))


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g

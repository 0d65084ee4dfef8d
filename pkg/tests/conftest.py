"""
Shared fixtures and reference oracles for the test suite
"""

import sys
from fractions import Fraction
from itertools import product
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config.settings import Settings  # noqa: E402
from pidcount.data_pipeline import Sample, save_dataset  # noqa: E402

sys.setrecursionlimit(max(sys.getrecursionlimit(), 10000))


@pytest.fixture(scope="session", autouse=True)
def isolated_logs(tmp_path_factory):
    """Keep log files of CLI runs out of the project tree"""
    original = Settings.LOGS_DIR
    Settings.LOGS_DIR = tmp_path_factory.mktemp("logs")
    yield Settings.LOGS_DIR
    Settings.LOGS_DIR = original


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Nested-loop cross-correlation"""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni, co, i, j in product(range(n), range(cout), range(ho), range(wo)):
        window = xp[ni, :, i * stride:i * stride + k, j * stride:j * stride + k]
        out[ni, co, i, j] = float((window * w[co]).sum()) + float(b[co])
    return out


def numeric_gradient(func, array, h=1e-4):
    """Central finite differences of a scalar function w.r.t. every entry of array (modified in place)"""
    grad = np.zeros_like(array, dtype=np.float64)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + h
        plus = func()
        array[index] = original - h
        minus = func()
        array[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def flood_fill_labels(mask, connectivity=8):
    """Recursive flood fill labeling, labels in row-major order of first pixel"""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if connectivity == 8:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]

    def fill(y, x, label):
        labels[y, x] = label
        for dy, dx in steps:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                fill(ny, nx, label)

    count = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not labels[y, x]:
                count += 1
                fill(y, x, count)
    return labels, count


def partition(labels):
    """Set of frozensets of pixel coordinates, one per label"""
    groups = {}
    for (y, x), label in np.ndenumerate(labels):
        if label:
            groups.setdefault(int(label), set()).add((y, x))
    return {frozenset(g) for g in groups.values()}


def brute_force_hausdorff(a, b):
    xs = np.argwhere(np.asarray(a).astype(bool))
    ys = np.argwhere(np.asarray(b).astype(bool))
    diff = xs[:, None, :] - ys[None, :, :]
    squared = (diff ** 2).sum(axis=2)
    return float(np.sqrt(max(squared.min(axis=1).max(), squared.min(axis=0).max())))


def exhaustive_otsu(histogram):
    """argmax over t of the between-class variance w0 w1 (mu0 - mu1)^2 in exact rationals"""
    hist = [int(v) for v in histogram]
    total = sum(hist)
    best_t, best = None, None
    for t in range(255):
        w0 = sum(hist[:t + 1])
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        mu0 = Fraction(sum(i * hist[i] for i in range(t + 1)), w0)
        mu1 = Fraction(sum(i * hist[i] for i in range(t + 1, 256)), w1)
        variance = Fraction(w0 * w1, total * total) * (mu0 - mu1) ** 2
        if best is None or variance > best:
            best_t, best = t, variance
    return best_t


def disk_image(size, centers, radius, value=0.85, background=0.1):
    yy, xx = np.mgrid[0:size, 0:size]
    image = np.full((size, size), background)
    for cy, cx in centers:
        image[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = value
    return image


@pytest.fixture
def make_dataset(tmp_path):
    """Write a small labelled dataset and return its directory"""
    def build(n=3, size=16, name="ds", with_counts=True):
        samples = []
        for index in range(n):
            mask = np.zeros((size, size), dtype=np.uint8)
            mask[2 + index:6 + index, 3:8] = 1
            image = np.where(mask, 0.8, 0.2).astype(np.float32)
            samples.append(Sample(id=f"img_{index:03d}", image=image, mask=mask, count=1 if with_counts else None))
        return save_dataset(samples, tmp_path / name)
    return build

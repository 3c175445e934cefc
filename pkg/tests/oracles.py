"""Independent brute-force reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def contiguous_partitions(n: int):
    """Yield every split of range(n) into contiguous blocks, as (start, stop) lists."""
    for cuts in itertools.product((0, 1), repeat=max(n - 1, 0)):
        blocks, start = [], 0
        for i, c in enumerate(cuts, start=1):
            if c:
                blocks.append((start, i))
                start = i
        blocks.append((start, n))
        yield blocks


def brute_force_monotone_sse(y, w=None) -> float:
    """Minimum weighted SSE over pooled partitions whose block means are non-decreasing."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    best = math.inf
    for blocks in contiguous_partitions(len(y)):
        means = [np.average(y[a:b], weights=w[a:b]) for a, b in blocks]
        if any(m2 < m1 - 1e-15 for m1, m2 in zip(means, means[1:])):
            continue
        sse = sum(float(np.sum(w[a:b] * (y[a:b] - m) ** 2)) for (a, b), m in zip(blocks, means))
        best = min(best, sse)
    return best


def grid_temperature(scores, labels, lo: float = 0.1, hi: float = 10.0, n: int = 2001) -> float:
    s = np.clip(np.asarray(scores, dtype=float), 1e-12, 1 - 1e-12)
    y = np.asarray(labels, dtype=float)
    z = np.log(s) - np.log1p(-s)
    grid = np.linspace(lo, hi, n)
    nll = [np.sum(np.logaddexp(0.0, z / t) - y * z / t) for t in grid]
    return float(grid[int(np.argmin(nll))])


def ece_loop(scores, labels, n_bins: int) -> float:
    """Plain-loop binned ECE; the last bin is closed on the right."""
    n = len(scores)
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = [
            (s, y) for s, y in zip(scores, labels)
            if lo <= s < hi or (b == n_bins - 1 and s == 1.0)
        ]
        if members:
            conf = sum(s for s, _ in members) / len(members)
            acc = sum(y for _, y in members) / len(members)
            total += len(members) / n * abs(acc - conf)
    return total


def best_partition_1d(points, k: int) -> tuple[float, list[float]]:
    """Exhaustive k-way labelling of a small point set; returns (inertia, sorted centroids)."""
    pts = np.asarray(points, dtype=float)
    best, best_c = math.inf, []
    for labels in itertools.product(range(k), repeat=len(pts)):
        if len(set(labels)) != k:
            continue
        lab = np.array(labels)
        cents = [pts[lab == c].mean() for c in range(k)]
        inertia = sum(float(np.sum((pts[lab == c] - cents[c]) ** 2)) for c in range(k))
        if inertia < best:
            best, best_c = inertia, sorted(cents)
    return best, best_c


def silhouette_direct(x, labels) -> float:
    x = np.asarray(x, dtype=float).reshape(len(labels), -1)
    labels = list(labels)
    vals = []
    for i in range(len(x)):
        own = [j for j in range(len(x)) if labels[j] == labels[i] and j != i]
        if not own:
            vals.append(0.0)
            continue
        a = sum(np.linalg.norm(x[i] - x[j]) for j in own) / len(own)
        b = min(
            np.mean([np.linalg.norm(x[i] - x[j]) for j in range(len(x)) if labels[j] == c])
            for c in set(labels) if c != labels[i]
        )
        vals.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return float(np.mean(vals))


def davies_bouldin_direct(x, labels) -> float:
    x = np.asarray(x, dtype=float).reshape(len(labels), -1)
    clusters = sorted(set(labels))
    cents = {c: x[[i for i, l in enumerate(labels) if l == c]].mean(axis=0) for c in clusters}
    spread = {
        c: np.mean([np.linalg.norm(x[i] - cents[c]) for i, l in enumerate(labels) if l == c]) for c in clusters
    }
    worst = [
        max((spread[a] + spread[b]) / np.linalg.norm(cents[a] - cents[b]) for b in clusters if b != a)
        for a in clusters
    ]
    return float(np.mean(worst))

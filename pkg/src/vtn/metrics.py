"""Objective evaluation: DTW alignment, MCD, log-F0 correlation, duration ratio."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MetricUndefinedError, ShapeError
from .features import FeatureSequence, VOICED_THRESHOLD

MCD_CONST = 10.0 / math.log(10.0)
LDR_WINDOW = 10  # aligned path steps per local-slope estimate


@dataclass
class WarpPath:
    """Monotone alignment from (1, 1) to (N_c, N_r), stored 0-based."""

    pairs: np.ndarray  # (steps, 2) of (n_conv, n_ref) indices

    def __len__(self):
        return len(self.pairs)


def dtw(a: np.ndarray, b: np.ndarray) -> tuple[WarpPath, float]:
    """Minimal-cost monotone alignment of two (D x N) sequences under
    Euclidean local cost, steps {(1,1), (1,0), (0,1)} with ties broken in
    that order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"dtw: incompatible shapes {a.shape}, {b.shape}")
    n_a, n_b = a.shape[1], b.shape[1]
    if n_a == 0 or n_b == 0:
        raise ShapeError("dtw: empty sequence")

    # local cost matrix
    diff = a.T[:, None, :] - b.T[None, :, :]
    cost = np.sqrt((diff * diff).sum(axis=2))

    acc = np.full((n_a, n_b), np.inf)
    move = np.zeros((n_a, n_b), dtype=np.int8)  # 0=diag, 1=from-left(a step), 2=from-below(b step)
    acc[0, 0] = cost[0, 0]
    for i in range(n_a):
        for j in range(n_b):
            if i == 0 and j == 0:
                continue
            best = np.inf
            m = 0
            if i > 0 and j > 0 and acc[i - 1, j - 1] <= best:
                best, m = acc[i - 1, j - 1], 0
            if i > 0 and acc[i - 1, j] < best:
                best, m = acc[i - 1, j], 1
            if j > 0 and acc[i, j - 1] < best:
                best, m = acc[i, j - 1], 2
            acc[i, j] = best + cost[i, j]
            move[i, j] = m

    pairs = [(n_a - 1, n_b - 1)]
    i, j = n_a - 1, n_b - 1
    while (i, j) != (0, 0):
        m = move[i, j]
        if m == 0:
            i, j = i - 1, j - 1
        elif m == 1:
            i -= 1
        else:
            j -= 1
        pairs.append((i, j))
    pairs.reverse()
    return WarpPath(np.asarray(pairs, dtype=np.int64)), float(acc[-1, -1])


def align(converted: FeatureSequence, reference: FeatureSequence) -> WarpPath:
    """DTW path on the MCC rows only, so alignment is content-driven."""
    n_mcc = converted.n_mcc
    if reference.n_mcc != n_mcc:
        raise ShapeError("MCC row counts differ")
    path, _ = dtw(converted.data[:n_mcc], reference.data[:n_mcc])
    return path


def mcd(converted: FeatureSequence, reference: FeatureSequence,
        path: WarpPath | None = None) -> float:
    """Mean mel-cepstral distortion in dB along the DTW path."""
    if path is None:
        path = align(converted, reference)
    n_mcc = converted.n_mcc
    c = converted.data[:n_mcc, path.pairs[:, 0]]
    r = reference.data[:n_mcc, path.pairs[:, 1]]
    per_node = MCD_CONST * np.sqrt(2.0 * ((c - r) ** 2).sum(axis=0))
    return float(per_node.mean())


def lfc(converted: FeatureSequence, reference: FeatureSequence,
        path: WarpPath | None = None) -> float:
    """Pearson correlation of log-F0 over jointly voiced aligned frames."""
    if path is None:
        path = align(converted, reference)
    n_mcc = converted.n_mcc
    ci, ri = path.pairs[:, 0], path.pairs[:, 1]
    both = ((converted.data[-1, ci] >= VOICED_THRESHOLD)
            & (reference.data[-1, ri] >= VOICED_THRESHOLD))
    if both.sum() < 2:
        raise MetricUndefinedError("fewer than 2 jointly voiced aligned frames")
    x = converted.data[n_mcc, ci[both]]
    y = reference.data[n_mcc, ri[both]]
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        raise MetricUndefinedError("constant log-F0 contour")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def ldr_deviation(path: WarpPath, window: int = LDR_WINDOW) -> float:
    """Mean absolute deviation of local duration ratios from 1, in percent.

    The path is split into consecutive windows of aligned steps; the local
    ratio is (converted frames advanced) / (reference frames advanced).
    """
    if len(path) <= window:
        raise MetricUndefinedError(f"path of {len(path)} steps too short for window {window}")
    slopes = []
    for start in range(0, len(path) - window, window):
        a0, b0 = path.pairs[start]
        a1, b1 = path.pairs[start + window]
        if b1 > b0:
            slopes.append((a1 - a0) / (b1 - b0))
    if not slopes:
        raise MetricUndefinedError("no reference progress inside any window")
    return float(np.abs(np.asarray(slopes) - 1.0).mean() * 100.0)


def evaluate_pair(converted: FeatureSequence, reference: FeatureSequence) -> dict[str, float | None]:
    """All three measures for one pair; undefined metrics come back as None."""
    path = align(converted, reference)
    out: dict[str, float | None] = {"mcd_db": mcd(converted, reference, path)}
    try:
        out["lfc"] = lfc(converted, reference, path)
    except MetricUndefinedError:
        out["lfc"] = None
    try:
        out["ldr_pct"] = ldr_deviation(path)
    except MetricUndefinedError:
        out["ldr_pct"] = None
    return out

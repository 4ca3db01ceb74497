"""Straight-line reference implementations used only by the tests."""
import math

import numpy as np


def bilinear_resize(grid, out_h, out_w):
    """Corner-aligned bilinear interpolation with explicit loops."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = i * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = j * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
            bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def minmax(m):
    lo, hi = min(m.flat), max(m.flat)
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def attention_map(raw_scores, out_h, out_w):
    side = int(round(math.sqrt(len(raw_scores))))
    grid = np.asarray(raw_scores, dtype=np.float64).reshape(side, side)
    if max(raw_scores) == min(raw_scores):
        return np.zeros((out_h, out_w))
    return minmax(bilinear_resize(grid, out_h, out_w))


def distance(a, b, metric):
    a = [float(v) for v in np.asarray(a).flat]
    b = [float(v) for v in np.asarray(b).flat]
    if metric == "l2":
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    if metric == "l1":
        return sum(abs(x - y) for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return 1.0
    return 1.0 - sum(x * y for x, y in zip(a, b)) / (na * nb)


def brute_force_accuracy(pooled, text, labels, temperature):
    """Cosine logits and first-maximum argmax, element by element."""
    correct = 0
    for i in range(len(labels)):
        best_k, best = 0, None
        for k in range(len(text)):
            dot = sum(float(pooled[i][c]) * float(text[k][c]) for c in range(len(text[k])))
            na = math.sqrt(sum(float(v) ** 2 for v in pooled[i]))
            nb = math.sqrt(sum(float(v) ** 2 for v in text[k]))
            logit = dot / (na * nb) / temperature
            if best is None or logit > best:
                best_k, best = k, logit
        correct += best_k == int(labels[i])
    return correct / len(labels)

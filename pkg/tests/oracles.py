"""Slow, obviously-correct reference implementations used to check the library.

Nothing here imports from ``mammomil`` except plain value types.
"""

from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


def otsu_variances(image: np.ndarray, bins: int = 256) -> list[float]:
    """Between-class variance w0*w1*(mu0-mu1)^2 for every split k = 1..bins-1, by direct summation."""
    counts = [0] * bins
    for v in np.asarray(image, dtype=np.float64).ravel():
        counts[min(int(v * bins), bins - 1)] += 1
    total = sum(counts)
    centers = [(i + 0.5) / bins for i in range(bins)]
    out = []
    for k in range(1, bins):
        n0 = sum(counts[:k])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            out.append(0.0)
            continue
        mu0 = sum(c * x for c, x in zip(counts[:k], centers[:k])) / n0
        mu1 = sum(c * x for c, x in zip(counts[k:], centers[k:])) / n1
        out.append((n0 / total) * (n1 / total) * (mu0 - mu1) ** 2)
    return out


def otsu_brute(image: np.ndarray, bins: int = 256) -> float:
    var = otsu_variances(image, bins)
    k = max(range(len(var)), key=lambda i: var[i]) + 1
    return k / bins


def flood_fill_components(mask: np.ndarray) -> set[frozenset]:
    """8-connected components as a set of frozensets of (row, col)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = set()
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            comp = []
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                comp.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            queue.append((yy, xx))
            comps.add(frozenset(comp))
    return comps


def _disk_offsets(r: int) -> list[tuple[int, int]]:
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def dilate_brute(mask: np.ndarray, r: int) -> np.ndarray:
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            out[y, x] = any(0 <= y + dy < h and 0 <= x + dx < w and mask[y + dy, x + dx]
                            for dy, dx in _disk_offsets(r))
    return out


def erode_brute(mask: np.ndarray, r: int) -> np.ndarray:
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            out[y, x] = all(0 <= y + dy < h and 0 <= x + dx < w and mask[y + dy, x + dx]
                            for dy, dx in _disk_offsets(r))
    return out


def close_brute(mask: np.ndarray, r: int) -> np.ndarray:
    """Closing with the frame embedded in an infinite background plane."""
    mask = np.asarray(mask, dtype=bool)
    if r == 0:
        return mask.copy()
    h, w = mask.shape
    canvas = np.zeros((h + 4 * r, w + 4 * r), dtype=bool)
    canvas[2 * r:2 * r + h, 2 * r:2 * r + w] = mask
    closed = erode_brute(dilate_brute(canvas, r), r)
    return closed[2 * r:2 * r + h, 2 * r:2 * r + w]


def box_pixels(b) -> set[tuple[int, int]]:
    x0, y0, x1, y1 = b
    return {(x, y) for x in range(x0, x1) for y in range(y0, y1)}


def iou_by_pixels(a, b) -> float:
    pa, pb = box_pixels(a), box_pixels(b)
    return len(pa & pb) / len(pa | pb)


def best_assignment(pred, gt, thresh: float = 0.5) -> tuple[int, float]:
    """(max #pairs, max summed IoU among max-cardinality matchings) over all one-to-one assignments."""
    ious = [[iou_by_pixels(p, g) for g in gt] for p in pred]
    best = (0, 0.0)
    n, m = len(pred), len(gt)
    for k in range(min(n, m), 0, -1):
        found = False
        for ps in itertools.combinations(range(n), k):
            for gs in itertools.permutations(range(m), k):
                if all(ious[p][g] > thresh for p, g in zip(ps, gs)):
                    s = sum(ious[p][g] for p, g in zip(ps, gs))
                    if not found or s > best[1]:
                        best = (k, s)
                    found = True
        if found:
            return best
    return best


def mann_whitney_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def outward_scaled_box(box, src_hw, dst_hw):
    """Scale a box by exact rationals and round mins down, maxes up."""
    from fractions import Fraction

    sy = Fraction(dst_hw[0], src_hw[0])
    sx = Fraction(dst_hw[1], src_hw[1])
    x0, y0, x1, y1 = box
    return (math.floor(x0 * sx), math.floor(y0 * sy), math.ceil(x1 * sx), math.ceil(y1 * sy))


def max_grad_relative_error(loss_fn, params, h: float = 1e-6, floor: float = 1e-6) -> float:
    """Largest |analytic - central difference| / max(|analytic|, |numeric|, floor) over every parameter entry.

    ``loss_fn()`` must be a float64 scalar function of the tensors in ``params``.
    """
    import torch

    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            analytic = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = analytic[i].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst

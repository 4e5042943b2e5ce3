"""Slow, obviously-correct reference implementations.

Each one re-derives a quantity the fast code computes, by brute force and
without sharing code paths with it. Used by the test suite and by the
``selftest`` command.
"""
from __future__ import annotations

import numpy as np

_NEIGH8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def flood_components(binary):
    """8-connected components of a boolean map as a list of pixel sets."""
    binary = np.asarray(binary, dtype=bool)
    rows, cols = binary.shape
    seen = np.zeros_like(binary)
    comps = []
    for r in range(rows):
        for c in range(cols):
            if not binary[r, c] or seen[r, c]:
                continue
            stack = [(r, c)]
            seen[r, c] = True
            comp = set()
            while stack:
                y, x = stack.pop()
                comp.add((y, x))
                for dy, dx in _NEIGH8:
                    v, u = y + dy, x + dx
                    if 0 <= v < rows and 0 <= u < cols and binary[v, u] and not seen[v, u]:
                        seen[v, u] = True
                        stack.append((v, u))
            comps.append(frozenset(comp))
    return comps


def regional_maxima(heat):
    """Plateaus (8-connected sets of equal value) with no higher neighbour and
    at least one lower neighbour. Returns ``[(x, y, value), ...]`` with the
    plateau centroid in pixel-center coordinates."""
    heat = np.asarray(heat, dtype=np.float64)
    rows, cols = heat.shape
    seen = np.zeros(heat.shape, dtype=bool)
    out = []
    for r in range(rows):
        for c in range(cols):
            if seen[r, c]:
                continue
            val = heat[r, c]
            stack = [(r, c)]
            seen[r, c] = True
            plateau = []
            higher = lower = False
            while stack:
                y, x = stack.pop()
                plateau.append((y, x))
                for dy, dx in _NEIGH8:
                    v, u = y + dy, x + dx
                    if not (0 <= v < rows and 0 <= u < cols):
                        continue
                    nv = heat[v, u]
                    if nv == val:
                        if not seen[v, u]:
                            seen[v, u] = True
                            stack.append((v, u))
                    elif nv > val:
                        higher = True
                    else:
                        lower = True
            if lower and not higher:
                ys, xs = zip(*plateau)
                out.append((float(np.mean(xs)) + 0.5, float(np.mean(ys)) + 0.5, float(val)))
    return out


def gated_peaks(heat, ratio=0.8):
    top = float(np.max(heat))
    if top <= 0:
        return []
    return sorted(p for p in regional_maxima(heat) if p[2] >= ratio * top)


def naive_conv(weight, bias, x):
    """Zero-padded same-size cross-correlation with explicit loops."""
    O, C, kh, kw = weight.shape
    _, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                acc = bias[o]
                for c in range(C):
                    for a in range(kh):
                        for b in range(kw):
                            y, z = i + a - ph, j + b - pw
                            if 0 <= y < H and 0 <= z < W:
                                acc += weight[o, c, a, b] * x[c, y, z]
                out[o, i, j] = acc
    return out


def numeric_gradients(loss_fn, params, step=1e-5):
    """Central differences of ``loss_fn()`` for every entry of every array in
    ``params`` (perturbed in place and restored)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + step
            up = loss_fn()
            p[idx] = old - step
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def raster_iou(a, b, res=0.25):
    """IoU by counting sample points on a fine grid covering both boxes."""
    x0 = min(a.cx - a.w / 2, b.cx - b.w / 2)
    y0 = min(a.cy - a.h / 2, b.cy - b.h / 2)
    x1 = max(a.cx + a.w / 2, b.cx + b.w / 2)
    y1 = max(a.cy + a.h / 2, b.cy + b.h / 2)
    xs = np.arange(x0 + res / 2, x1, res)
    ys = np.arange(y0 + res / 2, y1, res)
    X, Y = np.meshgrid(xs, ys)

    def inside(bx):
        return ((X >= bx.cx - bx.w / 2) & (X < bx.cx + bx.w / 2)
                & (Y >= bx.cy - bx.h / 2) & (Y < bx.cy + bx.h / 2))

    ia, ib = inside(a), inside(b)
    union = np.sum(ia | ib)
    return float(np.sum(ia & ib) / union) if union else 0.0


def normal_equation_residual(F, y, lam, w):
    """``max |(F^T F + lam I) w - F^T y|`` computed with plain dense products."""
    F = np.asarray(F, dtype=np.float64)
    A = F.T @ F + lam * np.eye(F.shape[1])
    return float(np.max(np.abs(A @ w - F.T @ y)))


def zeroing_loss_change(predict_fn, stack, target, channel):
    """Loss with ``channel`` zeroed minus the loss with the full stack."""
    base = float(np.sum((predict_fn(stack) - target) ** 2))
    cut = stack.copy()
    cut[channel] = 0.0
    return float(np.sum((predict_fn(cut) - target) ** 2)) - base

"""Quick oracle checks runnable from the command line (``sdtrack selftest``)."""
from __future__ import annotations

import time

import numpy as np
from scipy import ndimage

from . import oracles
from .convnet import HeadNet, SelectorNet, loss_and_grads, predict
from .core import BoundingBox
from .features import score_feature_saliency
from .prior import extract_candidates, learn_prior_weights
from .tracker import find_peaks
from .update import temporal_weight


def check_ridge(rng, n=5):
    worst = 0.0
    for i in range(n):
        stack = rng.random((19, 60, 60))
        lam = (0.01, 1.0, 100.0)[i % 3]
        box = BoundingBox(rng.uniform(15, 45), rng.uniform(15, 45), rng.uniform(5, 20), rng.uniform(5, 20))
        w = learn_prior_weights(stack, box, lam).w
        F = stack.transpose(0, 2, 1).reshape(19, -1).T
        from .prior import box_mask

        y = box_mask(box, (60, 60)).T.reshape(-1).astype(float)
        worst = max(worst, oracles.normal_equation_residual(F, y, lam, w))
    return worst < 1e-8, f"max normal-equation residual {worst:.2e}"


def check_gradients(rng):
    worst = 0.0
    head = HeadNet.create(2, hidden=3, seed=int(rng.integers(1 << 30)), std=0.3, k1=3, k2=3)
    sel = SelectorNet.create(3, seed=int(rng.integers(1 << 30)), std=0.3)
    for net, c in ((head, 2), (sel, 3)):
        x = rng.normal(size=(c, 6, 6))
        t = rng.normal(size=(6, 6))
        _, grads = loss_and_grads(net, x, t)
        num = oracles.numeric_gradients(lambda: loss_and_grads(net, x, t)[0], net.parameters())
        for g, n in zip(grads, num):
            rel = np.max(np.abs(g - n) / np.maximum(np.abs(g) + np.abs(n), 1e-8))
            worst = max(worst, float(rel))
    return worst < 1e-4, f"max relative gradient error {worst:.2e}"


def check_temporal_weight():
    ok = all(abs(temporal_weight(1, t, th) - 1) < 1e-9 and abs(temporal_weight(t, t, th) - 1) < 1e-9
             for t in (3, 10, 100, 1000) for th in (0.3, 0.7))
    vertex = temporal_weight(5.5, 10, 0.7)
    ok = ok and abs(vertex - 0.69625) < 1e-9
    low = min(temporal_weight(T, 1000, 0.7) for T in np.linspace(1, 1000, 2001))
    ok = ok and abs(low - 0.7) < 0.01
    return ok, f"W(5.5; t=10) = {vertex:.9f}, min at t=1000 = {low:.5f}"


def check_peaks(rng, n=20):
    bad = 0
    for _ in range(n):
        m = ndimage.gaussian_filter(rng.random((24, 24)), 2.0)
        m = np.round(m, 3)  # create some plateaus
        got = sorted((p.x, p.y, p.value) for p in find_peaks(m, 0.8, with_regions=False))
        bad += got != oracles.gated_peaks(m, 0.8)
    return bad == 0, f"{n - bad}/{n} maps match the regional-maxima oracle"


def check_candidates(rng, n=20):
    bad = 0
    box = BoundingBox(10, 10, 6, 6)
    for _ in range(n):
        b = ndimage.gaussian_filter(rng.random((40, 40)), 1.5) > 0.52
        sigma_s = int(rng.integers(1, 30))
        got = {frozenset(map(tuple, c.pixels)) for c in extract_candidates(b, box, sigma_s)}
        want = {c for c in oracles.flood_components(b) if len(c) >= sigma_s}
        bad += got != want
    return bad == 0, f"{n - bad}/{n} binary maps match the flood-fill oracle"


def check_taylor(rng, n=5):
    worst = 0.0
    for _ in range(n):
        sel = SelectorNet.create(5, seed=int(rng.integers(1 << 30)), std=0.5)
        sel.trained = True
        stack = rng.normal(size=(5, 8, 8))
        t = rng.normal(size=(8, 8))
        sc = score_feature_saliency(sel, stack, t)
        for i in range(5):
            exact = oracles.zeroing_loss_change(lambda s: predict(sel, s), stack, t, i)
            worst = max(worst, abs(sc[i] - exact))
    return worst < 1e-6, f"max |score - exact loss change| {worst:.2e}"


def run_selftest(seed=0, out=print):
    rng = np.random.default_rng(seed)
    checks = [
        ("ridge normal equations", lambda: check_ridge(rng)),
        ("gradient check", lambda: check_gradients(rng)),
        ("temporal weight", check_temporal_weight),
        ("peaks vs oracle", lambda: check_peaks(rng)),
        ("candidates vs oracle", lambda: check_candidates(rng)),
        ("channel score exactness", lambda: check_taylor(rng)),
    ]
    all_ok = True
    for name, fn in checks:
        t0 = time.perf_counter()
        ok, detail = fn()
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name:<26} {detail}  ({time.perf_counter() - t0:.2f}s)")
    return all_ok

"""Prioritised online update of the holistic head.

Confidently tracked frames enter a small positive-sample pool. Every few
frames one entry is drawn with probability proportional to a temporal weight
(favoring early and recent frames) times its relative confidence; the head
is fine-tuned only when that sample is far more confident than the current
frame and the current holistic map is ambiguous.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .convnet import HeadNet, predict, sgd_step

log = logging.getLogger(__name__)


@dataclass
class PoolEntry:
    frame: int
    features: np.ndarray  # masked, normalized coarse stack fed to the head
    target: np.ndarray  # Gaussian map built from the estimated box
    foreground: np.ndarray  # bool mask of the estimated box on the heat grid
    confidence: float

    def __post_init__(self):
        if not self.confidence > 0:
            raise ValueError("pool entries need a positive confidence")


class PositiveSamplePool:
    def __init__(self, capacity=10, insert_ratio=0.85):
        self.capacity = int(capacity)
        self.insert_ratio = float(insert_ratio)
        self.entries: list[PoolEntry] = []

    def __len__(self):
        return len(self.entries)

    def confidences(self):
        return np.array([e.confidence for e in self.entries])

    def try_insert(self, entry: PoolEntry) -> bool:
        """Insert while not full; afterwards replace the least confident entry
        when the newcomer beats it or comes within ``insert_ratio`` of the best."""
        if any(e.frame == entry.frame for e in self.entries):
            raise ValueError(f"frame {entry.frame} is already pooled")
        if len(self.entries) < self.capacity:
            self.entries.append(entry)
            return True
        conf = self.confidences()
        c = entry.confidence
        if c > conf.min() or c / conf.max() > self.insert_ratio:
            self.entries[int(np.argmin(conf))] = entry
            return True
        return False


def temporal_weight(frame_added, t, theta=0.7):
    """Quadratic weight over the sequence: 1 at the first and current frame,
    dipping to about ``theta`` midway. Frames ``t <= 2`` get weight 1."""
    if t <= 2:
        return 1.0
    T = frame_added
    if not 1 <= T <= t:
        raise ValueError(f"frame index {T} outside [1, {t}]")
    d = t * (t - 2)
    a = 4.0 * (1.0 - theta) / d
    b = 4.0 * (t + 1) * (theta - 1.0) / d
    c = (t - 4.0 * theta + 2.0) / (t - 2)
    return a * T * T + b * T + c


def selection_distribution(pool, t, theta=0.7):
    entries = pool.entries if isinstance(pool, PositiveSamplePool) else pool
    if not entries:
        raise ValueError("cannot sample from an empty pool")
    conf = np.array([e.confidence for e in entries])
    w = np.array([temporal_weight(e.frame, t, theta) for e in entries])
    index = np.maximum(w * conf / conf.max(), 0.0)
    total = index.sum()
    if total <= 0:
        return np.full(len(entries), 1.0 / len(entries))
    return index / total


@dataclass
class UpdateDecision:
    fire: bool
    checkpoint: bool
    index: int | None = None
    probability: float | None = None
    sampled_confidence: float | None = None
    current_confidence: float | None = None
    peak_count: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def check_update_conditions(pool, current_conf, peak_count, frame_idx, rng, theta=0.7,
                            period=10, conf_ratio=2.0):
    """Checkpoint every ``period`` frames: draw a pool entry and fire when it
    is more than ``conf_ratio`` times as confident as the current frame and
    the holistic map shows at least two peaks."""
    if frame_idx % period != 0 or len(pool) == 0:
        return UpdateDecision(False, frame_idx % period == 0, current_confidence=current_conf,
                              peak_count=peak_count)
    p = selection_distribution(pool, frame_idx, theta)
    n = int(rng.choice(len(p), p=p))
    sampled = pool.entries[n].confidence
    fire = sampled > conf_ratio * current_conf and peak_count >= 2
    return UpdateDecision(fire, True, n, float(p[n]), sampled, current_conf, peak_count)


def truncation_threshold(eps, k, mu, phi):
    return eps / (k + mu * phi)


def truncated_error(e, eps, k=20.0, mu=30.0, phi=0.0):
    """|e| where it exceeds ``eps / (k + mu * phi)``, zero elsewhere."""
    e = np.abs(e)
    return e * (e > truncation_threshold(eps, k, mu, phi))


@dataclass
class FinetuneResult:
    pre_loss: float
    post_loss: float
    positive_pre: float
    positive_post: float
    reverted: bool = False
    losses: list = field(default_factory=list)


def _objective(net, samples, thresholds, beta_w):
    """Truncated weighted loss plus weight decay, with gradients."""
    total = beta_w * net.weight_norm_sq()
    grads = None
    parts = []
    for (x, target, region), thr in zip(samples, thresholds):
        cache = {}
        r = net.forward(x, cache) - target
        w = region * (np.abs(r) > thr)
        loss = float(np.sum(w * r * r))
        parts.append(loss)
        g = net.backward(2.0 * w * r, cache)
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
        total += loss
    return total, grads, parts


def finetune_hnet(hnet: HeadNet, positive: PoolEntry, current: PoolEntry, iterations=20,
                  lr=1e-3, beta_w=1e-3, k=20.0, mu=30.0, eps=None):
    """Fine-tune in place on the positive sample's foreground and the current
    frame's background. Reverts the weights if the objective does not drop.

    ``eps`` defaults to the largest absolute residual over both maps before
    the first step; the truncation map uses the target heat as ``phi``.
    """
    samples = [
        (positive.features, positive.target, positive.foreground.astype(np.float64)),
        (current.features, current.target, 1.0 - current.foreground.astype(np.float64)),
    ]
    if eps is None:
        eps = max(float(np.max(np.abs(predict(hnet, x) - t))) for x, t, _ in samples)
    thresholds = [truncation_threshold(eps, k, mu, t) for _, t, _ in samples]
    backup = [(l.weight.copy(), l.bias.copy()) for l in hnet.layers]

    pre, _, pre_parts = _objective(hnet, samples, thresholds, beta_w)
    losses = []
    ok = np.isfinite(pre)
    # divergence is caught below and undone, so overflow here is not an error
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(iterations):
            loss, grads, _ = _objective(hnet, samples, thresholds, beta_w)
            if not np.isfinite(loss):
                ok = False
                break
            losses.append(loss)
            sgd_step(hnet, grads, lr, beta_w)
        post, _, post_parts = _objective(hnet, samples, thresholds, beta_w)
    if not ok or not np.isfinite(post) or post > pre:
        for layer, (w, b) in zip(hnet.layers, backup):
            layer.weight[...] = w
            layer.bias[...] = b
        log.warning("hnet fine-tune diverged (%.4g -> %.4g); weights reverted", pre, post)
        return FinetuneResult(pre, post, pre_parts[0], post_parts[0], True, losses)
    return FinetuneResult(pre, post, pre_parts[0], post_parts[0], False, losses)

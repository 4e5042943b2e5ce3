"""Mixed holistic/part heat-map tracker.

One holistic head regresses a Gaussian over the whole target from the coarse
stack; four part heads regress Gaussians over the box quadrants from the fine
stack. When the holistic map is ambiguous the part peaks vote for the
holistic peak closest to them. A particle filter then reads the (rectified)
map to place the box.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import local_maxima
from skimage.segmentation import watershed

from .convnet import (ConvLayer, HeadNet, SelectorNet, TrainSpec, conv_backward, conv_forward,
                      im2col, predict, train)
from .core import BoundingBox, TrackerConfig, crop_resized, gaussian_map, is_color, write_image
from .features import SelectionMask, StandInProvider, score_feature_saliency, select_top_features
from .prior import PriorModel, box_mask, dump_prior_debug
from .update import PoolEntry, PositiveSamplePool, check_update_conditions, finetune_hnet

log = logging.getLogger(__name__)

PART_NAMES = ("TL", "TR", "BL", "BR")
MIN_BOX_SIDE = 8.0

# ablation -> (use_prior, use_rectify, positive-sample source for updates)
ABLATIONS = {
    "full": (True, True, "pool"),
    "no_update": (True, True, None),
    "update_first_frame_only": (True, True, "first"),
    "update_current_frame": (True, True, "current"),
    "no_prior": (False, True, "pool"),
    "no_rectify": (True, False, "pool"),
}


@dataclass(frozen=True)
class Roi:
    """Square search window in frame coordinates and its heat-map raster."""
    cx: float
    cy: float
    side: float
    size: int = 46

    @property
    def cell(self):
        return self.side / self.size

    def to_heat(self, x, y):
        return (x - self.cx) / self.cell + self.size / 2.0, (y - self.cy) / self.cell + self.size / 2.0

    def to_frame(self, u, v):
        return (u - self.size / 2.0) * self.cell + self.cx, (v - self.size / 2.0) * self.cell + self.cy

    def box_to_heat(self, box: BoundingBox):
        u, v = self.to_heat(box.cx, box.cy)
        return BoundingBox(u, v, box.w / self.cell, box.h / self.cell, box.scale)

    def crop(self, frame, pixels):
        return crop_resized(frame, (self.cx, self.cy), (self.side, self.side), (pixels, pixels))


def make_roi(center, box: BoundingBox, frame_shape, cfg: TrackerConfig):
    H, W = frame_shape[:2]
    cx = min(max(float(center[0]), 0.0), float(W))
    cy = min(max(float(center[1]), 0.0), float(H))
    return Roi(cx, cy, cfg.roi_scale * max(box.w, box.h), cfg.heat_size)


@dataclass
class FeatureNormalizer:
    """Per-channel mean removal and one global scale, fitted on the first ROI
    and then frozen so heat maps stay comparable across frames."""
    mean: np.ndarray
    scale: float

    @classmethod
    def fit(cls, stack):
        mean = stack.mean(axis=(1, 2))
        rms = float(np.sqrt(np.mean((stack - mean[:, None, None]) ** 2)))
        return cls(mean, rms if rms > 1e-12 else 1.0)

    def __call__(self, stack):
        return (stack - self.mean[:, None, None]) / self.scale


@dataclass
class HeadEnsemble:
    hnet: HeadNet
    pnets: list
    masks: list  # masks[0] feeds hnet (coarse), masks[1:] feed the pnets (fine)
    norm_fine: FeatureNormalizer
    norm_coarse: FeatureNormalizer

    def hnet_input(self, coarse):
        return self.masks[0].apply(self.norm_coarse(coarse))

    def part_inputs(self, fine):
        f = self.norm_fine(fine)
        return [m.apply(f) for m in self.masks[1:]]

    def forward(self, fine, coarse):
        mh = predict(self.hnet, self.hnet_input(coarse))
        parts = []
        shared = {}
        k = self.pnets[0].layers[0].weight.shape[2] if self.pnets else 9
        for net, x, m in zip(self.pnets, self.part_inputs(fine), self.masks[1:]):
            key = m.indices.tobytes()
            if key not in shared:  # heads with the same mask reuse one im2col
                shared[key] = im2col(x, k, k)
            parts.append(net.forward(x, {"cols": shared[key]}))
        return mh, parts


def part_boxes(box: BoundingBox):
    """The four equal quadrants of ``box`` ordered TL, TR, BL, BR."""
    w, h = box.w / 2.0, box.h / 2.0
    out = []
    for dy in (-0.25, 0.25):
        for dx in (-0.25, 0.25):
            out.append(BoundingBox(box.cx + dx * box.w, box.cy + dy * box.h, w, h))
    return out


def fit_head(net, x, target, spec: TrainSpec, max_backoff=3, backoff=3.0):
    """Train a copy of ``net``; if the loss blows up or ends above where it
    started, retry from the same start with the learning rate divided by
    ``backoff``."""
    for _ in range(max_backoff + 1):
        trial = net.copy()
        try:
            trial, losses = train(trial, x, target, spec)
            final = float(np.sum((predict(trial, x) - target) ** 2))
            if np.isfinite(final) and (not losses or final <= losses[0]):
                if isinstance(trial, SelectorNet) and spec.iterations > 0:
                    trial.trained = True
                return trial, losses
        except FloatingPointError:
            pass
        log.info("training diverged at lr %.3g, backing off", spec.lr)
        spec = TrainSpec(spec.iterations, spec.lr / backoff, spec.weight_decay)
    raise FloatingPointError(f"head training diverged down to lr {spec.lr * backoff:.3g}")


def _sq_loss(net, x, target):
    return float(np.sum((predict(net, x) - target) ** 2))


def fit_heads_shared(nets, x, targets, spec: TrainSpec):
    """Train several heads that read the same input as one wide network.

    First layers are stacked and second layers placed block-diagonally, so
    each head gets exactly its own gradient while the big im2col matrix is
    streamed once per step instead of once per head. A head whose loss does
    not drop is retrained alone through ``fit_head``.
    """
    hid = [n.layers[0].out_channels for n in nets]
    starts = np.cumsum([0] + hid)
    w1 = np.concatenate([n.layers[0].weight for n in nets])
    b1 = np.concatenate([n.layers[0].bias for n in nets])
    k2 = nets[0].layers[1].weight.shape[2]
    w2 = np.zeros((len(nets), starts[-1], k2, k2))
    block = np.zeros_like(w2)
    for i, n in enumerate(nets):
        w2[i, starts[i]:starts[i + 1]] = n.layers[1].weight[0]
        block[i, starts[i]:starts[i + 1]] = 1.0
    b2 = np.concatenate([n.layers[1].bias for n in nets])
    l1 = ConvLayer(w1, b1, "relu")
    l2 = ConvLayer(w2, b2, "identity")
    targets = np.stack(targets)
    first = None
    cols = None
    ok = True
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(spec.iterations):
            z1, cols = conv_forward(l1, x, cols)
            a1 = np.maximum(z1, 0.0)
            z2, a1cols = conv_forward(l2, a1)
            r = z2 - targets
            if first is None:
                first = np.sum(r * r, axis=(1, 2))
            if not np.all(np.isfinite(r)):
                ok = False
                break
            dk2, db2, da1 = conv_backward(l2, 2.0 * r, a1cols)
            dk1, db1, _ = conv_backward(l1, da1 * (z1 > 0), cols, need_input_grad=False)
            l1.weight -= spec.lr * dk1
            l1.bias -= spec.lr * db1
            l2.weight -= spec.lr * dk2 * block
            l2.bias -= spec.lr * db2
    out = []
    for i, n in enumerate(nets):
        s = slice(starts[i], starts[i + 1])
        trained = HeadNet(ConvLayer(l1.weight[s].copy(), l1.bias[s].copy(), "relu"),
                          ConvLayer(l2.weight[i:i + 1, s].copy(), l2.bias[i:i + 1].copy(), "identity"),
                          seed=n.seed)
        if ok and spec.iterations > 0:
            final = _sq_loss(trained, x, targets[i])
            if np.isfinite(final) and final <= first[i]:
                out.append(trained)
                continue
        if spec.iterations == 0:
            out.append(n.copy())
            continue
        out.append(fit_head(n, x, targets[i], spec)[0])
    return out


def _select_channels(stack, target, cfg: TrackerConfig, seed):
    sel = SelectorNet.create(stack.shape[0], cfg.dropout_ratio, seed=seed, std=cfg.init_std)
    sel, _ = fit_head(sel, stack, target, TrainSpec(cfg.selector_iters, cfg.selector_lr))
    mask = select_top_features(score_feature_saliency(sel, stack, target), cfg.n_select)
    # heads read the kept channels in index order so equal subsets share inputs
    return SelectionMask(np.sort(mask.indices), mask.scores)


def init_ensemble(fine, coarse, gt_box: BoundingBox, cfg: TrackerConfig, seed=None):
    """Train the five heads on the first ROI. ``gt_box`` is in heat-map
    coordinates. Selector nets only serve to pick channels and are dropped."""
    seed = cfg.seed if seed is None else seed
    n = cfg.heat_size
    norm_f = FeatureNormalizer.fit(fine)
    norm_c = FeatureNormalizer.fit(coarse)
    xf, xc = norm_f(fine), norm_c(coarse)
    m_ht = gaussian_map(gt_box, (n, n), cfg.gaussian_std_factor)
    m_pt = [gaussian_map(b, (n, n), cfg.gaussian_std_factor) for b in part_boxes(gt_box)]

    masks = [_select_channels(xc, m_ht, cfg, seed * 100 + 50)]
    masks += [_select_channels(xf, t, cfg, seed * 100 + 51 + i) for i, t in enumerate(m_pt)]

    spec = TrainSpec(cfg.head_iters, cfg.head_lr)
    x0 = masks[0].apply(xc)
    hnet = HeadNet.create(len(masks[0]), cfg.head_hidden, seed * 100, cfg.init_std)
    hnet, _ = fit_head(hnet, x0, m_ht, spec)
    pnets = [HeadNet.create(len(masks[i + 1]), cfg.head_hidden, seed * 100 + 1 + i, cfg.init_std)
             for i in range(4)]
    # part heads with identical masks see the same input and train together
    groups = {}
    for i in range(4):
        groups.setdefault(masks[i + 1].indices.tobytes(), []).append(i)
    for members in groups.values():
        x = masks[members[0] + 1].apply(xf)
        trained = fit_heads_shared([pnets[i] for i in members], x, [m_pt[i] for i in members], spec)
        for i, net in zip(members, trained):
            pnets[i] = net
    return HeadEnsemble(hnet, pnets, masks, norm_f, norm_c)


@dataclass
class Peak:
    x: float
    y: float
    value: float
    region: np.ndarray | None = None  # bool mask of the peak's watershed basin

    @property
    def location(self):
        return (self.x, self.y)


def regional_maxima(heat):
    """Labelled plateaus that have no higher 8-neighbour and at least one
    lower one. Returns ``(labels, count)``."""
    mask = local_maxima(heat, connectivity=2, allow_borders=True)
    return ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))


def _gated_plateaus(heat, ratio):
    """Plateau labels plus the indices of the regional maxima reaching
    ``ratio`` times the global max, highest first."""
    top = heat.max()
    if top <= 0:
        return None, [], None, None
    labels, n = regional_maxima(heat)
    if n == 0:
        return labels, [], None, None
    idx = np.arange(1, n + 1)
    values = ndimage.maximum(heat, labels, idx)
    cents = ndimage.center_of_mass(np.ones_like(heat), labels, idx)
    keep = [i for i in range(n) if values[i] >= ratio * top]
    keep.sort(key=lambda i: (-values[i], cents[i][0], cents[i][1]))
    return labels, keep, values, cents


def _check_heat(heat):
    heat = np.asarray(heat, dtype=np.float64)
    if not np.all(np.isfinite(heat)):
        raise ValueError("heat map has non-finite values")
    return heat


def find_peaks(heat, ratio=0.8, with_regions=True):
    """Regional maxima whose value reaches ``ratio`` times the global max.

    A flat maximal plateau gives one peak at its centroid (pixel centers at
    +0.5). Peaks come sorted by value, highest first, then by position. Each
    keeps the watershed basin grown from the surviving peaks.
    """
    heat = _check_heat(heat)
    labels, keep, values, cents = _gated_plateaus(heat, ratio)
    peaks = [Peak(cents[i][1] + 0.5, cents[i][0] + 0.5, float(values[i])) for i in keep]
    if with_regions and peaks:
        markers = np.zeros(heat.shape, dtype=np.int32)
        for j, i in enumerate(keep):
            markers[labels == i + 1] = j + 1
        basins = watershed(-heat, markers, connectivity=2)
        for j, p in enumerate(peaks):
            p.region = basins == j + 1
    return peaks


def peak_areas(heat, ratio=0.8):
    """One peak per connected area of ``heat >= ratio * max``.

    Ripples on a single bump give several regional maxima but one area; each
    area is represented by its highest maximum and owns the watershed basin
    grown from the whole area.
    """
    heat = _check_heat(heat)
    labels, keep, values, cents = _gated_plateaus(heat, ratio)
    if not keep:
        return []
    areas, _ = ndimage.label(heat >= ratio * heat.max(), structure=np.ones((3, 3), dtype=bool))
    peaks = []
    markers = np.zeros(heat.shape, dtype=np.int32)
    for i in keep:
        a = int(areas[labels == i + 1][0])
        if markers[areas == a].any():
            continue
        peaks.append(Peak(cents[i][1] + 0.5, cents[i][0] + 0.5, float(values[i])))
        markers[areas == a] = len(peaks)
    basins = watershed(-heat, markers, connectivity=2)
    for j, p in enumerate(peaks):
        p.region = basins == j + 1
    return peaks


def part_votes(parts, ratio=0.8):
    """Peak locations of the part maps that show exactly one peak area."""
    votes = []
    for m in parts:
        pk = peak_areas(m, ratio)
        if len(pk) == 1:
            votes.append(pk[0].location)
    return votes


@dataclass
class Rectification:
    heat: np.ndarray
    n_holistic: int
    n_parts: int
    chosen: int | None = None
    distances: list = field(default_factory=list)


def rectify(mh, parts, ratio=0.8, min_peaks=2):
    """Keep only the holistic peak area nearest (on average) to the
    single-peak part maps' peaks. Without enough holistic peak areas the map
    is returned as is; without any part vote the highest peak wins."""
    peaks = peak_areas(mh, ratio)
    if len(peaks) < min_peaks:
        return Rectification(mh, len(peaks), 0)
    votes = part_votes(parts, ratio)
    if votes:
        v = np.asarray(votes)
        dist = [float(np.mean(np.hypot(v[:, 0] - p.x, v[:, 1] - p.y))) for p in peaks]
        chosen = int(np.argmin(dist))
    else:
        dist, chosen = [], 0
    out = np.where(peaks[chosen].region, mh, 0.0)
    return Rectification(out, len(peaks), len(votes), chosen, dist)


def rectify_holistic(mh, parts, ratio=0.8, min_peaks=2):
    return rectify(mh, parts, ratio, min_peaks).heat


@dataclass
class TargetEstimate:
    box: BoundingBox
    confidence: float
    frozen: bool = False


@dataclass
class ParticleSet:
    centers: np.ndarray  # (n, 2) frame coordinates
    scales: np.ndarray
    values: np.ndarray  # mean heat inside each box
    confidences: np.ndarray
    winner: int


def box_mean_heat(heat, x0, y0, x1, y1, raster=16):
    """Mean heat of each box ``[x0, x1) x [y0, y1)`` (heat-map coordinates),
    warped onto a ``raster x raster`` grid by bilinear sampling. Samples that
    fall outside the map read zero."""
    x0, y0, x1, y1 = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x0, y0, x1, y1)))
    shape = x0.shape
    x0, y0, x1, y1 = (a.ravel() for a in (x0, y0, x1, y1))
    t = (np.arange(raster) + 0.5) / raster
    xs = x0[:, None] + (x1 - x0)[:, None] * t
    ys = y0[:, None] + (y1 - y0)[:, None] * t
    n = len(x0)
    X = np.broadcast_to(xs[:, None, :], (n, raster, raster))
    Y = np.broadcast_to(ys[:, :, None], (n, raster, raster))
    # pixel centers sit at +0.5
    s = ndimage.map_coordinates(np.asarray(heat, dtype=np.float64), [Y.ravel() - 0.5, X.ravel() - 0.5],
                                order=1, mode="grid-constant", cval=0.0)
    return s.reshape(n, -1).mean(axis=1).reshape(shape)


def localize(heat, prev: TargetEstimate, roi: Roi, cfg: TrackerConfig, rng, base_size,
             first_conf=None, history=()):
    """Particle-filter readout of a heat map.

    Particles are drawn around the ROI center with the previous scale jittered
    multiplicatively; each is scored ``C = v * scale**gamma`` with ``v`` the
    mean (non-negative) heat inside its box. The winner's scale is then reset
    from its confidence relative to the first frame. Very low confidence
    returns the previous box flagged frozen.

    Returns ``(estimate, particles)``.
    """
    w1, h1 = base_size
    n = cfg.n_particles
    sd = cfg.particle_std_factor
    pw, ph = prev.box.w, prev.box.h
    centers = np.column_stack([
        roi.cx + rng.normal(0.0, sd * pw, n),
        roi.cy + rng.normal(0.0, sd * ph, n),
    ])
    scales = prev.box.scale * np.exp(rng.normal(0.0, cfg.scale_jitter, n))
    u, v = roi.to_heat(centers[:, 0], centers[:, 1])
    hw = 0.5 * w1 * scales / roi.cell
    hh = 0.5 * h1 * scales / roi.cell
    vals = box_mean_heat(np.maximum(heat, 0.0), u - hw, v - hh, u + hw, v + hh)
    conf = vals * scales ** cfg.gamma
    k = int(np.argmax(conf))
    parts = ParticleSet(centers, scales, vals, conf, k)
    c_star = float(conf[k])

    if first_conf is None:
        sigma = float(scales[k])
    elif c_star > 0:
        sigma = float(np.clip((c_star / first_conf) ** cfg.lambda_sigma,
                              cfg.scale_min, cfg.scale_max))
    else:
        sigma = prev.box.scale
    recent = list(history)[-cfg.freeze_window:]
    frozen = c_star <= 0 or (bool(recent) and c_star < cfg.freeze_ratio * float(np.median(recent)))
    if frozen:
        return TargetEstimate(prev.box, c_star, True), parts
    box = BoundingBox(float(centers[k, 0]), float(centers[k, 1]), w1 * sigma, h1 * sigma, sigma)
    return TargetEstimate(box, c_star, False), parts


@dataclass
class FrameResult:
    frame: int
    estimate: TargetEstimate
    used_prior: bool = False
    n_holistic: int = 0
    n_parts: int = 0
    update_fired: bool = False
    update: dict | None = None
    error: str | None = None

    def record(self):
        b = self.estimate.box
        rec = {
            "frame": self.frame,
            "box": [b.cx, b.cy, b.w, b.h],
            "scale": b.scale,
            "confidence": self.estimate.confidence,
            "used_prior": self.used_prior,
            "n_h": self.n_holistic,
            "n_p": self.n_parts,
            "frozen": self.estimate.frozen,
            "update_fired": self.update_fired,
        }
        if self.update is not None:
            rec["update"] = self.update
        if self.error is not None:
            rec["error"] = self.error
        return rec


class Tracker:
    """One sequence's tracking state. Call ``initialize`` on the first frame,
    then ``track_frame`` on each following frame."""

    def __init__(self, cfg: TrackerConfig | None = None, provider=None, ablation="full",
                 dump_dir=None):
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}; expected one of {sorted(ABLATIONS)}")
        self.cfg = cfg or TrackerConfig()
        self.provider = provider or StandInProvider(2 * self.cfg.heat_size, self.cfg.heat_size)
        self.ablation = ablation
        self.use_prior, self.use_rectify, self.update_source = ABLATIONS[ablation]
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.rng = np.random.default_rng(self.cfg.seed)
        self.frame_idx = 0
        self.ensemble = None
        self.prior = None
        self.pool = PositiveSamplePool(self.cfg.pool_capacity, self.cfg.insert_ratio)
        self.history = []

    def _roi_pixels(self):
        return getattr(self.provider, "input_size", 2 * self.cfg.heat_size)

    def _features(self, frame, roi):
        return self.provider.provide(roi.crop(frame, self._roi_pixels()), self.frame_idx)

    def _entry(self, coarse, roi, est):
        n = self.cfg.heat_size
        hb = roi.box_to_heat(est.box)
        if not (0 <= hb.cx <= n and 0 <= hb.cy <= n):
            return None
        return PoolEntry(self.frame_idx, self.ensemble.hnet_input(coarse),
                         gaussian_map(hb, (n, n), self.cfg.gaussian_std_factor),
                         box_mask(hb, (n, n)), est.confidence)

    def initialize(self, frame, box: BoundingBox):
        cfg = self.cfg
        frame = np.asarray(frame, dtype=np.float64)
        if box.w < MIN_BOX_SIDE or box.h < MIN_BOX_SIDE:
            raise ValueError(f"initial box {box.w:.1f}x{box.h:.1f} is too small (min {MIN_BOX_SIDE} px)")
        self.frame_idx = 1
        self.base_size = (box.w, box.h)
        box = BoundingBox(box.cx, box.cy, box.w, box.h, 1.0)
        if self.use_prior and is_color(frame):
            self.prior = PriorModel.fit(frame, box, cfg)
        roi = make_roi(box.center, box, frame.shape, cfg)
        fine, coarse = self._features(frame, roi)
        self.ensemble = init_ensemble(fine, coarse, roi.box_to_heat(box), cfg)
        mh, parts = self.ensemble.forward(fine, coarse)
        heat = rectify(mh, parts, cfg.peak_ratio, cfg.rectify_min_peaks).heat if self.use_rectify else mh
        est0 = TargetEstimate(box, 1.0)
        probe, _ = localize(heat, est0, roi, cfg, np.random.default_rng(cfg.seed), self.base_size)
        self.first_conf = probe.confidence if probe.confidence > 0 else 1.0
        self.estimate = TargetEstimate(box, self.first_conf)
        self.history = [self.first_conf]
        self.first_entry = self._entry(coarse, roi, self.estimate)
        if self.first_entry is not None:
            self.pool.try_insert(self.first_entry)
        return self.estimate

    def track_frame(self, frame) -> FrameResult:
        if self.ensemble is None:
            raise RuntimeError("tracker is not initialized")
        self.frame_idx += 1
        res = FrameResult(self.frame_idx, self.estimate)
        try:
            self._track(np.asarray(frame, dtype=np.float64), res)
        except Exception as exc:  # keep the sequence running on a frozen box
            log.warning("frame %d: %s: %s", self.frame_idx, type(exc).__name__, exc)
            res.estimate = TargetEstimate(self.estimate.box, 0.0, True)
            res.error = f"{type(exc).__name__}: {exc}"
        self.estimate = res.estimate
        if not res.estimate.frozen:
            self.history.append(res.estimate.confidence)
            self.history = self.history[-self.cfg.freeze_window:]
        return res

    def _track(self, frame, res):
        cfg = self.cfg
        prev = self.estimate
        center = prev.box.center
        if self.prior is not None and is_color(frame):
            decision, smap, cands = self.prior.analyse(frame, prev.box)
            res.used_prior = decision.used_prior
            center = decision.center
            if self.dump_dir is not None:
                dump_prior_debug(self.dump_dir, self.frame_idx, smap, cands, decision)
        roi = make_roi(center, prev.box, frame.shape, cfg)
        fine, coarse = self._features(frame, roi)
        mh, parts = self.ensemble.forward(fine, coarse)
        rect = rectify(mh, parts, cfg.peak_ratio, cfg.rectify_min_peaks)
        res.n_holistic, res.n_parts = rect.n_holistic, rect.n_parts
        heat = rect.heat if self.use_rectify else mh
        if self.dump_dir is not None:
            self._dump_maps(mh, heat, parts)
        est, _ = localize(heat, prev, roi, cfg, self.rng, self.base_size, self.first_conf,
                          self.history)
        res.estimate = est
        if est.frozen:
            return
        entry = self._entry(coarse, roi, est)
        if entry is None:
            return
        decision = check_update_conditions(self.pool, est.confidence, rect.n_holistic,
                                           self.frame_idx, self.rng, cfg.theta,
                                           cfg.update_period, cfg.update_conf_ratio)
        if decision.fire and self.update_source is not None:
            if self.update_source == "pool":
                positive = self.pool.entries[decision.index]
            elif self.update_source == "first":
                positive = self.first_entry
            else:
                positive = entry
            out = finetune_hnet(self.ensemble.hnet, positive, entry, cfg.update_iters,
                                cfg.update_lr, cfg.beta_w, cfg.trunc_k, cfg.trunc_mu)
            res.update_fired = not out.reverted
            res.update = {
                "positive_frame": positive.frame,
                "probability": decision.probability,
                "pre_loss": out.pre_loss,
                "post_loss": out.post_loss,
                "reverted": out.reverted,
            }
        self.pool.try_insert(entry)

    def _dump_maps(self, mh, rect, parts):
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        stem = self.dump_dir / f"heat_{self.frame_idx:04d}"
        write_image(f"{stem}_holistic.png", mh)
        write_image(f"{stem}_rectified.png", rect)
        for name, m in zip(PART_NAMES, parts):
            write_image(f"{stem}_{name}.png", m)

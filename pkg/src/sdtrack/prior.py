"""Shallow-cue prior map used to relocate the search window.

Frames are warped to a fixed square grid (200x200 by default) where 19
low-level channels are computed. Ridge-regression weights learnt on the
first frame combine them into a top-down saliency map, which is penalized
by distance to the previous target center, binarized, and split into
connected regions. Each region proposes a candidate patch; the one closest
to the first-frame template wins if it is confident enough.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, ndimage

from .core import BoundingBox, crop_resized, is_color, resize_bilinear, write_image

N_SCALES = 3
N_ORIENTATIONS = 4
N_SHALLOW = 19
CHANNEL_NAMES = tuple(
    [f"SP{i + 1}" for i in range(N_SCALES * N_ORIENTATIONS + 1)]
    + ["R", "G", "B", "Y", "I", "SK"]
)

# Skin chrominance (BT.601 Cb/Cr on the 0..255 scale): centers and spreads of
# the classic Cb in [77, 127], Cr in [133, 173] box, spread = half-range / 2.
SKIN_CB = (102.0, 12.5)
SKIN_CR = (153.0, 10.0)


def subband_index(scale, orientation):
    """Channel index of an oriented subband; scale 0 is the finest band and
    orientation k prefers spatial frequencies at angle k*pi/4 from the x axis."""
    return scale * N_ORIENTATIONS + orientation


LOWPASS_INDEX = N_SCALES * N_ORIENTATIONS


def steerable_filters(size):
    """Frequency responses (fft2 layout) of a non-decimated steerable pyramid.

    Returns ``(oriented, lowpass)``: ``oriented`` has shape
    (N_SCALES * N_ORIENTATIONS, size, size) with one-sided (analytic) angular
    masks, so the magnitude of each response is a local energy envelope.
    Radial bands are one octave apart and centered at pi/2, pi/4 and pi/8;
    the lowpass takes over below pi/8 and their squares sum to one there.
    """
    w = np.fft.fftfreq(size) * 2 * np.pi
    wx, wy = np.meshgrid(w, w)
    r = np.hypot(wx, wy)
    with np.errstate(divide="ignore"):
        u = np.log2(r / np.pi)
    theta = np.arctan2(wy, wx)

    def raised(d):
        out = np.zeros_like(d)
        m = np.abs(d) < 1
        out[m] = np.cos(np.pi / 2 * d[m])
        return out

    oriented = []
    for s in range(N_SCALES):
        radial = raised(u + (s + 1))
        for k in range(N_ORIENTATIONS):
            ang = np.angle(np.exp(1j * (theta - k * np.pi / N_ORIENTATIONS)))
            mask = np.where(np.abs(ang) < np.pi / 2, np.cos(ang) ** (N_ORIENTATIONS - 1), 0.0)
            oriented.append(radial * mask)
    lo_edge = -(N_SCALES + 1)  # log2 radius where the lowpass starts rolling off
    lowpass = np.where(u <= lo_edge, 1.0, raised(u - lo_edge))
    lowpass[0, 0] = 1.0
    return np.stack(oriented), lowpass


_FILTER_CACHE = {}


def steerable_magnitudes(gray):
    """13 maps: 12 oriented subband magnitudes plus the lowpass residual."""
    gray = np.asarray(gray, dtype=np.float64)
    n = gray.shape[0]
    if gray.shape != (n, n):
        raise ValueError("steerable pyramid expects a square image")
    if n not in _FILTER_CACHE:
        _FILTER_CACHE[n] = steerable_filters(n)
    oriented, lowpass = _FILTER_CACHE[n]
    spec = np.fft.fft2(gray)
    bands = np.abs(np.fft.ifft2(spec[None] * oriented))
    low = np.maximum(np.fft.ifft2(spec * lowpass).real, 0.0)
    return np.concatenate([bands, low[None]])


def color_channels(img):
    """Broadly tuned R, G, B, Y opponent channels (clamped at 0) and intensity."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    R = r - (g + b) / 2
    G = g - (r + b) / 2
    B = b - (r + g) / 2
    Y = (r + g) / 2 - np.abs(r - g) / 2 - b
    opp = np.maximum(np.stack([R, G, B, Y]), 0.0)
    return opp, (r + g + b) / 3.0


def skin_likelihood(img):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    cb = 128.0 + 255.0 * (-0.168736 * r - 0.331264 * g + 0.5 * b)
    cr = 128.0 + 255.0 * (0.5 * r - 0.418688 * g - 0.081312 * b)
    return np.exp(-0.5 * (((cb - SKIN_CB[0]) / SKIN_CB[1]) ** 2
                          + ((cr - SKIN_CR[0]) / SKIN_CR[1]) ** 2))


def _max_normalize(stack):
    out = np.zeros_like(stack)
    for i, ch in enumerate(stack):
        m = ch.max()
        if m > 0:
            out[i] = ch / m
    return out


def extract_shallow_features(img, size=200):
    """The 19-channel shallow stack of a color frame, warped to ``size``."""
    if not is_color(img):
        raise ValueError("prior map requires 3 channels")
    warped = np.clip(resize_bilinear(img, (size, size)), 0.0, 1.0)
    opp, inten = color_channels(warped)
    stack = np.concatenate([
        steerable_magnitudes(inten),
        opp,
        inten[None],
        skin_likelihood(warped)[None],
    ])
    return _max_normalize(stack)


def box_mask(box: BoundingBox, shape):
    """Boolean mask of the pixels whose centers fall inside ``box``;
    ``shape = (rows, cols)``."""
    rows, cols = shape
    x0, y0, x1, y1 = box.corners()
    xs = np.arange(cols) + 0.5
    ys = np.arange(rows) + 0.5
    return ((ys >= y0) & (ys < y1))[:, None] & ((xs >= x0) & (xs < x1))[None, :]


@dataclass(frozen=True)
class PriorWeights:
    w: np.ndarray
    lambda_s: float


def solve_ridge(F, y, lam):
    """``(F^T F + lam I)^{-1} F^T y`` via a Cholesky solve with one round of
    iterative refinement."""
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda_s must be >= 0")
    A = F.T @ F
    A[np.diag_indices_from(A)] += lam
    rhs = F.T @ y
    if lam == 0 and np.linalg.cond(A) > 1e12:
        raise ValueError("singular normal equations with lambda_s = 0; use lambda_s > 0")
    try:
        cho = linalg.cho_factor(A)
    except linalg.LinAlgError:
        raise ValueError("normal equations are not positive definite; use lambda_s > 0") from None
    w = linalg.cho_solve(cho, rhs)
    w += linalg.cho_solve(cho, rhs - A @ w)
    return w


def learn_prior_weights(stack, gt_box: BoundingBox, lambda_s=1.0):
    """Ridge weights regressing the binary box mask from the 19 channels.

    ``gt_box`` is in the stack's grid coordinates.
    """
    stack = np.asarray(stack, dtype=np.float64)
    n, rows, cols = stack.shape
    target = box_mask(gt_box, (rows, cols)).astype(np.float64)
    # column-wise vectorisation of every channel
    F = stack.transpose(0, 2, 1).reshape(n, -1).T
    y = target.T.reshape(-1)
    return PriorWeights(solve_ridge(F, y, lambda_s), float(lambda_s))


@dataclass
class SaliencyMap:
    combined: np.ndarray
    penalized: np.ndarray  # max-normalized to [0, 1]
    binary: np.ndarray
    sigma_b: float


def center_penalty(shape, center, delta_s=2.0, mode="decreasing"):
    rows, cols = shape
    cx, cy = center
    if not (0 <= cx <= cols and 0 <= cy <= rows):
        raise ValueError(f"previous center ({cx:.1f}, {cy:.1f}) outside the {cols}x{rows} grid")
    xs = np.arange(cols) + 0.5
    ys = np.arange(rows) + 0.5
    dist = np.hypot(xs[None, :] - cx, ys[:, None] - cy)
    ratio = dist / dist.max()
    if mode == "decreasing":
        return delta_s * (1.0 - ratio)
    if mode == "literal":
        return delta_s * ratio
    raise ValueError(f"unknown center penalty mode {mode!r}")


def build_saliency_map(stack, weights, prev_center, sigma_b=0.2, delta_s=2.0,
                       mode="decreasing"):
    """``prev_center`` is in grid coordinates."""
    w = weights.w if isinstance(weights, PriorWeights) else np.asarray(weights, dtype=np.float64)
    combined = np.tensordot(w, stack, axes=1)
    pen = np.maximum(center_penalty(combined.shape, prev_center, delta_s, mode) * combined, 0.0)
    top = pen.max()
    norm = pen / top if top > 0 else np.zeros_like(pen)
    binary = (norm >= sigma_b) & (norm > 0)
    return SaliencyMap(combined, norm, binary, float(sigma_b))


@dataclass
class RegionCandidate:
    pixels: np.ndarray  # (n, 2) array of (row, col) on the grid
    centroid_grid: tuple
    centroid: tuple  # frame coordinates
    patch: np.ndarray | None = None
    confidence: float = float("nan")

    @property
    def area(self):
        return len(self.pixels)


_EIGHT = np.ones((3, 3), dtype=bool)


def extract_candidates(smap, last_box: BoundingBox, sigma_s, frame=None, frame_shape=None):
    """8-connected regions of the binary map with at least ``sigma_s`` pixels.

    Grid centroids are rescaled to frame coordinates (``frame_shape`` =
    (rows, cols), taken from ``frame`` when given). With a frame, each
    candidate carries a patch of the last box size cropped at its centroid and
    shifted to stay inside the frame.
    """
    binary = smap.binary if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=bool)
    rows, cols = binary.shape
    if frame is not None:
        frame_shape = frame.shape[:2]
    if frame_shape is None:
        frame_shape = (rows, cols)
    sy, sx = frame_shape[0] / rows, frame_shape[1] / cols
    labels, n = ndimage.label(binary, structure=_EIGHT)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    out = []
    for lab in range(1, n + 1):
        if areas[lab] < sigma_s:
            continue
        pix = np.argwhere(labels == lab)
        gy = pix[:, 0].mean() + 0.5
        gx = pix[:, 1].mean() + 0.5
        cand = RegionCandidate(pix, (gx, gy), (gx * sx, gy * sy))
        if frame is not None:
            cand.patch = crop_inside(frame, cand.centroid, (last_box.w, last_box.h))
        out.append(cand)
    return out


def crop_inside(frame, center, size):
    """Native-resolution crop of ``size = (w, h)`` at ``center``, shifted so
    the window stays inside the frame when it fits."""
    H, W = frame.shape[:2]
    w, h = size
    cx = min(max(center[0], w / 2.0), W - w / 2.0) if w <= W else W / 2.0
    cy = min(max(center[1], h / 2.0), H - h / 2.0) if h <= H else H / 2.0
    rows = max(1, int(round(h)))
    cols = max(1, int(round(w)))
    return crop_resized(frame, (cx, cy), (w, h), (rows, cols))


@dataclass
class RoiDecision:
    center: tuple
    used_prior: bool
    best_score: float
    scores: list = field(default_factory=list)
    winner: int | None = None


def canonical_patch(patch, shape, blur=0.0):
    """Gaussian-smooth a native-resolution patch (``blur`` in output pixels)
    and resample it onto ``shape = (rows, cols)``. Smoothing keeps the match
    stable under sub-pixel misalignment of fine texture."""
    patch = np.asarray(patch, dtype=np.float64)
    if blur > 0:
        s = (blur * patch.shape[0] / shape[0], blur * patch.shape[1] / shape[1])
        patch = ndimage.gaussian_filter(patch, s + (0,) * (patch.ndim - 2), mode="nearest")
    return crop_resized(patch, (patch.shape[1] / 2.0, patch.shape[0] / 2.0),
                        (patch.shape[1], patch.shape[0]), shape)


def template_distance(patch, template, blur=0.0):
    """Sum of squared differences between the canonical form of ``patch``
    and the (already canonical) template."""
    t = np.asarray(template, dtype=np.float64)
    return float(np.sum((canonical_patch(patch, t.shape[:2], blur) - t) ** 2))


def decide_roi(cands, template, last_center, sigma_c=0.2, delta_c=0.01, tie_tol=0.0,
               blur=0.0):
    """Pick the candidate whose patch best matches the fixed template.

    Scores are ``exp(-delta_c * d2)`` with ``d2`` the template distance.
    Candidates scoring at least ``(1 - tie_tol)`` times the best count as
    tied and the one nearest ``last_center`` wins. The winner is used only if
    its score exceeds ``sigma_c``; otherwise, or without candidates, the ROI
    stays at ``last_center``.
    """
    lx, ly = last_center
    if not cands:
        return RoiDecision((lx, ly), False, 0.0)
    scores = []
    for c in cands:
        c.confidence = float(np.exp(-delta_c * template_distance(c.patch, template, blur)))
        scores.append(c.confidence)

    top = max(scores)
    tied = [i for i in range(len(cands)) if scores[i] >= (1.0 - tie_tol) * top]

    def key(i):
        cx, cy = cands[i].centroid
        return ((cx - lx) ** 2 + (cy - ly) ** 2, -scores[i], cx, cy)

    best = min(tied, key=key)
    c_star = scores[best]
    if c_star > sigma_c:
        return RoiDecision(tuple(cands[best].centroid), True, c_star, scores, best)
    return RoiDecision((lx, ly), False, c_star, scores, best)


class PriorModel:
    """First-frame prior weights and template, plus the per-frame ROI decision."""

    def __init__(self, weights, template, cfg, frame_shape):
        self.weights = weights
        self.template = template
        self.cfg = cfg
        self.frame_shape = frame_shape

    def to_grid(self, x, y):
        H, W = self.frame_shape
        n = self.cfg.prior_size
        return x * n / W, y * n / H

    def grid_box(self, box):
        gx, gy = self.to_grid(box.cx, box.cy)
        H, W = self.frame_shape
        n = self.cfg.prior_size
        return BoundingBox(gx, gy, box.w * n / W, box.h * n / H)

    @classmethod
    def fit(cls, frame, gt_box, cfg):
        stack = extract_shallow_features(frame, cfg.prior_size)
        frame_shape = frame.shape[:2]
        model = cls(None, None, cfg, frame_shape)
        model.weights = learn_prior_weights(stack, model.grid_box(gt_box), cfg.lambda_s)
        t = cfg.template_size
        native = crop_inside(frame, gt_box.center, (gt_box.w, gt_box.h))
        model.template = canonical_patch(native, (t, t), cfg.template_blur)
        return model

    def sigma_s(self, box):
        g = self.grid_box(box)
        return self.cfg.sigma_s_factor * g.w * g.h

    def analyse(self, frame, last_box):
        """Returns ``(decision, saliency_map, candidates)`` for one frame."""
        cfg = self.cfg
        stack = extract_shallow_features(frame, cfg.prior_size)
        n = cfg.prior_size
        gx, gy = self.to_grid(last_box.cx, last_box.cy)
        gx = min(max(gx, 0.0), float(n))
        gy = min(max(gy, 0.0), float(n))
        smap = build_saliency_map(stack, self.weights, (gx, gy), cfg.sigma_b, cfg.delta_s,
                                  cfg.center_penalty)
        cands = extract_candidates(smap, last_box, self.sigma_s(last_box), frame=frame)
        decision = decide_roi(cands, self.template, last_box.center, cfg.sigma_c, cfg.delta_c,
                              cfg.roi_tie_tol, cfg.template_blur)
        return decision, smap, cands


def dump_prior_debug(out_dir, frame_id, smap, cands, decision):
    """PNGs of the combined, penalized and binary maps, a candidate overlay
    and a JSON sidecar with centroids and scores."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"prior_{frame_id:04d}"
    write_image(out / f"{stem}_combined.png", smap.combined)
    write_image(out / f"{stem}_penalized.png", smap.penalized)
    write_image(out / f"{stem}_binary.png", smap.binary.astype(np.float64))
    overlay = np.repeat(smap.penalized[..., None], 3, axis=2) * 0.6
    for i, c in enumerate(cands):
        color = (0.0, 1.0, 0.0) if i == decision.winner and decision.used_prior else (1.0, 0.3, 0.0)
        overlay[c.pixels[:, 0], c.pixels[:, 1]] = color
    write_image(out / f"{stem}_candidates.png", overlay)
    side = {
        "frame": frame_id,
        "used_prior": decision.used_prior,
        "center": list(decision.center),
        "best_score": decision.best_score,
        "candidates": [
            {"centroid": list(c.centroid), "centroid_grid": list(c.centroid_grid),
             "area": int(c.area), "score": c.confidence}
            for c in cands
        ],
    }
    (out / f"{stem}.json").write_text(json.dumps(side, indent=2))
    return side

"""Geometric and raster primitives shared by the whole tracker.

Coordinates are continuous with the origin at the top-left corner, x to the
right and y downward. Pixel ``(row i, col j)`` covers ``[j, j+1) x [i, i+1)``,
so its center sits at ``(j + 0.5, i + 0.5)``.

Images are numpy arrays of shape (H, W) or (H, W, 3) with values in [0, 1].
Heat maps are 2-D float64 arrays.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float
    scale: float = 1.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.scale)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {self}")
        if self.w <= 0 or self.h <= 0 or self.scale <= 0:
            raise ValueError(f"box needs w, h, scale > 0, got {self}")

    @classmethod
    def from_xywh(cls, x, y, w, h, scale=1.0):
        """Build from top-left corner plus size."""
        return cls(x + w / 2.0, y + h / 2.0, float(w), float(h), scale)

    def to_xywh(self):
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    @property
    def area(self):
        return self.w * self.h

    @property
    def center(self):
        return (self.cx, self.cy)

    def corners(self):
        """(x0, y0, x1, y1)."""
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def moved(self, cx, cy):
        return dataclasses.replace(self, cx=float(cx), cy=float(cy))

    def rescaled(self, base_w, base_h, scale):
        """Box at the same center whose size is ``scale`` times the base size."""
        return BoundingBox(self.cx, self.cy, base_w * scale, base_h * scale, scale)

    def to_dict(self):
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(d["cx"], d["cy"], d["w"], d["h"], d.get("scale", 1.0))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def gaussian_map(box: BoundingBox, shape, std_factor=0.25) -> np.ndarray:
    """Gaussian bump with peak 1 at the box center and std ``std_factor`` times
    the box size per axis.

    ``box`` is in map coordinates; ``shape`` is ``(width, height)``.
    """
    width, height = shape
    if not (0.0 <= box.cx <= width and 0.0 <= box.cy <= height):
        raise ValueError(
            f"box center ({box.cx:.2f}, {box.cy:.2f}) outside {width}x{height} map; "
            "check the frame-to-map coordinate mapping")
    sx = std_factor * box.w
    sy = std_factor * box.h
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    gx = np.exp(-0.5 * ((xs - box.cx) / sx) ** 2)
    gy = np.exp(-0.5 * ((ys - box.cy) / sy) ** 2)
    return np.outer(gy, gx)


def _linear_taps(n_in, n_out):
    # half-pixel aligned sampling positions, clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_axes(arr, out_h, out_w, axes=(0, 1)):
    """Bilinear resize of ``arr`` along the two given axes."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("target size must be positive")
    arr = np.asarray(arr)
    ay, ax = axes
    out = arr.astype(np.float64, copy=False)
    if out.shape[ay] != out_h:
        i0, i1, f = _linear_taps(out.shape[ay], out_h)
        shp = [1] * out.ndim
        shp[ay] = out_h
        f = f.reshape(shp)
        out = np.take(out, i0, axis=ay) * (1.0 - f) + np.take(out, i1, axis=ay) * f
    if out.shape[ax] != out_w:
        i0, i1, f = _linear_taps(out.shape[ax], out_w)
        shp = [1] * out.ndim
        shp[ax] = out_w
        f = f.reshape(shp)
        out = np.take(out, i0, axis=ax) * (1.0 - f) + np.take(out, i1, axis=ax) * f
    return out


def resize_bilinear(arr, target):
    """Resize a heat map (H, W) or image (H, W, C) to ``target = (w, h)``."""
    w, h = target
    return resize_axes(arr, int(h), int(w), axes=(0, 1))


def crop_resized(img, center, size, out_shape):
    """Sample the axis-aligned window ``size = (w, h)`` centered at ``center``
    onto an ``out_shape = (rows, cols)`` raster. Outside the image the border
    pixels are replicated.
    """
    img = np.asarray(img, dtype=np.float64)
    rows, cols = out_shape
    cx, cy = center
    w, h = size
    xs = cx - w / 2.0 + (np.arange(cols) + 0.5) * (w / cols) - 0.5
    ys = cy - h / 2.0 + (np.arange(rows) + 0.5) * (h / rows) - 0.5
    H, W = img.shape[:2]
    xs = np.clip(xs, 0.0, W - 1)
    ys = np.clip(ys, 0.0, H - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xs - x0
    fy = ys - y0
    if img.ndim == 3:
        fx = fx[None, :, None]
        fy = fy[:, None, None]
    else:
        fx = fx[None, :]
        fy = fy[:, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def check_image(img, name="image"):
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"{name}: expected (H, W) or (H, W, 3), got {img.shape}")
    if img.size == 0 or not np.all(np.isfinite(img)):
        raise ValueError(f"{name}: empty or non-finite")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return img


def is_color(img):
    return np.ndim(img) == 3 and np.shape(img)[2] == 3


_CENTER_PENALTIES = ("decreasing", "literal")


@dataclass
class TrackerConfig:
    """Every tunable of the tracker. Defaults follow the published settings
    where they exist."""

    # prior map
    prior_size: int = 200
    sigma_b: float = 0.2
    sigma_s_factor: float = 0.4
    sigma_c: float = 0.2
    delta_s: float = 2.0
    delta_c: float = 0.01
    lambda_s: float = 1.0
    center_penalty: str = "decreasing"
    template_size: int = 32
    template_blur: float = 1.5
    roi_tie_tol: float = 0.2
    roi_scale: float = 2.0
    # heat maps and heads
    heat_size: int = 46
    gaussian_std_factor: float = 0.25
    head_hidden: int = 8
    head_iters: int = 100
    head_lr: float = 1e-5
    init_std: float = 0.01
    selector_iters: int = 50
    selector_lr: float = 1e-5
    dropout_ratio: float = 0.3
    n_select: int = 384
    # localisation
    n_particles: int = 700
    particle_std_factor: float = 0.1
    scale_jitter: float = 0.05
    gamma: float = 0.7
    lambda_sigma: float = 0.5
    scale_min: float = 0.25
    scale_max: float = 4.0
    peak_ratio: float = 0.8
    rectify_min_peaks: int = 2
    freeze_ratio: float = 0.1
    freeze_window: int = 20
    # online update
    pool_capacity: int = 10
    theta: float = 0.7
    insert_ratio: float = 0.85
    update_period: int = 10
    update_conf_ratio: float = 2.0
    trunc_k: float = 20.0
    trunc_mu: float = 30.0
    beta_w: float = 1e-3
    update_iters: int = 20
    update_lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.prior_size >= 16, "prior_size >= 16"),
            (0.0 <= self.sigma_b <= 1.0, "sigma_b in [0, 1]"),
            (self.sigma_s_factor >= 0.0, "sigma_s_factor >= 0"),
            (0.0 <= self.sigma_c <= 1.0, "sigma_c in [0, 1]"),
            (self.delta_s > 0, "delta_s > 0"),
            (self.delta_c > 0, "delta_c > 0"),
            (self.lambda_s >= 0, "lambda_s >= 0"),
            (self.center_penalty in _CENTER_PENALTIES, f"center_penalty in {_CENTER_PENALTIES}"),
            (self.template_size >= 4, "template_size >= 4"),
            (self.roi_scale >= 1.0, "roi_scale >= 1"),
            (0.0 <= self.roi_tie_tol < 1.0, "roi_tie_tol in [0, 1)"),
            (self.template_blur >= 0.0, "template_blur >= 0"),
            (self.heat_size >= 8, "heat_size >= 8"),
            (self.gaussian_std_factor > 0, "gaussian_std_factor > 0"),
            (self.head_hidden >= 1, "head_hidden >= 1"),
            (self.head_iters >= 1 and self.selector_iters >= 1, "iteration counts >= 1"),
            (self.head_lr > 0 and self.selector_lr > 0 and self.update_lr > 0, "learning rates > 0"),
            (self.init_std > 0, "init_std > 0"),
            (0.0 <= self.dropout_ratio < 1.0, "dropout_ratio in [0, 1)"),
            (self.n_select >= 1, "n_select >= 1"),
            (self.n_particles >= 1, "n_particles >= 1"),
            (self.particle_std_factor >= 0 and self.scale_jitter >= 0, "particle spreads >= 0"),
            (0.0 <= self.gamma < 1.0, "gamma in [0, 1)"),
            (0.0 <= self.lambda_sigma <= 1.0, "lambda_sigma in [0, 1]"),
            (0 < self.scale_min <= 1.0 <= self.scale_max, "scale_min <= 1 <= scale_max"),
            (0.0 < self.peak_ratio <= 1.0, "peak_ratio in (0, 1]"),
            (self.rectify_min_peaks >= 2, "rectify_min_peaks >= 2"),
            (0.0 <= self.freeze_ratio < 1.0, "freeze_ratio in [0, 1)"),
            (self.freeze_window >= 1, "freeze_window >= 1"),
            (self.pool_capacity >= 1, "pool_capacity >= 1"),
            (self.theta < 1.0, "theta < 1"),
            (0.0 < self.insert_ratio <= 1.0, "insert_ratio in (0, 1]"),
            (self.update_period >= 1, "update_period >= 1"),
            (self.update_conf_ratio > 0, "update_conf_ratio > 0"),
            (self.trunc_k > 0 and self.trunc_mu >= 0, "trunc_k > 0, trunc_mu >= 0"),
            (self.beta_w >= 0, "beta_w >= 0"),
            (self.update_iters >= 0, "update_iters >= 0"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise ValueError("invalid config: " + "; ".join(bad))

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for k, v in d.items():
            typ = type(getattr(cls, k, None)) if hasattr(cls, k) else None
            if typ is int and isinstance(v, float) and v.is_integer():
                v = int(v)
            if typ is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            kwargs[k] = v
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if not isinstance(d, dict):
            raise ValueError("config JSON must be an object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_json())

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def read_image(path):
    """Load an image file as float64 in [0, 1]; grayscale stays 2-D."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16", "F", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, arr):
    """Write an image or heat map as 8-bit PNG/BMP. Heat maps are min-max scaled."""
    from PIL import Image

    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        lo, hi = float(arr.min()), float(arr.max())
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)

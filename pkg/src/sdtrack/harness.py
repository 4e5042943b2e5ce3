"""Sequences, runs and scores.

Sequences follow the OTB layout: ``img/0001.jpg`` (or ``.png``) frames plus a
``groundtruth_rect.txt`` with one ``x,y,w,h`` line per frame, top-left
convention. Internally boxes are center based.
"""
from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import BoundingBox, TrackerConfig, center_error, iou, is_color, read_image, write_image
from .tracker import ABLATIONS, Tracker

log = logging.getLogger(__name__)

SUCCESS_IOU = 0.5
PRECISION_PX = 20.0
_FRAME_RE = re.compile(r"^(\d+)\.(jpg|jpeg|png|bmp)$", re.IGNORECASE)


@dataclass
class SequenceDataset:
    name: str
    gt: list  # BoundingBox per frame (may hold only the first one)
    frames: list | None = None  # in-memory frames, or
    frame_paths: list | None = None
    color: bool = True

    def __post_init__(self):
        n = len(self)
        if n < 2:
            raise ValueError(f"sequence {self.name!r} needs at least 2 frames, has {n}")
        if not self.gt:
            raise ValueError(f"sequence {self.name!r} has no ground truth")

    def __len__(self):
        return len(self.frames) if self.frames is not None else len(self.frame_paths)

    def frame(self, i):
        """0-based frame access."""
        if self.frames is not None:
            return self.frames[i]
        return read_image(self.frame_paths[i])

    @property
    def has_full_gt(self):
        return len(self.gt) == len(self)


def parse_groundtruth(path):
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in re.split(r"[,\s]+", line) if p]
        try:
            x, y, w, h = (float(p) for p in parts)
            boxes.append(BoundingBox.from_xywh(x, y, w, h))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: cannot parse box {line!r} ({exc})") from None
    return boxes


def load_sequence(seq_dir, require_gt=True):
    """Load an OTB-style directory. With ``require_gt`` every frame needs a
    ground-truth line; otherwise only the first is required."""
    seq_dir = Path(seq_dir)
    img_dir = seq_dir / "img"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"no img/ directory in {seq_dir}")
    found = sorted((int(m.group(1)), p) for p in img_dir.iterdir()
                   if (m := _FRAME_RE.match(p.name)))
    if not found:
        raise FileNotFoundError(f"no frames in {img_dir}")
    numbers = [n for n, _ in found]
    expected = list(range(numbers[0], numbers[0] + len(numbers)))
    if numbers != expected:
        missing = sorted(set(expected) - set(numbers))
        raise FileNotFoundError(f"missing frames in {img_dir}: {missing[:5]}")
    paths = [p for _, p in found]
    gt_path = seq_dir / "groundtruth_rect.txt"
    if not gt_path.exists():
        raise FileNotFoundError(f"missing {gt_path}")
    gt = parse_groundtruth(gt_path)
    if require_gt and len(gt) != len(paths):
        raise ValueError(f"{gt_path}: {len(gt)} boxes for {len(paths)} frames")
    if not gt:
        raise ValueError(f"{gt_path} is empty")
    color = is_color(read_image(paths[0]))
    return SequenceDataset(seq_dir.name, gt, frame_paths=paths, color=color)


def save_sequence(ds: SequenceDataset, out_dir):
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        write_image(out / "img" / f"{i + 1:04d}.png", ds.frame(i))
    lines = ["{:.6g},{:.6g},{:.6g},{:.6g}".format(*b.to_xywh()) for b in ds.gt]
    (out / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    return out


# synthetic sequences -------------------------------------------------------

QUADRANT_COLORS = ((0.85, 0.2, 0.15), (0.15, 0.3, 0.85), (0.2, 0.75, 0.25), (0.9, 0.8, 0.15))


@dataclass
class SyntheticSpec:
    """Scripted sequence: a quadrant-colored striped square on a smooth
    background, optionally teleporting, drifting in hue and growing, with an
    optional identical-looking distracter."""
    n_frames: int = 60
    width: int = 320
    height: int = 240
    target_size: tuple = (40.0, 40.0)
    start: tuple = (100.0, 120.0)
    velocity: tuple = (0.0, 0.0)
    teleport_frame: int | None = None  # 1-based frame of the jump
    teleport_offset: tuple = (120.0, 0.0)
    distracter_start: tuple | None = None
    distracter_velocity: tuple = (0.0, 0.0)
    hue_drift: float = 0.0  # radians per frame
    scale_ramp: float = 0.0  # relative size change per frame
    noise: float = 0.02
    seed: int = 0
    name: str = "synthetic"

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synthetic spec keys: {sorted(extra)}")
        d = dict(d)
        for k in ("target_size", "start", "velocity", "teleport_offset", "distracter_start",
                  "distracter_velocity"):
            if d.get(k) is not None:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def target_box(self, t):
        """Ground-truth box at 1-based frame ``t``."""
        x = self.start[0] + self.velocity[0] * (t - 1)
        y = self.start[1] + self.velocity[1] * (t - 1)
        if self.teleport_frame is not None and t >= self.teleport_frame:
            x += self.teleport_offset[0]
            y += self.teleport_offset[1]
        s = 1.0 + self.scale_ramp * (t - 1)
        return BoundingBox(x, y, self.target_size[0] * s, self.target_size[1] * s, s)

    def distracter_box(self, t):
        if self.distracter_start is None:
            return None
        s = 1.0 + self.scale_ramp * (t - 1)
        return BoundingBox(self.distracter_start[0] + self.distracter_velocity[0] * (t - 1),
                           self.distracter_start[1] + self.distracter_velocity[1] * (t - 1),
                           self.target_size[0] * s, self.target_size[1] * s, s)

    def validate(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.teleport_frame is not None and not 2 <= self.teleport_frame <= self.n_frames:
            raise ValueError("teleport_frame must be within the sequence (and not the first frame)")
        for t in range(1, self.n_frames + 1):
            for what, b in (("target", self.target_box(t)), ("distracter", self.distracter_box(t))):
                if b is None:
                    continue
                x0, y0, x1, y1 = b.corners()
                if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                    raise ValueError(f"{what} leaves the {self.width}x{self.height} canvas at frame {t}")


def hue_rotation(angle):
    """RGB matrix rotating hue by ``angle`` radians about the gray axis."""
    c, s = np.cos(angle), np.sin(angle)
    k = np.ones(3) / np.sqrt(3.0)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return c * np.eye(3) + s * K + (1 - c) * np.outer(k, k)


def _draw(img, box, colors):
    H, W = img.shape[:2]
    x0, y0, x1, y1 = box.corners()
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    cols = np.nonzero((xs >= x0) & (xs < x1))[0]
    rows = np.nonzero((ys >= y0) & (ys < y1))[0]
    if not len(cols) or not len(rows):
        return
    u = (xs[cols] - x0) / box.w
    v = (ys[rows] - y0) / box.h
    uu, vv = np.meshgrid(u, v)
    quad = (vv >= 0.5).astype(int) * 2 + (uu >= 0.5)
    stripes = 0.8 + 0.2 * np.sign(np.sin(2 * np.pi * 4 * (uu + vv)))
    img[np.ix_(rows, cols)] = colors[quad] * stripes[..., None]


def synthesize(spec: SyntheticSpec) -> SequenceDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ph = rng.uniform(0, 2 * np.pi, 3)
    background = np.stack([
        0.45 + 0.05 * np.sin(xx / 37.0 + ph[0]),
        0.48 + 0.05 * np.cos(yy / 29.0 + ph[1]),
        0.45 + 0.04 * np.sin((xx + yy) / 53.0 + ph[2]),
    ], axis=-1)
    base = np.asarray(QUADRANT_COLORS)
    frames, gt = [], []
    for t in range(1, spec.n_frames + 1):
        img = background.copy()
        colors = np.clip(base @ hue_rotation(spec.hue_drift * (t - 1)).T, 0.0, 1.0)
        d = spec.distracter_box(t)
        if d is not None:
            _draw(img, d, colors)
        box = spec.target_box(t)
        _draw(img, box, colors)
        if spec.noise > 0:
            img = img + rng.normal(0.0, spec.noise, img.shape)
        frames.append(np.clip(img, 0.0, 1.0))
        gt.append(box)
    return SequenceDataset(spec.name, gt, frames=frames, color=True)


# runs ------------------------------------------------------------------------

@dataclass
class Trace:
    records: list
    ablation: str = "full"
    config: dict = field(default_factory=dict)
    elapsed: float = 0.0

    def boxes(self):
        return [BoundingBox(*r["box"], scale=r.get("scale", 1.0)) for r in self.records]

    def update_events(self):
        return [r for r in self.records if r.get("update_fired")]

    def write(self, path):
        """JSON lines, one object per frame, plus ``<stem>.summary.json``."""
        path = Path(path)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        summary = {
            "ablation": self.ablation,
            "config": self.config,
            "frames": len(self.records),
            "update_events": len(self.update_events()),
            "errors": sum(1 for r in self.records if "error" in r),
        }
        path.with_suffix(".summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))

    @classmethod
    def read(cls, path):
        path = Path(path)
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        side = path.with_suffix(".summary.json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls(records, meta.get("ablation", "full"), meta.get("config", {}))


def run_tracker(dataset: SequenceDataset, cfg: TrackerConfig | None = None, ablation="full",
                provider=None, dump_dir=None, progress=None) -> Trace:
    """Track a whole sequence from its first ground-truth box."""
    cfg = cfg or TrackerConfig()
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {sorted(ABLATIONS)}")
    t0 = time.perf_counter()
    tracker = Tracker(cfg, provider, ablation, dump_dir)
    est = tracker.initialize(dataset.frame(0), dataset.gt[0])
    b = est.box
    records = [{"frame": 1, "box": [b.cx, b.cy, b.w, b.h], "scale": b.scale,
                "confidence": est.confidence, "used_prior": False, "n_h": 0, "n_p": 0,
                "frozen": False, "update_fired": False}]
    for i in range(1, len(dataset)):
        res = tracker.track_frame(dataset.frame(i))
        records.append(res.record())
        if progress is not None:
            progress(res)
    return Trace(records, ablation, cfg.to_dict(), time.perf_counter() - t0)


@dataclass
class EvalReport:
    name: str
    overlap: float
    center_error: float
    success: float
    precision: float
    ious: list
    errors: list
    ablation: str = "full"
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def evaluate(trace, dataset: SequenceDataset, success_iou=SUCCESS_IOU, precision_px=PRECISION_PX):
    """Mean IoU, mean center error, and the fractions of frames with IoU above
    ``success_iou`` and center error within ``precision_px``."""
    boxes = trace.boxes() if isinstance(trace, Trace) else list(trace)
    if len(boxes) != len(dataset.gt):
        raise ValueError(f"trace has {len(boxes)} frames but {dataset.name!r} has "
                         f"{len(dataset.gt)} ground-truth boxes")
    ious = [iou(b, g) for b, g in zip(boxes, dataset.gt)]
    errs = [center_error(b, g) for b, g in zip(boxes, dataset.gt)]
    return EvalReport(
        dataset.name,
        float(np.mean(ious)),
        float(np.mean(errs)),
        float(np.mean([v > success_iou for v in ious])),
        float(np.mean([e <= precision_px for e in errs])),
        ious, errs,
        trace.ablation if isinstance(trace, Trace) else "full",
        trace.config if isinstance(trace, Trace) else {},
    )


def benchmark(datasets, cfg=None, ablation="full", workers=2, provider_factory=None):
    """Run and score several sequences in parallel threads, one tracker each.
    Reports come back sorted by sequence name."""
    def one(ds):
        provider = provider_factory(ds) if provider_factory else None
        return evaluate(run_tracker(ds, cfg, ablation, provider), ds)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        reports = list(pool.map(one, datasets))
    return sorted(reports, key=lambda r: r.name)

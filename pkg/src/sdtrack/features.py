"""Deep-feature providers and saliency-driven channel selection.

The tracker only needs two 46x46 feature stacks per ROI: a fine one feeding
the part heads and a coarse one (computed at 23x23 and bilinearly upsampled)
feeding the holistic head. ``StandInProvider`` produces them from a fixed
hand-built filter bank so the pipeline runs without a pretrained backbone;
``FileProvider`` reads stacks exported by an external model.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .convnet import SelectorNet, conv_forward, conv_backward, predict
from .core import resize_axes, is_color

SOURCE_FINE = 4
SOURCE_COARSE = 5


class FeatureProvider(Protocol):
    channels: int

    def provide(self, roi, frame_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(fine, coarse)`` stacks of shape (channels, 46, 46)."""
        ...


def _gabor(sigma, wavelength, theta):
    half = int(np.ceil(3 * sigma))
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    u = x * np.cos(theta) + y * np.sin(theta)
    env = np.exp(-(x ** 2 + y ** 2) / (2 * sigma ** 2))
    even = env * np.cos(2 * np.pi * u / wavelength)
    odd = env * np.sin(2 * np.pi * u / wavelength)
    even -= env * (even.sum() / env.sum())  # zero DC
    norm = np.abs(even).sum() + np.abs(odd).sum()
    return 2 * even / norm, 2 * odd / norm


def _avg_pool(x, k):
    C, H, W = x.shape
    return x.reshape(C, H // k, k, W // k, k).mean(axis=(2, 4))


def _gauss(a, sigma):
    return ndimage.gaussian_filter(a, (0, sigma, sigma), mode="reflect")


class StandInProvider:
    """Deterministic stand-in for a pretrained backbone.

    64 channels per stack: 8 smoothed color maps, 48 half-wave rectified
    even/odd Gabor responses (4 orientations on intensity and two opponent
    planes), 6 rectified center-surround responses, gradient magnitude and
    local contrast. The coarse stack runs the same bank on a half-resolution
    copy of the ROI, doubling every receptive field.
    """

    channels = 64

    def __init__(self, input_size=92, out_size=46):
        if input_size != 2 * out_size or out_size % 2:
            raise ValueError("input_size must be twice an even out_size")
        self.input_size = input_size
        self.out_size = out_size
        kernels = []
        for k in range(4):
            kernels.extend(_gabor(2.0, 6.0, k * np.pi / 4))
        self._kernels = np.stack(kernels)  # (8, kh, kw)
        self._half = self._kernels.shape[1] // 2
        self._spectra = {}

    def _gabor_bank(self, planes):
        """Correlate every plane with every Gabor kernel (reflect borders)."""
        P, H, W = planes.shape
        h = self._half
        padded = np.pad(planes, ((0, 0), (h, h), (h, h)), mode="reflect")
        shape = padded.shape[1:]
        if shape not in self._spectra:
            self._spectra[shape] = np.conj(np.fft.rfft2(self._kernels, s=shape))
        kf = self._spectra[shape]
        pf = np.fft.rfft2(padded)
        resp = np.fft.irfft2(pf[:, None] * kf[None], s=shape)
        return resp[:, :, :H, :W].reshape(P * len(kf), H, W)

    def _bank(self, img):
        r, g, b = img[..., 0], img[..., 1], img[..., 2]
        inten = (r + g + b) / 3.0
        planes = np.stack([inten, r - g, b - (r + g) / 2.0])
        color = np.stack([r, g, b, inten,
                          r - (g + b) / 2, g - (r + b) / 2, b - (r + g) / 2,
                          (r + g) / 2 - np.abs(r - g) / 2 - b])
        color = _gauss(color, 1.0)
        color[4:] = np.maximum(color[4:], 0.0)
        gab = self._gabor_bank(planes)
        dog = _gauss(planes, 1.0) - _gauss(planes, 3.0)
        si = _gauss(inten[None], 1.0)[0]
        gy, gx = np.gradient(si)
        mv = _gauss(np.stack([inten, inten * inten]), 2.0)
        contrast = np.sqrt(np.maximum(mv[1] - mv[0] ** 2, 0.0))
        return np.concatenate([
            color,
            np.maximum(gab, 0.0), np.maximum(-gab, 0.0),
            np.maximum(dog, 0.0), np.maximum(-dog, 0.0),
            np.hypot(gx, gy)[None], contrast[None],
        ])

    def provide(self, roi, frame_id=0):
        roi = np.asarray(roi, dtype=np.float64)
        if not is_color(roi):
            g = roi if roi.ndim == 2 else roi[..., 0]
            roi = np.repeat(g[..., None], 3, axis=2)
        n = self.input_size
        img = resize_axes(roi, n, n, axes=(0, 1))
        fine = _avg_pool(self._bank(img), 2)
        half = img.reshape(n // 2, 2, n // 2, 2, 3).mean(axis=(1, 3))
        coarse = _avg_pool(self._bank(half), 2)
        coarse = resize_axes(coarse, self.out_size, self.out_size, axes=(1, 2))
        return fine, coarse


# Feature file records: magic, u16 version, u32 frame id, u8 source tag,
# u16 channels, u16 width, u16 height, then channel-major float32 LE data.
_REC_MAGIC = b"SDTF"
_REC_VERSION = 1
_REC_HEADER = struct.Struct("<4sHIBHHH")


def write_feature_file(path, records):
    """Write ``records = [(frame_id, source_tag, stack), ...]`` plus an index
    ``<path>.idx.json`` mapping ``"frame:source"`` to byte offsets."""
    path = Path(path)
    index = {}
    with open(path, "wb") as fh:
        for frame_id, source, stack in records:
            stack = np.asarray(stack)
            c, h, w = stack.shape
            index[f"{int(frame_id)}:{int(source)}"] = fh.tell()
            fh.write(_REC_HEADER.pack(_REC_MAGIC, _REC_VERSION, int(frame_id), int(source), c, w, h))
            fh.write(stack.astype("<f4").tobytes())
    Path(str(path) + ".idx.json").write_text(json.dumps(index, sort_keys=True))
    return index


def read_feature_record(fh, offset):
    fh.seek(offset)
    raw = fh.read(_REC_HEADER.size)
    if len(raw) < _REC_HEADER.size:
        raise ValueError(f"truncated feature record at offset {offset}")
    magic, version, frame_id, source, c, w, h = _REC_HEADER.unpack(raw)
    if magic != _REC_MAGIC:
        raise ValueError(f"bad feature record magic at offset {offset}")
    if version != _REC_VERSION:
        raise ValueError(f"unsupported feature record version {version}")
    n = c * h * w
    data = fh.read(4 * n)
    if len(data) != 4 * n:
        raise ValueError(f"truncated feature data for frame {frame_id}")
    return frame_id, source, np.frombuffer(data, "<f4").reshape(c, h, w)


class FileProvider:
    """Serves precomputed stacks by frame id; ignores the ROI pixels."""

    def __init__(self, path, channels=None, size=46):
        self.path = Path(path)
        idx_path = Path(str(self.path) + ".idx.json")
        if not idx_path.exists():
            raise FileNotFoundError(f"missing feature index {idx_path}")
        self.index = {k: int(v) for k, v in json.loads(idx_path.read_text()).items()}
        self.size = size
        self.channels = channels

    def _load(self, frame_id, source):
        key = f"{frame_id}:{source}"
        if key not in self.index:
            raise KeyError(f"no source-{source} features for frame {frame_id} in {self.path}")
        with open(self.path, "rb") as fh:
            fid, src, stack = read_feature_record(fh, self.index[key])
        if fid != frame_id or src != source:
            raise ValueError(f"index points frame {frame_id} at a record for frame {fid}")
        if stack.shape[1:] != (self.size, self.size):
            raise ValueError(f"frame {frame_id}: expected {self.size}x{self.size} maps, "
                             f"got {stack.shape[2]}x{stack.shape[1]}")
        if self.channels is not None and stack.shape[0] != self.channels:
            raise ValueError(f"frame {frame_id}: expected {self.channels} channels, "
                             f"got {stack.shape[0]}")
        return stack.astype(np.float64)

    def provide(self, roi, frame_id=0):
        return self._load(frame_id, SOURCE_FINE), self._load(frame_id, SOURCE_COARSE)


def score_feature_saliency(selector: SelectorNet, stack, target):
    """Second-order estimate of the loss change caused by zeroing each channel.

    For channel i with contribution ``c_i = conv_i(f_i)`` to the selector
    output and residual ``r = output - target`` the score is
    ``sum(-dL/df_i * f_i) + 1/2 f_i^T H_ii f_i = -2 sum(r c_i) + sum(c_i**2)``,
    cross-channel Hessian terms dropped. The selector is linear, so this is
    exact for the squared loss.
    """
    if not getattr(selector, "trained", False):
        raise RuntimeError("selector must be trained before scoring channels")
    stack = np.asarray(stack, dtype=np.float64)
    out = predict(selector, stack)
    r = out - target
    conv = selector.conv
    _, cols = conv_forward(conv, stack)
    _, _, dx = conv_backward(conv, (2.0 * r)[None], cols)  # dL/df, shape (C, H, W)
    first = -np.sum(dx * stack, axis=(1, 2))
    C, kh, kw = conv.in_channels, conv.weight.shape[2], conv.weight.shape[3]
    contrib = np.einsum("ck,ckp->cp", conv.weight[0].reshape(C, kh * kw), cols)
    second = np.sum(contrib * contrib, axis=1)
    return first + second


@dataclass(frozen=True)
class SelectionMask:
    indices: np.ndarray
    scores: np.ndarray

    def apply(self, stack):
        return stack[self.indices]

    def __len__(self):
        return len(self.indices)


def select_top_features(scores, n_select):
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.argsort(-scores, kind="stable")
    keep = order[:min(int(n_select), len(scores))]
    return SelectionMask(keep, scores)

"""Small convolutional regressors: forward pass, backpropagation and plain SGD.

Only two fixed topologies are needed: the two-layer heat-map heads
(9x9 conv + ReLU, 5x5 conv) and the one-layer selector nets (dropout + 3x3
conv). Convolutions are "same" cross-correlations evaluated as one matrix
product over im2col columns; the columns of a fixed input are cached across
training iterations.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FORMAT_VERSION = 1
_MAGIC = b"SDTW"


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        o, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.bias.shape != (o,):
            raise ValueError("bias length must equal out channels")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def padding(self):
        return self.weight.shape[2] // 2, self.weight.shape[3] // 2

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng, out_ch, in_ch, k, activation, std=0.01):
        w = rng.normal(0.0, std, size=(out_ch, in_ch, k, k))
        return cls(w, np.zeros(out_ch), activation)


def im2col(x, kh, kw):
    """Columns ``(C, kh*kw, H*W)`` of a zero-padded same-size correlation."""
    C, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((C, H + 2 * ph, W + 2 * pw))
    xp[:, ph:ph + H, pw:pw + W] = x
    win = sliding_window_view(xp, (H, W), axis=(1, 2))  # (C, kh, kw, H, W)
    return win.reshape(C, kh * kw, H * W)


def conv_forward(layer: ConvLayer, x, cols=None):
    """Pre-activation output of a same-size cross-correlation.

    Returns ``(y, cols)``; callers may cache ``cols`` when the input is reused.
    """
    C, H, W = x.shape
    if C != layer.in_channels:
        raise ValueError(f"layer expects {layer.in_channels} input channels, got {C}")
    O, _, kh, kw = layer.weight.shape
    if cols is None:
        cols = im2col(x, kh, kw)
    y = layer.weight.reshape(O, -1) @ cols.reshape(C * kh * kw, H * W)
    y += layer.bias[:, None]
    return y.reshape(O, H, W), cols


def conv_backward(layer: ConvLayer, g, cols, need_input_grad=True):
    """Gradients of a same-size cross-correlation given d(loss)/d(output) ``g``."""
    O, H, W = g.shape
    _, C, kh, kw = layer.weight.shape
    g2 = g.reshape(O, H * W)
    dk = (g2 @ cols.reshape(C * kh * kw, H * W).T).reshape(layer.weight.shape)
    db = g2.sum(axis=1)
    dx = None
    if need_input_grad:
        dcols = (layer.weight.reshape(O, -1).T @ g2).reshape(C, kh, kw, H, W)
        ph, pw = kh // 2, kw // 2
        dxp = np.zeros((C, H + 2 * ph, W + 2 * pw))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + H, j:j + W] += dcols[:, i, j]
        dx = dxp[:, ph:ph + H, pw:pw + W]
    return dk, db, dx


class _Net:
    layers: list
    training: bool = False

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def copy(self):
        import copy

        return copy.deepcopy(self)

    def weight_norm_sq(self):
        return float(sum(np.sum(l.weight ** 2) for l in self.layers))

    @property
    def in_channels(self):
        return self.layers[0].in_channels


class HeadNet(_Net):
    """9x9 conv + ReLU followed by a 5x5 conv to one heat-map channel."""

    def __init__(self, layer1: ConvLayer, layer2: ConvLayer, seed=None):
        if layer2.in_channels != layer1.out_channels or layer2.out_channels != 1:
            raise ValueError("inconsistent head layer shapes")
        self.layers = [layer1, layer2]
        self.seed = seed
        self.training = False

    @classmethod
    def create(cls, in_ch, hidden=8, seed=0, std=0.01, k1=9, k2=5):
        rng = np.random.default_rng(seed)
        l1 = ConvLayer.init(rng, hidden, in_ch, k1, "relu", std)
        l2 = ConvLayer.init(rng, 1, hidden, k2, "identity", std)
        return cls(l1, l2, seed=seed)

    def forward(self, x, cache=None):
        l1, l2 = self.layers
        cols = cache.get("cols") if cache is not None else None
        z1, cols = conv_forward(l1, x, cols)
        a1 = np.maximum(z1, 0.0) if l1.activation == "relu" else z1
        z2, a1cols = conv_forward(l2, a1)
        if cache is not None:
            cache.update(cols=cols, z1=z1, a1cols=a1cols)
        return z2[0]

    def backward(self, grad_out, cache):
        l1, l2 = self.layers
        dk2, db2, da1 = conv_backward(l2, grad_out[None], cache["a1cols"])
        dz1 = da1 * (cache["z1"] > 0) if l1.activation == "relu" else da1
        dk1, db1, _ = conv_backward(l1, dz1, cache["cols"], need_input_grad=False)
        return [dk1, db1, dk2, db2]


class SelectorNet(_Net):
    """Dropout on the input stack followed by a 3x3 conv to one channel.

    Dropout uses inverted scaling, so eval mode is a plain identity.
    """

    def __init__(self, conv: ConvLayer, dropout_ratio=0.3, seed=None):
        if conv.out_channels != 1:
            raise ValueError("selector conv must have one output channel")
        self.layers = [conv]
        self.dropout_ratio = float(dropout_ratio)
        self.seed = seed
        self.training = False
        self.trained = False
        self._rng = np.random.default_rng(seed)

    @classmethod
    def create(cls, in_ch, dropout_ratio=0.3, seed=0, std=0.01, k=3):
        rng = np.random.default_rng(seed)
        conv = ConvLayer.init(rng, 1, in_ch, k, "identity", std)
        return cls(conv, dropout_ratio, seed=None if seed is None else seed + 1)

    @property
    def conv(self):
        return self.layers[0]

    def dropout_mask(self, shape):
        keep = 1.0 - self.dropout_ratio
        return (self._rng.random(shape) < keep) / keep

    def forward(self, x, cache=None, mask=None):
        if self.training and self.dropout_ratio > 0:
            if mask is None:
                mask = self.dropout_mask(x.shape)
            x = x * mask
            cols = None
        else:
            mask = None
            cols = cache.get("cols") if cache is not None else None
        z, cur = conv_forward(self.conv, x, cols)
        if cache is not None:
            if mask is None:
                cache["cols"] = cur
            cache.update(cur_cols=cur, mask=mask)
        return z[0]

    def backward(self, grad_out, cache):
        dk, db, _ = conv_backward(self.conv, grad_out[None], cache["cur_cols"],
                                  need_input_grad=False)
        return [dk, db]


@dataclass
class TrainSpec:
    iterations: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")


def loss_and_grads(net, x, target, weight=None, cache=None):
    """Weighted squared loss ``sum(weight * (net(x) - target)**2)`` and its
    parameter gradients (no weight decay)."""
    if cache is None:
        cache = {}
    out = net.forward(x, cache)
    if out.shape != target.shape:
        raise ValueError(f"output {out.shape} vs target {target.shape}")
    r = out - target
    if weight is None:
        loss = float(np.sum(r * r))
        g = 2.0 * r
    else:
        loss = float(np.sum(weight * r * r))
        g = 2.0 * weight * r
    return loss, net.backward(g, cache)


def sgd_step(net, grads, lr, weight_decay=0.0):
    for layer, (dk, db) in zip(net.layers, zip(grads[0::2], grads[1::2])):
        if weight_decay:
            dk = dk + 2.0 * weight_decay * layer.weight
        layer.weight -= lr * dk
        layer.bias -= lr * db


def backward_and_step(net, x, target, spec: TrainSpec, weight=None, cache=None):
    """One SGD step; returns the loss before the step (decay term included)."""
    loss, grads = loss_and_grads(net, x, target, weight, cache)
    if spec.weight_decay:
        loss += spec.weight_decay * net.weight_norm_sq()
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite training loss ({loss}); learning rate {spec.lr:g} is probably too high")
    sgd_step(net, grads, spec.lr, spec.weight_decay)
    return loss


def train(net, x, target, spec: TrainSpec, weight=None):
    """Run ``spec.iterations`` SGD steps in place. Returns ``(net, losses)``."""
    losses = []
    cache = {}
    prev_mode = net.training
    net.training = isinstance(net, SelectorNet)
    try:
        for _ in range(spec.iterations):
            losses.append(backward_and_step(net, x, target, spec, weight, cache))
    finally:
        net.training = prev_mode
    if isinstance(net, SelectorNet) and spec.iterations > 0:
        net.trained = True
    return net, losses


def predict(net, x):
    """Eval-mode forward pass."""
    prev = net.training
    net.training = False
    try:
        return net.forward(x)
    finally:
        net.training = prev


def save_net(net, fp_or_path):
    """Serialize weights: magic, u32 header length, JSON header, raw float64 LE."""
    header = {
        "version": FORMAT_VERSION,
        "kind": type(net).__name__,
        "seed": net.seed,
        "layers": [{"shape": list(l.weight.shape), "activation": l.activation}
                   for l in net.layers],
    }
    if isinstance(net, SelectorNet):
        header["dropout_ratio"] = net.dropout_ratio
        header["trained"] = net.trained
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for l in net.layers:
        buf.write(l.weight.astype("<f8").tobytes())
        buf.write(l.bias.astype("<f8").tobytes())
    data = buf.getvalue()
    if hasattr(fp_or_path, "write"):
        fp_or_path.write(data)
    else:
        with open(fp_or_path, "wb") as fh:
            fh.write(data)
    return data


def load_net(fp_or_path):
    if hasattr(fp_or_path, "read"):
        data = fp_or_path.read()
    elif isinstance(fp_or_path, (bytes, bytearray)):
        data = bytes(fp_or_path)
    else:
        with open(fp_or_path, "rb") as fh:
            data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError("not a serialized net (bad magic)")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported net format version {header.get('version')}")
    off = 8 + hlen
    layers = []
    for spec in header["layers"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape))
        w = np.frombuffer(data, "<f8", n, off).reshape(shape).astype(np.float64)
        off += 8 * n
        b = np.frombuffer(data, "<f8", shape[0], off).astype(np.float64)
        off += 8 * shape[0]
        layers.append(ConvLayer(w, b, spec["activation"]))
    if header["kind"] == "HeadNet":
        return HeadNet(*layers, seed=header["seed"])
    if header["kind"] == "SelectorNet":
        net = SelectorNet(layers[0], header["dropout_ratio"], seed=header["seed"])
        net.trained = header.get("trained", False)
        return net
    raise ValueError(f"unknown net kind {header['kind']!r}")

"""Layers with hand-written backward passes, network assembly and the
conv feature-map taps read by the carving step."""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Rng, Tensor, as_tensor, read_blob, write_blob

KINDS = ("conv", "relu", "maxpool", "fullyconnected", "dropout")
CHECKPOINT_MAGIC = b"CVNET1"


class ShapeChainError(ValueError):
    pass


class StaleTraceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    in_dim: int = 0
    out_dim: int = 0
    keep_prob: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError(f"{self.kind}: stride must be >= 1")
        if self.padding < 0:
            raise ValueError(f"{self.kind}: padding must be >= 0")
        if self.kind == "conv" and min(self.in_channels, self.out_channels, self.kernel) < 1:
            raise ValueError("conv: channels and kernel must be positive")
        if self.kind == "maxpool" and self.window < 1:
            raise ValueError("maxpool: window must be positive")
        if self.kind == "fullyconnected" and min(self.in_dim, self.out_dim) < 1:
            raise ValueError("fullyconnected: dims must be positive")
        if self.kind == "dropout" and not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("dropout: keep_prob must be in (0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v != LayerSpec.__dataclass_fields__[k].default
                or k == "kind"}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        return cls(**d)


def conv(in_channels, out_channels, kernel, stride=1, padding=0) -> LayerSpec:
    return LayerSpec("conv", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window, stride=None) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=stride or window)


def fc(in_dim, out_dim) -> LayerSpec:
    return LayerSpec("fullyconnected", in_dim=in_dim, out_dim=out_dim)


def dropout(keep_prob=0.5) -> LayerSpec:
    return LayerSpec("dropout", keep_prob=keep_prob)


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-image output shape of ``spec`` given per-image ``in_shape``."""
    if spec.kind == "conv":
        if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
            raise ShapeChainError(f"conv expects [{spec.in_channels}, H, W], got {list(in_shape)}")
        _, h, w = in_shape
        ho = _conv_out(h, spec.kernel, spec.stride, spec.padding)
        wo = _conv_out(w, spec.kernel, spec.stride, spec.padding)
        if ho < 1 or wo < 1:
            raise ShapeChainError(f"conv kernel {spec.kernel} too large for input {list(in_shape)}")
        return (spec.out_channels, ho, wo)
    if spec.kind == "maxpool":
        if len(in_shape) != 3:
            raise ShapeChainError(f"maxpool expects [C, H, W], got {list(in_shape)}")
        c, h, w = in_shape
        ho = _conv_out(h, spec.window, spec.stride, 0)
        wo = _conv_out(w, spec.window, spec.stride, 0)
        if ho < 1 or wo < 1:
            raise ShapeChainError(f"maxpool window {spec.window} too large for input {list(in_shape)}")
        return (c, ho, wo)
    if spec.kind == "fullyconnected":
        flat = int(np.prod(in_shape))
        if flat != spec.in_dim:
            raise ShapeChainError(f"fullyconnected expects {spec.in_dim} inputs, got {list(in_shape)}")
        return (spec.out_dim,)
    return tuple(in_shape)


# ---------------------------------------------------------------- kernels

def _windows(x: Tensor, k: int, s: int) -> Tensor:
    # (B, C, Ho, Wo, k, k) strided view, no copy
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def conv_forward(x: Tensor, W: Tensor, b: Tensor, stride: int, padding: int):
    B = x.shape[0]
    O, C, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * ho * wo, C * k * k)
    out = cols @ W.reshape(O, -1).T + b
    out = np.ascontiguousarray(out.reshape(B, ho, wo, O).transpose(0, 3, 1, 2))
    return out, (cols, xp.shape)


def conv_backward(dout: Tensor, cache, W: Tensor, stride: int, padding: int):
    cols, padded_shape = cache
    B, O, ho, wo = dout.shape
    _, C, k, _ = W.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(B * ho * wo, O)
    dW = (dflat.T @ cols).reshape(W.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ W.reshape(O, -1)).reshape(B, ho, wo, C, k, k).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros(padded_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dW, db


def maxpool_forward(x: Tensor, window: int, stride: int):
    win = _windows(x, window, stride)
    B, C, ho, wo = win.shape[:4]
    flat = win.reshape(B, C, ho, wo, window * window)
    # argmax returns the first maximum in row-major window order
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (arg, x.shape)


def maxpool_backward(dout: Tensor, cache, window: int, stride: int):
    arg, in_shape = cache
    _, _, ho, wo = dout.shape
    dx = np.zeros(in_shape)
    for i in range(window):
        for j in range(window):
            hit = arg == (i * window + j)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(hit, dout, 0.0)
    return dx


# ---------------------------------------------------------------- network

@dataclass
class ForwardTrace:
    caches: list[Any]
    taps: dict[str, Tensor]
    batch_size: int
    version: int
    train: bool


@dataclass
class Network:
    specs: list[LayerSpec]
    input_shape: tuple[int, ...]
    params: dict[str, Tensor] = field(default_factory=dict)
    shapes: list[tuple[int, ...]] = field(default_factory=list)
    conv_taps: list[str] = field(default_factory=list)
    mode: str = "train"
    version: int = 0

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "inference"
        return self

    def layer_name(self, i: int) -> str:
        return f"{self.specs[i].kind}{i}"

    def tap_layer(self, tap_id: str) -> int:
        return int(tap_id[len("conv"):])

    def spec_hash(self) -> str:
        return spec_hash(self.specs, self.input_shape)

    def num_feature_maps(self) -> int:
        return sum(self.specs[self.tap_layer(t)].out_channels for t in self.conv_taps)

    def copy(self) -> "Network":
        net = Network(list(self.specs), tuple(self.input_shape),
                      {k: v.copy() for k, v in self.params.items()},
                      list(self.shapes), list(self.conv_taps), self.mode, self.version)
        return net


def spec_hash(specs: list[LayerSpec], input_shape) -> str:
    payload = json.dumps({"input_shape": list(input_shape),
                          "layers": [s.to_dict() for s in specs]}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def build_network(specs: list[LayerSpec], rng: Rng, input_shape=None) -> Network:
    """Check that ``specs`` chain and initialize parameters.

    Conv and fully-connected weights are He-scaled Gaussians, biases zero.
    ``input_shape`` is the per-image ``[C, H, W]`` (or ``[D]``); it may be
    omitted when the first layer is fully connected.
    """
    if not specs:
        raise ShapeChainError("network needs at least one layer")
    if input_shape is None:
        if specs[0].kind != "fullyconnected":
            raise ShapeChainError("input_shape is required when the first layer is not fullyconnected")
        input_shape = (specs[0].in_dim,)
    shape = tuple(int(d) for d in input_shape)
    net = Network(list(specs), shape)
    shapes = []
    for i, spec in enumerate(specs):
        try:
            shape = output_shape(spec, shape)
        except ShapeChainError as exc:
            prev = f"layer {i - 1} ({specs[i - 1].kind})" if i else "the input"
            raise ShapeChainError(f"layer {i} ({spec.kind}) does not follow {prev}: {exc}") from None
        shapes.append(shape)
        name = net.layer_name(i)
        if spec.kind == "conv":
            fan_in = spec.in_channels * spec.kernel ** 2
            net.params[f"{name}.W"] = rng.normal(
                (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), math.sqrt(2.0 / fan_in))
            net.params[f"{name}.b"] = np.zeros(spec.out_channels)
            net.conv_taps.append(f"conv{i}")
        elif spec.kind == "fullyconnected":
            net.params[f"{name}.W"] = rng.normal((spec.out_dim, spec.in_dim), math.sqrt(2.0 / spec.in_dim))
            net.params[f"{name}.b"] = np.zeros(spec.out_dim)
    if len(shapes[-1]) != 1:
        raise ShapeChainError(f"final layer must produce a vector of class scores, got {list(shapes[-1])}")
    net.shapes = shapes
    return net


def _tap_source(net: Network, i: int) -> int:
    """Layer whose output is the post-activation map for conv layer ``i``."""
    nxt = i + 1
    if nxt < len(net.specs) and net.specs[nxt].kind == "relu":
        return nxt
    return i


def forward(net: Network, batch, rng: Rng | None = None):
    x = as_tensor(batch)
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"batch shape {list(x.shape)} does not match network input {list(net.input_shape)}")
    train = net.mode == "train"
    tap_at = {_tap_source(net, net.tap_layer(t)): t for t in net.conv_taps}
    caches: list[Any] = []
    taps: dict[str, Tensor] = {}
    for i, spec in enumerate(net.specs):
        name = net.layer_name(i)
        if spec.kind == "conv":
            x, cache = conv_forward(x, net.params[f"{name}.W"], net.params[f"{name}.b"],
                                    spec.stride, spec.padding)
        elif spec.kind == "relu":
            cache = x > 0
            x = np.where(cache, x, 0.0)
        elif spec.kind == "maxpool":
            x, cache = maxpool_forward(x, spec.window, spec.stride)
        elif spec.kind == "fullyconnected":
            flat = x.reshape(x.shape[0], -1)
            cache = (flat, x.shape)
            x = flat @ net.params[f"{name}.W"].T + net.params[f"{name}.b"]
        else:  # dropout
            if train and spec.keep_prob < 1.0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                cache = (rng.random(x.shape) < spec.keep_prob) / spec.keep_prob
                x = x * cache
            else:
                cache = None
        caches.append(cache)
        if i in tap_at:
            taps[tap_at[i]] = x
    return x, ForwardTrace(caches, taps, x.shape[0], net.version, train)


def backward(net: Network, trace: ForwardTrace, dlogits) -> dict[str, Tensor]:
    """Gradients of every parameter plus ``"input"`` for the upstream ``dlogits``."""
    dx = as_tensor(dlogits)
    if trace.version != net.version or len(trace.caches) != len(net.specs):
        raise StaleTraceError("trace does not belong to the current network parameters")
    if dx.shape != (trace.batch_size, net.num_classes):
        raise ValueError(f"dlogits shape {list(dx.shape)} does not match trace "
                         f"[{trace.batch_size}, {net.num_classes}]")
    grads: dict[str, Tensor] = {}
    for i in range(len(net.specs) - 1, -1, -1):
        spec, cache, name = net.specs[i], trace.caches[i], net.layer_name(i)
        if spec.kind == "conv":
            dx, grads[f"{name}.W"], grads[f"{name}.b"] = conv_backward(
                dx, cache, net.params[f"{name}.W"], spec.stride, spec.padding)
        elif spec.kind == "relu":
            dx = np.where(cache, dx, 0.0)
        elif spec.kind == "maxpool":
            dx = maxpool_backward(dx, cache, spec.window, spec.stride)
        elif spec.kind == "fullyconnected":
            flat, in_shape = cache
            grads[f"{name}.W"] = dx.T @ flat
            grads[f"{name}.b"] = dx.sum(axis=0)
            dx = (dx @ net.params[f"{name}.W"]).reshape(in_shape)
        elif cache is not None:
            dx = dx * cache
    grads["input"] = dx
    return grads


def extract_feature_responses(trace: ForwardTrace) -> dict[str, Tensor]:
    """Spatial mean of every post-activation conv map: ``tap -> [B, channels]``."""
    return {tap: fmap.mean(axis=(2, 3)) for tap, fmap in trace.taps.items()}


def predict_logits(net: Network, images, batch_size: int = 256) -> Tensor:
    """Inference-mode logits for a stack of images, in fixed-size chunks."""
    mode = net.mode
    net.eval()
    try:
        out = [forward(net, images[i:i + batch_size])[0] for i in range(0, len(images), batch_size)]
    finally:
        net.mode = mode
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- presets

def mini_alexnet(num_classes: int, in_channels: int = 1, image_size: int = 32,
                 width: int = 16, hidden: int = 64, keep_prob: float = 0.5) -> list[LayerSpec]:
    """Three conv/relu/maxpool blocks and two fully connected layers."""
    size = image_size
    specs = [conv(in_channels, width, 5, padding=2), relu(), maxpool(2)]
    size //= 2
    specs += [conv(width, 2 * width, 3, padding=1), relu(), maxpool(2)]
    size //= 2
    specs += [conv(2 * width, 2 * width, 3, padding=1), relu(), maxpool(2)]
    size //= 2
    specs += [fc(2 * width * size * size, hidden), relu(), dropout(keep_prob), fc(hidden, num_classes)]
    return specs


def alexnet8(num_classes: int, in_channels: int = 3, image_size: int = 227,
             channels=(96, 256, 384, 384, 256), hidden: int = 4096,
             keep_prob: float = 0.5) -> list[LayerSpec]:
    """Five conv and three fully connected layers in the AlexNet arrangement
    (no local response normalization)."""
    c1, c2, c3, c4, c5 = channels
    specs = [conv(in_channels, c1, 11, stride=4), relu(), maxpool(3, 2),
             conv(c1, c2, 5, padding=2), relu(), maxpool(3, 2),
             conv(c2, c3, 3, padding=1), relu(),
             conv(c3, c4, 3, padding=1), relu(),
             conv(c4, c5, 3, padding=1), relu(), maxpool(3, 2)]
    shape: tuple[int, ...] = (in_channels, image_size, image_size)
    for s in specs:
        shape = output_shape(s, shape)
    flat = int(np.prod(shape))
    specs += [fc(flat, hidden), relu(), dropout(keep_prob),
              fc(hidden, hidden), relu(), dropout(keep_prob),
              fc(hidden, num_classes)]
    return specs


PRESETS = {"mini-alexnet": mini_alexnet, "alexnet8": alexnet8}


def preset(name: str, num_classes: int, in_channels: int, image_size: int, **kwargs) -> list[LayerSpec]:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(num_classes, in_channels=in_channels, image_size=image_size, **kwargs)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, net: Network, extra: dict[str, Any] | None = None,
                    extra_tensors: dict[str, Tensor] | None = None) -> None:
    """Write ``net`` (and optional training state) atomically.

    Layout: ``CVNET1``, u32 header length, JSON header, one tensor blob per
    entry of ``header["tensors"]``, then a sha256 digest of everything before.
    """
    extra_tensors = extra_tensors or {}
    names = list(net.params) + [f"extra/{k}" for k in extra_tensors]
    header = {
        "input_shape": list(net.input_shape),
        "layers": [s.to_dict() for s in net.specs],
        "spec_hash": net.spec_hash(),
        "tensors": names,
        "extra": extra or {},
    }
    body = io.BytesIO()
    raw = json.dumps(header, sort_keys=True).encode()
    body.write(CHECKPOINT_MAGIC)
    body.write(struct.pack("<I", len(raw)))
    body.write(raw)
    for k in net.params:
        write_blob(body, net.params[k])
    for k in extra_tensors:
        write_blob(body, extra_tensors[k])
    data = body.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data + hashlib.sha256(data).digest())
    tmp.replace(path)


def load_checkpoint(path, expected_hash: str | None = None):
    """Return ``(net, extra, extra_tensors)``; nothing is returned on any defect."""
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 32 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a CVNET1 checkpoint")
    data, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(data).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    stream = io.BytesIO(data)
    stream.read(len(CHECKPOINT_MAGIC))
    (n,) = struct.unpack("<I", stream.read(4))
    try:
        header = json.loads(stream.read(n))
        specs = [LayerSpec.from_dict(d) for d in header["layers"]]
        tensors = {name: read_blob(stream) for name in header["tensors"]}
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    found = spec_hash(specs, header["input_shape"])
    if found != header["spec_hash"]:
        raise CheckpointError(f"{path}: stored spec hash does not match its layers")
    if expected_hash is not None and found != expected_hash:
        raise CheckpointError(f"{path}: architecture hash {found[:12]} != expected {expected_hash[:12]}")
    net = build_network(specs, Rng(0), tuple(header["input_shape"]))
    for k in net.params:
        if k not in tensors or tensors[k].shape != net.params[k].shape:
            raise CheckpointError(f"{path}: parameter {k} missing or misshapen")
        net.params[k] = tensors[k]
    extra_tensors = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    return net, header["extra"], extra_tensors

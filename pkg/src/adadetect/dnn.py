"""A small trainable convolutional classifier with deep-layer taps.

Everything runs on float64 numpy. Layers are named conv1, relu1, pool1, ...
in spec order; activations tapped at a layer are the flattened
post-nonlinearity outputs, so RELU and max-pool taps are nonnegative by
construction. Forward, gradients, and training are deterministic functions of
(weights, input, seed).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DeadLayer,
    DimensionMismatch,
    EmptyDataset,
    LabelOutOfRange,
    NotFollowedByParametricLayer,
    ShapeMismatch,
    UnknownTap,
    UnreadableArtifact,
)
from .datasets import LabeledDataset


@dataclass(frozen=True)
class Conv:
    kernel: int
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool:
    window: int


@dataclass(frozen=True)
class Dense:
    out_dim: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


_KIND_NAMES = {Conv: "conv", MaxPool: "pool", Dense: "fc", Relu: "relu", Softmax: "softmax"}


@dataclass
class NetworkSpec:
    """Ordered layer descriptors plus the input shape and class count."""

    input_shape: tuple
    layers: tuple
    num_classes: int
    names: tuple = field(init=False)
    shapes: tuple = field(init=False)  # output shape after each layer

    def __post_init__(self):
        self.layers = tuple(self.layers)
        counters: dict = {}
        names = []
        for layer in self.layers:
            kind = _KIND_NAMES[type(layer)]
            counters[kind] = counters.get(kind, 0) + 1
            names.append(f"{kind}{counters[kind]}" if kind != "softmax" else "softmax")
        self.names = tuple(names)
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ShapeMismatch("final layer must be softmax")
        shapes = []
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = _out_shape(layer, shape)
            shapes.append(shape)
        self.shapes = tuple(shapes)
        if shapes[-1] != (self.num_classes,):
            raise ShapeMismatch(
                f"softmax output {shapes[-1]} does not match K={self.num_classes}"
            )

    def layer_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownTap(f"no layer named {name!r}") from None


def _out_shape(layer, shape):
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ShapeMismatch(f"conv needs (H,W,C) input, got {shape}")
        h, w, _ = shape
        oh = (h - layer.kernel) // layer.stride + 1
        ow = (w - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"conv kernel {layer.kernel} too large for {shape}")
        return (oh, ow, layer.out_channels)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ShapeMismatch(f"pool needs (H,W,C) input, got {shape}")
        h, w, c = shape
        if h % layer.window or w % layer.window:
            raise ShapeMismatch(f"pool window {layer.window} does not tile {shape}")
        return (h // layer.window, w // layer.window, c)
    if isinstance(layer, Dense):
        return (layer.out_dim,)
    # Relu / Softmax preserve shape
    return shape


@dataclass
class Network:
    spec: NetworkSpec
    params: list  # per layer: {"w": ..., "b": ...} for conv/fc, {} otherwise

    def copy(self) -> "Network":
        return Network(self.spec, [{k: v.copy() for k, v in p.items()} for p in self.params])


def lenet5_spec(input_shape=(28, 28, 1), num_classes=10) -> NetworkSpec:
    """conv(5,6)-relu-pool(2)-conv(5,16)-relu-pool(2)-fc120-relu-fc84-relu-fcK-softmax."""
    return NetworkSpec(
        input_shape=input_shape,
        layers=(
            Conv(5, 6), Relu(), MaxPool(2),
            Conv(5, 16), Relu(), MaxPool(2),
            Dense(120), Relu(),
            Dense(84), Relu(),
            Dense(num_classes), Softmax(),
        ),
        num_classes=num_classes,
    )


def reduced_cifar_spec(input_shape=(32, 32, 3), num_classes=10) -> NetworkSpec:
    """Small color-image net: two conv/pool stages and one hidden dense layer."""
    return NetworkSpec(
        input_shape=input_shape,
        layers=(
            Conv(5, 8), Relu(), MaxPool(2),
            Conv(5, 16), Relu(), MaxPool(2),
            Dense(64), Relu(),
            Dense(num_classes), Softmax(),
        ),
        num_classes=num_classes,
    )


def default_taps(spec: NetworkSpec) -> list:
    """Max-pool layers plus the penultimate RELU (the one feeding the last fc)."""
    taps = [n for n, l in zip(spec.names, spec.layers) if isinstance(l, MaxPool)]
    last_fc = max(i for i, l in enumerate(spec.layers) if isinstance(l, Dense))
    relus = [i for i, l in enumerate(spec.layers) if isinstance(l, Relu) and i < last_fc]
    if relus:
        taps.append(spec.names[max(relus)])
    return taps


def initialize(spec: NetworkSpec, seed: int) -> Network:
    """Fan-in-scaled uniform weights, zero biases, seed-controlled."""
    rng = np.random.default_rng(seed)
    params = []
    shape = tuple(spec.input_shape)
    for layer in spec.layers:
        if isinstance(layer, Conv):
            fan_in = layer.kernel * layer.kernel * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(layer.kernel, layer.kernel, shape[2], layer.out_channels))
            params.append({"w": w, "b": np.zeros(layer.out_channels)})
        elif isinstance(layer, Dense):
            fan_in = int(np.prod(shape))
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, layer.out_dim))
            params.append({"w": w, "b": np.zeros(layer.out_dim)})
        else:
            params.append({})
        shape = _out_shape(layer, shape)
    return Network(spec, params)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _conv_forward(x, w, b, stride):
    kh, kw, _, _ = w.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, OH, OW, C, KH, KW)
    out = np.tensordot(win, w.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    return out + b, win


def _conv_backward(dy, win, x_shape, w, stride):
    # dy: (N, OH, OW, OC); win: (N, OH, OW, C, KH, KW)
    dw = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2]))  # (C, KH, KW, OC)
    dw = dw.transpose(1, 2, 0, 3)
    db = dy.sum(axis=(0, 1, 2))
    dx = np.zeros(x_shape)
    kh, kw = w.shape[0], w.shape[1]
    oh, ow = dy.shape[1], dy.shape[2]
    for ki in range(kh):
        for kj in range(kw):
            # dy (N,OH,OW,OC) x w[ki,kj] (C,OC) -> (N,OH,OW,C)
            patch = np.tensordot(dy, w[ki, kj], axes=([3], [1]))
            dx[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride, :] += patch
    return dx, dw, db


def _pool_forward(x, window):
    n, h, w, c = x.shape
    oh, ow = h // window, w // window
    xr = x.reshape(n, oh, window, ow, window, c).transpose(0, 1, 3, 2, 4, 5)
    xr = xr.reshape(n, oh, ow, window * window, c)
    idx = np.argmax(xr, axis=3)
    out = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, idx


def _pool_backward(dy, idx, x_shape, window):
    n, h, w, c = x_shape
    oh, ow = h // window, w // window
    dxr = np.zeros((n, oh, ow, window * window, c))
    np.put_along_axis(dxr, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    dx = dxr.reshape(n, oh, ow, window, window, c).transpose(0, 1, 3, 2, 4, 5)
    return dx.reshape(n, h, w, c)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_pass(net: Network, x: np.ndarray, want_cache: bool):
    """Run the net on a batch; returns (posteriors, logits, per-layer outputs, caches)."""
    outputs = []
    caches = []
    cur = x
    for layer, p in zip(net.spec.layers, net.params):
        if isinstance(layer, Conv):
            cur, win = _conv_forward(cur, p["w"], p["b"], layer.stride)
            caches.append(win if want_cache else None)
        elif isinstance(layer, MaxPool):
            cur, idx = _pool_forward(cur, layer.window)
            caches.append(idx)
        elif isinstance(layer, Dense):
            flat = cur.reshape(cur.shape[0], -1)
            caches.append(flat if want_cache else None)
            cur = flat @ p["w"] + p["b"]
        elif isinstance(layer, Relu):
            cur = np.maximum(cur, 0.0)
            caches.append(None)
        else:  # Softmax
            caches.append(None)
            logits = cur
            cur = _softmax(cur)
        outputs.append(cur)
    return outputs[-1], logits, outputs, caches


def _backward_pass(net: Network, x, outputs, caches, dlogits, want_param_grads: bool):
    """Backpropagate d(loss)/d(logits) to the input; optionally collect weight grads."""
    grads = [None] * len(net.params) if want_param_grads else None
    d = dlogits
    for i in range(len(net.spec.layers) - 1, -1, -1):
        layer = net.spec.layers[i]
        p = net.params[i]
        below = x if i == 0 else outputs[i - 1]
        if isinstance(layer, Softmax):
            continue  # dlogits already folded in by the objective
        elif isinstance(layer, Dense):
            flat = caches[i]
            dw = flat.T @ d
            db = d.sum(axis=0)
            if want_param_grads:
                grads[i] = {"w": dw, "b": db}
            d = (d @ p["w"].T).reshape(below.shape)
        elif isinstance(layer, Relu):
            d = d * (outputs[i] > 0.0)
        elif isinstance(layer, MaxPool):
            d = _pool_backward(d, caches[i], below.shape, layer.window)
        elif isinstance(layer, Conv):
            dx, dw, db = _conv_backward(d, caches[i], below.shape, p["w"], layer.stride)
            if want_param_grads:
                grads[i] = {"w": dw, "b": db}
            d = dx
    return d, grads


def _as_batch(net: Network, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if x.shape == tuple(net.spec.input_shape):
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == tuple(net.spec.input_shape):
        return x, False
    raise ShapeMismatch(f"input {x.shape} does not match {net.spec.input_shape}")


def forward(net: Network, x: np.ndarray, taps=()):
    """Posterior plus flattened post-nonlinearity activations for the tap layers.

    Accepts one image (H,W,C) or a batch (N,H,W,C); posteriors come back with
    the matching arity, activations as {tap: vector or (N,d) matrix}.
    """
    batch, single = _as_batch(net, x)
    for t in taps:
        net.spec.layer_index(t)
    post, _, outputs, _ = _forward_pass(net, batch, want_cache=False)
    acts = {}
    for t in taps:
        out = outputs[net.spec.layer_index(t)]
        acts[t] = out.reshape(out.shape[0], -1)
    if single:
        return post[0], {t: a[0] for t, a in acts.items()}
    return post, acts


def decide(net: Network, x: np.ndarray):
    """Argmax class decision(s) for an image or batch."""
    post, _ = forward(net, x)
    return int(np.argmax(post)) if post.ndim == 1 else np.argmax(post, axis=1)


def forward_logits(net: Network, x: np.ndarray):
    """(posteriors, pre-softmax logits) for a batch; used by margin-based attacks."""
    batch, single = _as_batch(net, x)
    post, logits, _, _ = _forward_pass(net, batch, want_cache=False)
    if single:
        return post[0], logits[0]
    return post, logits


def input_gradient(net: Network, x: np.ndarray, target_class: int, objective: str = "cross-entropy"):
    """Exact gradient of the chosen scalar objective w.r.t. the input pixels.

    objective "cross-entropy": -log softmax_{target}; "logit-margin":
    max_{j != target} logit_j - logit_target.
    """
    batch, single = _as_batch(net, x)
    targets = np.full(batch.shape[0], target_class, dtype=int)
    g = input_gradient_batch(net, batch, targets, objective)
    return g[0] if single else g


def input_gradient_batch(net: Network, x: np.ndarray, targets: np.ndarray, objective: str = "cross-entropy"):
    """Per-sample input gradients for a batch with per-sample target classes."""
    batch, _ = _as_batch(net, x)
    targets = np.asarray(targets, dtype=int)
    if targets.max(initial=0) >= net.spec.num_classes or targets.min(initial=0) < 0:
        raise DimensionMismatch("objective class out of range")
    post, logits, outputs, caches = _forward_pass(net, batch, want_cache=True)
    n = batch.shape[0]
    rows = np.arange(n)
    if objective == "cross-entropy":
        dlogits = post.copy()
        dlogits[rows, targets] -= 1.0
    elif objective == "logit-margin":
        masked = logits.copy()
        masked[rows, targets] = -np.inf
        rival = np.argmax(masked, axis=1)
        dlogits = np.zeros_like(logits)
        dlogits[rows, rival] += 1.0
        dlogits[rows, targets] -= 1.0
    elif objective == "logit-target":
        dlogits = np.zeros_like(logits)
        dlogits[rows, targets] = 1.0
    elif objective == "logit-sum":
        dlogits = np.ones_like(logits)
    else:
        raise DimensionMismatch(f"unknown objective {objective!r}")
    dx, _ = _backward_pass(net, batch, outputs, caches, dlogits, want_param_grads=False)
    return dx


def loss_and_accuracy(net: Network, data: LabeledDataset, batch_size: int = 512):
    """Mean cross-entropy and argmax accuracy over a dataset."""
    total, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        xb = data.images[start:start + batch_size]
        yb = data.labels[start:start + batch_size]
        post, _, _, _ = _forward_pass(net, xb, want_cache=False)
        p = np.clip(post[np.arange(len(yb)), yb], 1e-300, None)
        total += -np.log(p).sum()
        correct += int((np.argmax(post, axis=1) == yb).sum())
    return total / len(data), correct / len(data)


def train(
    net: Network,
    data: LabeledDataset,
    epochs: int,
    learning_rate: float,
    batch_size: int = 256,
    seed: int = 0,
    on_epoch=None,
) -> Network:
    """Mini-batch SGD on cross-entropy; returns an updated copy of the network.

    Deterministic given the seed (shuffling is the only randomness). The
    per-epoch mean training loss is passed to on_epoch(epoch, loss) when given.
    """
    if len(data) == 0:
        raise EmptyDataset("no training samples")
    if data.labels.max() >= net.spec.num_classes:
        raise LabelOutOfRange("label exceeds the network's class count")
    net = net.copy()
    rng = np.random.default_rng(seed)
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = data.images[idx]
            yb = data.labels[idx]
            post, _, outputs, caches = _forward_pass(net, xb, want_cache=True)
            b = len(idx)
            p = np.clip(post[np.arange(b), yb], 1e-300, None)
            epoch_loss += -np.log(p).sum()
            dlogits = post.copy()
            dlogits[np.arange(b), yb] -= 1.0
            dlogits /= b
            _, grads = _backward_pass(net, xb, outputs, caches, dlogits, want_param_grads=True)
            for pdict, g in zip(net.params, grads):
                if g is not None:
                    pdict["w"] -= learning_rate * g["w"]
                    pdict["b"] -= learning_rate * g["b"]
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss / n)
    return net


# ---------------------------------------------------------------------------
# outgoing-weight scores
# ---------------------------------------------------------------------------

def outgoing_weight_scores(net: Network, tap: str) -> np.ndarray:
    """Per-feature sums of outgoing |weight| into the next parametric layer.

    Pooling and RELU carry no weights, so the walk continues through them: a
    pooled unit's score is shared by every unit in its pooling window.
    Normalized so the largest score is 1.
    """
    spec = net.spec
    i = spec.layer_index(tap)
    tap_shape = spec.shapes[i]
    # index map from tap-space positions into the current layer's output space
    pool_factors = []  # accumulated pooling windows between tap and the parametric layer
    j = i + 1
    while j < len(spec.layers):
        layer = spec.layers[j]
        if isinstance(layer, Relu):
            j += 1
            continue
        if isinstance(layer, MaxPool):
            pool_factors.append(layer.window)
            j += 1
            continue
        if isinstance(layer, (Conv, Dense)):
            break
        raise NotFollowedByParametricLayer(f"tap {tap!r} reaches {spec.names[j]} first")
    else:
        raise NotFollowedByParametricLayer(f"tap {tap!r} has no downstream parametric layer")

    in_shape = spec.shapes[j - 1] if j > 0 else spec.input_shape
    p = net.params[j]
    layer = spec.layers[j]
    if isinstance(layer, Dense):
        sums = np.abs(p["w"]).sum(axis=1).reshape(in_shape)
    else:  # Conv
        a = np.abs(p["w"]).sum(axis=3)  # (KH, KW, C)
        oh, ow, _ = spec.shapes[j]
        sums = np.zeros(in_shape)
        for ki in range(layer.kernel):
            for kj in range(layer.kernel):
                sums[ki:ki + layer.stride * oh:layer.stride,
                     kj:kj + layer.stride * ow:layer.stride, :] += a[ki, kj]

    # undo the pooling hops: each tap unit inherits its pooled unit's sum
    for win in reversed(pool_factors):
        sums = np.repeat(np.repeat(sums, win, axis=0), win, axis=1)
    if sums.shape != tuple(tap_shape):
        raise DimensionMismatch(f"score shape {sums.shape} vs tap shape {tap_shape}")
    flat = sums.reshape(-1)
    top = flat.max()
    if top <= 0.0:
        raise DeadLayer(f"all outgoing weights from {tap!r} are zero")
    return flat / top


# ---------------------------------------------------------------------------
# persistence: JSON manifest + little-endian f32 blob
# ---------------------------------------------------------------------------

_LAYER_TO_JSON = {
    Conv: lambda l: {"kind": "conv", "kernel": l.kernel, "out_channels": l.out_channels, "stride": l.stride},
    MaxPool: lambda l: {"kind": "pool", "window": l.window},
    Dense: lambda l: {"kind": "fc", "out_dim": l.out_dim},
    Relu: lambda l: {"kind": "relu"},
    Softmax: lambda l: {"kind": "softmax"},
}


def _layer_from_json(d):
    kind = d["kind"]
    if kind == "conv":
        return Conv(d["kernel"], d["out_channels"], d.get("stride", 1))
    if kind == "pool":
        return MaxPool(d["window"])
    if kind == "fc":
        return Dense(d["out_dim"])
    if kind == "relu":
        return Relu()
    if kind == "softmax":
        return Softmax()
    raise UnreadableArtifact(f"unknown layer kind {kind!r}")


def save_network(net: Network, prefix: str, metadata: dict | None = None) -> None:
    """Write {prefix}.json manifest and {prefix}.bin f32 weight blob (W then b per layer)."""
    tensors = []
    blob = bytearray()
    for name, p in zip(net.spec.names, net.params):
        for key in ("w", "b"):
            if key in p:
                arr = p[key].astype("<f4")
                tensors.append({"layer": name, "tensor": key, "shape": list(p[key].shape), "offset": len(blob)})
                blob.extend(arr.tobytes())
    manifest = {
        "format": "adadetect-net-v1",
        "input_shape": list(net.spec.input_shape),
        "num_classes": net.spec.num_classes,
        "layers": [_LAYER_TO_JSON[type(l)](l) for l in net.spec.layers],
        "dtype": "<f4",
        "blob_bytes": len(blob),
        "tensors": tensors,
    }
    if metadata:
        manifest["metadata"] = metadata
    with open(prefix + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(prefix + ".bin", "wb") as f:
        f.write(bytes(blob))


def load_network(prefix: str) -> Network:
    try:
        with open(prefix + ".json") as f:
            manifest = json.load(f)
        with open(prefix + ".bin", "rb") as f:
            blob = f.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableArtifact(str(exc)) from exc
    if manifest.get("format") != "adadetect-net-v1":
        raise UnreadableArtifact(f"unexpected manifest format {manifest.get('format')!r}")
    if manifest["blob_bytes"] != len(blob):
        raise UnreadableArtifact(
            f"blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']} (offset 0)"
        )
    spec = NetworkSpec(
        input_shape=tuple(manifest["input_shape"]),
        layers=tuple(_layer_from_json(d) for d in manifest["layers"]),
        num_classes=manifest["num_classes"],
    )
    params = [dict() for _ in spec.layers]
    by_layer = {name: i for i, name in enumerate(spec.names)}
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape))
        start = t["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise UnreadableArtifact(f"tensor at offset {start} overruns blob")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).astype(np.float64)
        params[by_layer[t["layer"]]][t["tensor"]] = arr
    net = Network(spec, params)
    for layer, p in zip(spec.layers, params):
        if isinstance(layer, (Conv, Dense)) and ("w" not in p or "b" not in p):
            raise UnreadableArtifact("missing tensors for a parametric layer")
    return net

"""A closed-layer-set convolutional network with hand-written backprop.

Tensors are numpy arrays laid out batch x channels x height x width.
Parameters live in an ordered dict keyed ``"<layer>.weight"`` / ``"<layer>.bias"``;
conv weights are (out_ch, in_ch, k, k) and dense weights (out_dim, in_dim).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError
from .rng import SplitMix64, derive_seed


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


Layer = Union[Conv2d, ReLU, MaxPool2, Flatten, Dense]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv2d, ReLU, MaxPool2, Flatten, Dense)}


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after each layer; raises ShapeError naming the bad layer."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _layer_out_shape(i, layer, shape)
            out.append(shape)
        if len(shape) != 1:
            raise ShapeError(f"network must end in a flat vector, got {shape}")
        return out

    def learnable(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, (Conv2d, Dense))]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i in self.learnable():
            layer = self.layers[i]
            if isinstance(layer, Conv2d):
                shapes[f"{i}.weight"] = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
                shapes[f"{i}.bias"] = (layer.out_ch,)
            else:
                shapes[f"{i}.weight"] = (layer.out_dim, layer.in_dim)
                shapes[f"{i}.bias"] = (layer.out_dim,)
        return shapes

    def to_json(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"type": type(l).__name__, **asdict(l)} for l in self.layers],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NetworkSpec":
        layers = []
        for entry in doc["layers"]:
            entry = dict(entry)
            kind = entry.pop("type")
            if kind not in _LAYER_TYPES:
                raise ShapeError(f"unknown layer type {kind!r}")
            layers.append(_LAYER_TYPES[kind](**entry))
        return cls(tuple(doc["input_shape"]), tuple(layers))


def _layer_out_shape(i: int, layer, shape):
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ShapeError(f"layer {i} (Conv2d): expected {layer.in_ch} input channels, got {shape}")
        if layer.kernel % 2 == 0 or layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
            raise ShapeError(f"layer {i} (Conv2d): kernel must be odd, stride >= 1, padding >= 0")
        dims = []
        for extent in shape[1:]:
            span = extent + 2 * layer.padding - layer.kernel
            if span < 0 or span % layer.stride:
                raise ShapeError(f"layer {i} (Conv2d): non-integral output size for input {shape}")
            dims.append(span // layer.stride + 1)
        return (layer.out_ch, *dims)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, MaxPool2):
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"layer {i} (MaxPool2): needs even spatial extents, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_dim:
            raise ShapeError(f"layer {i} (Dense): expected input ({layer.in_dim},), got {shape}")
        return (layer.out_dim,)
    raise ShapeError(f"layer {i}: unknown layer {layer!r}")


def small_cnn(size: int, num_classes: int, channels=(16, 32, 64), hidden: int = 128) -> NetworkSpec:
    """Three conv/relu/pool stages then a two-layer dense head ("small-cnn-64" at size 64)."""
    layers = []
    in_ch = 1
    for ch in channels:
        layers += [Conv2d(in_ch, ch, 3, 1, 1), ReLU(), MaxPool2()]
        in_ch = ch
    side = size // 2 ** len(channels)
    layers += [Flatten(), Dense(in_ch * side * side, hidden), ReLU(), Dense(hidden, num_classes)]
    spec = NetworkSpec((1, size, size), tuple(layers))
    spec.shapes()
    return spec


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    spec.shapes()
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        layer_index = int(name.split(".")[0])
        draws = SplitMix64(derive_seed(seed, layer_index)).normal(int(np.prod(shape)))
        params[name] = (draws * np.sqrt(2.0 / fan_in)).reshape(shape).astype(dtype)
    return params


# --- layer kernels -------------------------------------------------------
# Activations travel channels-last (B x H x W x C) between layers so convolutions
# become single matmuls without transposes; forward() converts at the edges.


def _im2col(x, k, stride, pad):
    b, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # column order (ki, kj, c) matches the weight view in _taps_weight
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)
    return cols, ho, wo


def _taps_weight(w):
    """(out, in, k, k) -> (out, k*k*in) in the im2col column order."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _col2im(dcols, x_shape, k, stride, pad, ho, wo):
    b, h, w, c = x_shape
    taps = dcols.reshape(b, ho, wo, k, k, c)
    dx = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += taps[:, :, :, i, j]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad]
    return dx


def _conv_forward(layer: Conv2d, w, b, x):
    cols, ho, wo = _im2col(x, layer.kernel, layer.stride, layer.padding)
    out = cols @ _taps_weight(w).T + b
    return out.reshape(x.shape[0], ho, wo, layer.out_ch), (x.shape, cols, ho, wo)


def _conv_backward(layer: Conv2d, w, cache, dout, need_dx=True):
    x_shape, cols, ho, wo = cache
    dflat = dout.reshape(-1, layer.out_ch)
    k, cin = layer.kernel, layer.in_ch
    dw = (dflat.T @ cols).reshape(layer.out_ch, k, k, cin).transpose(0, 3, 1, 2)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    dcols = dflat @ _taps_weight(w)
    dx = _col2im(dcols, x_shape, k, layer.stride, layer.padding, ho, wo)
    return dx, np.ascontiguousarray(dw), db


_POOL_TAPS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool_forward(x):
    taps = [x[:, i::2, j::2] for i, j in _POOL_TAPS]
    out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))
    # index of the first maximum in row-major window order
    arg = np.full(out.shape, 3, dtype=np.int8)
    for t in (2, 1, 0):
        arg[taps[t] == out] = t
    return out, (x.shape, arg)


def _pool_backward(cache, dout):
    shape, arg = cache
    dx = np.zeros(shape, dtype=dout.dtype)
    for t, (i, j) in enumerate(_POOL_TAPS):
        dx[:, i::2, j::2] = np.where(arg == t, dout, 0)
    return dx


@dataclass
class ForwardCache:
    spec: NetworkSpec
    entries: list
    out_shape: tuple


def forward(spec: NetworkSpec, params: dict, batch: np.ndarray):
    """Run ``batch`` (B x C x H x W) through the network; returns (logits, cache)."""
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input: expected (B, {', '.join(map(str, spec.input_shape))}), got {batch.shape}")
    dtype = params[next(iter(params))].dtype if params else np.float32
    x = np.asarray(batch, dtype=dtype).transpose(0, 2, 3, 1)
    entries = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            x, c = _conv_forward(layer, params[f"{i}.weight"], params[f"{i}.bias"], x)
        elif isinstance(layer, ReLU):
            c = x > 0
            x = x * c
        elif isinstance(layer, MaxPool2):
            x, c = _pool_forward(x)
        elif isinstance(layer, Flatten):
            # flatten in channel-major order so dense weights see (C, H, W)
            c = x.shape
            x = x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            c = x
            x = x @ params[f"{i}.weight"].T + params[f"{i}.bias"]
        else:
            raise ShapeError(f"layer {i}: unknown layer {layer!r}")
        entries.append(c)
    return x, ForwardCache(spec, entries, x.shape)


def backward(spec: NetworkSpec, params: dict, cache: ForwardCache, dlogits: np.ndarray) -> dict:
    """Gradients of the loss w.r.t. every parameter, given d loss / d logits."""
    if cache.spec != spec or len(cache.entries) != len(spec.layers):
        raise ShapeError("stale forward cache: built for a different network spec")
    if tuple(dlogits.shape) != tuple(cache.out_shape):
        raise ShapeError(f"dlogits shape {dlogits.shape} does not match cached output {cache.out_shape}")
    grads = {}
    d = dlogits
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, c = spec.layers[i], cache.entries[i]
        if isinstance(layer, Conv2d):
            # nothing consumes the gradient w.r.t. the network input
            d, grads[f"{i}.weight"], grads[f"{i}.bias"] = _conv_backward(
                layer, params[f"{i}.weight"], c, d, need_dx=i > 0
            )
        elif isinstance(layer, ReLU):
            d = d * c
        elif isinstance(layer, MaxPool2):
            d = _pool_backward(c, d)
        elif isinstance(layer, Flatten):
            b, h, w, ch = c
            d = d.reshape(b, ch, h, w).transpose(0, 2, 3, 1)
        elif isinstance(layer, Dense):
            w = params[f"{i}.weight"]
            grads[f"{i}.weight"] = d.T @ c
            grads[f"{i}.bias"] = d.sum(axis=0)
            d = d @ w
    return {name: grads[name] for name in params}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the true classes and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range 0..{c - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(log_norm - z[rows, labels]))
    dlogits = np.exp(z - log_norm[:, None])
    dlogits[rows, labels] -= 1
    dlogits /= b
    return loss, dlogits


def predict_topk(logits_row: np.ndarray, k: int) -> list[tuple[int, float]]:
    """The k most probable classes, ties resolved toward the lower class index."""
    logits_row = np.asarray(logits_row, dtype=np.float64)
    if k < 1 or k > logits_row.shape[-1]:
        raise ValueError(f"k must be in 1..{logits_row.shape[-1]}, got {k}")
    probs = softmax(logits_row)
    order = np.argsort(-probs, kind="stable")[:k]
    return [(int(c), float(probs[c])) for c in order]


def _kink_pattern(cache: ForwardCache):
    pattern = []
    for layer, c in zip(cache.spec.layers, cache.entries):
        if isinstance(layer, ReLU):
            pattern.append(c)
        elif isinstance(layer, MaxPool2):
            pattern.append(c[1])
    return pattern


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    spec: NetworkSpec,
    seed: int,
    eps: float = 1e-3,
    precision: str = "float32",
    batch_size: int = 2,
    max_attempts: int = 50,
) -> float:
    """Max relative error between backward() and central differences over every parameter.

    The analytic side runs at ``precision``; the difference quotient always
    evaluates the loss in float64 on the same parameter values. Draws where a
    perturbation would flip a ReLU mask or a pooling argmax are rejected and
    redrawn, so kinks never produce false failures.
    """
    dtype = {"float32": np.float32, "float64": np.float64}[precision]
    rng = SplitMix64(seed)
    for _ in range(max_attempts):
        params = init_params(spec, rng.next_u64(), dtype)
        for name in params:
            if name.endswith(".bias"):
                params[name] = (0.1 * rng.normal(params[name].size)).reshape(params[name].shape).astype(dtype)
        x = rng.uniform(batch_size * int(np.prod(spec.input_shape)))
        x = x.reshape(batch_size, *spec.input_shape).astype(dtype)
        labels = (rng.block(batch_size) % np.uint64(spec.num_classes)).astype(np.int64)
        try:
            return _grad_check_once(spec, params, x, labels, eps)
        except _KinkCrossed:
            continue
    raise NonFiniteError(f"grad_check: no kink-free draw in {max_attempts} attempts")


class _KinkCrossed(Exception):
    pass


def _grad_check_once(spec, params, x, labels, eps) -> float:
    logits, cache = forward(spec, params, x)
    _, dlogits = loss_softmax_xent(logits, labels)
    analytic = backward(spec, params, cache, dlogits)

    ref = {k: v.astype(np.float64) for k, v in params.items()}
    x64 = x.astype(np.float64)
    base_pattern = _kink_pattern(forward(spec, ref, x64)[1])

    def loss_at(name, idx, delta):
        old = ref[name][idx]
        ref[name][idx] = old + delta
        out, c = forward(spec, ref, x64)
        ref[name][idx] = old
        if not _same_pattern(_kink_pattern(c), base_pattern):
            raise _KinkCrossed
        return loss_softmax_xent(out, labels)[0]

    worst = 0.0
    for name, grad in analytic.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite analytic gradient in {name}")
        for idx in np.ndindex(grad.shape):
            numeric = (loss_at(name, idx, eps) - loss_at(name, idx, -eps)) / (2 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"non-finite numeric gradient at {name}{list(idx)}")
            a = float(grad[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def toy_spec(size: int = 8, num_classes: int = 5) -> NetworkSpec:
    """conv 1->2 k3, relu, pool, dense: the gradient-check fixture."""
    half = size // 2
    return NetworkSpec(
        (1, size, size),
        (Conv2d(1, 2, 3, 1, 1), ReLU(), MaxPool2(), Flatten(), Dense(2 * half * half, num_classes)),
    )

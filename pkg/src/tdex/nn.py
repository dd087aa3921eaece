"""A small numpy network kit: sequential nets, analytic backward, Adam.

Tensors are plain float64 numpy arrays with a leading batch axis. Parameters
live in a :class:`ParamStore` keyed ``"<net>.<layer>.<weight|bias>"``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class ShapeError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


# ---------------------------------------------------------------- layer specs

@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"conv2d expects {self.in_ch} channels, got {c}")
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d output would be empty for input {shape}")
        return (self.out_ch, ho, wo)

    def param_shapes(self):
        return {"weight": (self.out_ch, self.in_ch, self.kernel, self.kernel), "bias": (self.out_ch,)}


@dataclass(frozen=True)
class ReLU:
    def out_shape(self, shape):
        return shape

    def param_shapes(self):
        return {}


@dataclass(frozen=True)
class GlobalAvgPool:
    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"global_avg_pool expects (C, H, W), got {shape}")
        return (shape[0],)

    def param_shapes(self):
        return {}


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int

    def out_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"linear expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}


@dataclass(frozen=True)
class L2Normalize:
    eps: float = 1e-12

    def out_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError(f"l2_normalize expects a vector, got {shape}")
        return shape

    def param_shapes(self):
        return {}


LAYER_TYPES = {"conv2d": Conv2d, "relu": ReLU, "global_avg_pool": GlobalAvgPool,
               "linear": Linear, "l2_normalize": L2Normalize}
_LAYER_NAMES = {v: k for k, v in LAYER_TYPES.items()}


@dataclass(frozen=True)
class NetSpec:
    name: str
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shape  # validates the chain

    @property
    def output_shape(self) -> tuple:
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"{self.name} layer {i} ({_LAYER_NAMES[type(layer)]}): {exc}") from None
        return tuple(shape)

    def param_shapes(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for key, shape in layer.param_shapes().items():
                out[f"{self.name}.{i}.{key}"] = shape
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [{"type": _LAYER_NAMES[type(l)], **asdict(l)} for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            layers.append(LAYER_TYPES[ld.pop("type")](**ld))
        return cls(d["name"], tuple(d["input_shape"]), tuple(layers))


def mlp(name: str, sizes, final_relu: bool = False) -> NetSpec:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b))
        if i < len(sizes) - 2 or final_relu:
            layers.append(ReLU())
    return NetSpec(name, (sizes[0],), tuple(layers))


# ---------------------------------------------------------------- parameters

@dataclass
class ParamStore:
    """Named parameters plus Adam moments and a step counter.

    ``version`` increments on every in-place update so old tapes can be
    detected.
    """

    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    version: int = 0

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self.params[name].shape}")
        self.params[name] = value.copy()
        self.version += 1

    def names(self, prefix: str = "") -> list:
        return [n for n in self.params if n.startswith(prefix)]

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        for n in self.names(prefix):
            out.add(n, self.params[n])
        return out

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.m.items()},
                          {k: v.copy() for k, v in self.v.items()}, self.step, self.version)

    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self.params.values()])


def init_params(net: NetSpec, rng: np.random.Generator, store: Optional[ParamStore] = None) -> ParamStore:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    store = ParamStore() if store is None else store
    for name, shape in net.param_shapes().items():
        if name.endswith(".bias"):
            store.add(name, np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            store.add(name, rng.uniform(-bound, bound, size=shape))
    return store


# ---------------------------------------------------------------- forward / backward

def _conv_cols(x, k, s, p):
    """im2col in NHWC order: rows are (n, ho, wo), columns are (ki, kj, c)."""
    xh = x.transpose(0, 2, 3, 1)
    if p:
        xh = np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0)))
    n, hp, wp, c = xh.shape
    ho = (hp - k) // s + 1
    wo = (wp - k) // s + 1
    cols = np.empty((n, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
    return cols.reshape(n * ho * wo, k * k * c), (n, hp, wp, c), ho, wo


def _wmat(layer: Conv2d, w):
    # weights (out, c, k, k) -> (out, k*k*c) to match the column order
    return w.transpose(0, 2, 3, 1).reshape(layer.out_ch, -1)


def _conv_forward(layer: Conv2d, w, b, x):
    cols, xp_shape, ho, wo = _conv_cols(x, layer.kernel, layer.stride, layer.padding)
    out = cols @ _wmat(layer, w).T + b
    out = out.reshape(x.shape[0], ho, wo, layer.out_ch).transpose(0, 3, 1, 2)
    return out, (cols, xp_shape, ho, wo)


def _conv_backward(layer: Conv2d, w, cache, g):
    cols, xp_shape, ho, wo = cache
    n = g.shape[0]
    k, s, p = layer.kernel, layer.stride, layer.padding
    g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, layer.out_ch)
    dw = (g2.T @ cols).reshape(layer.out_ch, k, k, layer.in_ch).transpose(0, 3, 1, 2)
    db = g2.sum(axis=0)
    dcols = (g2 @ _wmat(layer, w)).reshape(n, ho, wo, k, k, layer.in_ch)
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    if p:
        dxp = dxp[:, p:-p, p:-p, :]
    return dxp.transpose(0, 3, 1, 2), np.ascontiguousarray(dw), db


@dataclass
class Tape:
    net: NetSpec
    store: ParamStore
    version: int
    caches: list


def forward(net: NetSpec, params: ParamStore, x) -> tuple:
    """Run ``net`` on a batch ``x`` of shape (N, *input_shape)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"{net.name}: input shape {x.shape[1:]} != declared {net.input_shape}")
    caches = []
    for i, layer in enumerate(net.layers):
        prefix = f"{net.name}.{i}."
        if isinstance(layer, Conv2d):
            x, cache = _conv_forward(layer, params[prefix + "weight"], params[prefix + "bias"], x)
        elif isinstance(layer, Linear):
            cache = x
            x = x @ params[prefix + "weight"].T + params[prefix + "bias"]
        elif isinstance(layer, ReLU):
            cache = x > 0
            x = np.where(cache, x, 0.0)
        elif isinstance(layer, GlobalAvgPool):
            cache = x.shape
            x = x.mean(axis=(2, 3))
        elif isinstance(layer, L2Normalize):
            norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
            norm = np.maximum(norm, layer.eps)
            x = x / norm
            cache = (x, norm)
        else:
            raise TypeError(f"unknown layer {layer!r}")
        caches.append(cache)
    return x, Tape(net, params, params.version, caches)


def backward(tape: Tape, grad_output) -> tuple:
    """Return ``(param_grads, input_grad)`` for the forward pass in ``tape``."""
    if tape.store.version != tape.version:
        raise StaleTapeError(f"{tape.net.name}: parameters changed since forward")
    net, params = tape.net, tape.store
    g = np.asarray(grad_output, dtype=np.float64)
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer, cache = net.layers[i], tape.caches[i]
        prefix = f"{net.name}.{i}."
        if isinstance(layer, Conv2d):
            g, dw, db = _conv_backward(layer, params[prefix + "weight"], cache, g)
            grads[prefix + "weight"], grads[prefix + "bias"] = dw, db
        elif isinstance(layer, Linear):
            grads[prefix + "weight"] = g.T @ cache
            grads[prefix + "bias"] = g.sum(axis=0)
            g = g @ params[prefix + "weight"]
        elif isinstance(layer, ReLU):
            g = np.where(cache, g, 0.0)
        elif isinstance(layer, GlobalAvgPool):
            n, c, h, w = cache
            g = np.broadcast_to(g[:, :, None, None] / (h * w), cache).copy()
        elif isinstance(layer, L2Normalize):
            y, norm = cache
            g = (g - y * np.sum(g * y, axis=1, keepdims=True)) / norm
    ordered = {name: grads[name] for name in net.param_shapes()}
    return ordered, g


def l2_normalize(x, eps: float = 1e-12):
    norm = np.maximum(np.sqrt(np.sum(x * x, axis=-1, keepdims=True)), eps)
    return x / norm, norm


def l2_normalize_backward(y, norm, g):
    return (g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5


def adam_step(params: ParamStore, grads: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> ParamStore:
    """One bias-corrected Adam update in place; L2 decay is folded into the gradient."""
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params.params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params.version += 1
    return params


def adam(params: ParamStore, grads: dict, cfg: AdamConfig) -> ParamStore:
    return adam_step(params, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(directory, params: ParamStore, meta: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` and ``params.bin`` (little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    for name, arr in params.params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = {
        "format": "tdex-params",
        "dtype": "float32",
        "byte_order": "little",
        "layout": "C",
        "tensors": entries,
        "step": params.step,
        "meta": meta or {},
    }
    blob = params.flat().astype("<f4").tobytes()
    (directory / "params.bin").write_bytes(blob)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple:
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    data = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f4").astype(np.float64)
    store = ParamStore()
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        store.add(e["name"], data[e["offset"]:e["offset"] + size].reshape(e["shape"]))
    store.step = manifest.get("step", 0)
    return store, manifest.get("meta", {})

"""Minimal dense network engine: specs, flat parameter layout, forward pass,
analytic backprop and plain SGD, all in float64.

Weights of a dense layer are stored ``(in_dim, out_dim)`` so the layer computes
``y = x @ W + b``. In the flat parameter vector each dense layer contributes
its weights row-major followed by its biases, layers in order.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import kernels

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "tanh", "identity")
DEFAULT_LEAKY_SLOPE = 0.01


class SpecError(ValueError):
    """Invalid network description."""


class NumericError(ArithmeticError):
    """Non-finite value produced inside a network."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class LayoutError(ValueError):
    """Parameter/gradient vectors from incompatible layouts were combined."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "activation"
    in_dim: int | None = None
    out_dim: int | None = None
    activation: str | None = None
    slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        if self.activation != "leaky_relu":
            # slope only means something for leaky_relu; keep equality honest
            object.__setattr__(self, "slope", DEFAULT_LEAKY_SLOPE)
        if self.kind == "dense":
            for name in ("in_dim", "out_dim"):
                v = getattr(self, name)
                if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                    raise SpecError(f"dense layer {name} must be a positive integer, got {v!r}")
        elif self.kind == "activation":
            if self.activation not in ACTIVATIONS:
                raise SpecError(f"unknown activation {self.activation!r}")
            if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
                raise SpecError(f"leaky_relu slope must lie in (0, 1), got {self.slope}")
        else:
            raise SpecError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def dense(cls, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls("dense", in_dim=in_dim, out_dim=out_dim)

    @classmethod
    def act(cls, name: str, slope: float = DEFAULT_LEAKY_SLOPE) -> "LayerSpec":
        return cls("activation", activation=name, slope=slope)

    def to_dict(self) -> dict:
        if self.kind == "dense":
            return {"kind": "dense", "in": self.in_dim, "out": self.out_dim}
        d = {"kind": "activation", "activation": self.activation}
        if self.activation == "leaky_relu":
            d["slope"] = self.slope
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        allowed = {"kind", "in", "out", "activation", "slope"}
        extra = set(d) - allowed
        if extra:
            raise SpecError(f"unknown layer keys {sorted(extra)}")
        kind = d.get("kind")
        if kind == "dense":
            return cls.dense(d.get("in"), d.get("out"))
        if kind == "activation":
            return cls.act(d.get("activation"), float(d.get("slope", DEFAULT_LEAKY_SLOPE)))
        raise SpecError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_dim: int
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        dense = [l for l in self.layers if l.kind == "dense"]
        if not dense:
            raise SpecError("network needs at least one dense layer")
        if dense[0].in_dim != self.input_dim:
            raise SpecError(f"first dense layer takes {dense[0].in_dim} inputs, spec says {self.input_dim}")
        for k, (a, b) in enumerate(zip(dense, dense[1:])):
            if a.out_dim != b.in_dim:
                raise SpecError(
                    f"dimension chain broken between dense layers {k} and {k + 1}: {a.out_dim} != {b.in_dim}"
                )
        if dense[-1].out_dim != self.output_dim:
            raise SpecError(f"last dense layer emits {dense[-1].out_dim}, spec says {self.output_dim}")

    @classmethod
    def from_layers(cls, layers: Sequence[LayerSpec]) -> "NetworkSpec":
        dense = [l for l in layers if l.kind == "dense"]
        if not dense:
            raise SpecError("network needs at least one dense layer")
        return cls(tuple(layers), dense[0].in_dim, dense[-1].out_dim)

    @property
    def final_activation(self) -> str:
        last = self.layers[-1]
        return last.activation if last.kind == "activation" else "identity"

    @property
    def param_count(self) -> int:
        return sum(l.in_dim * l.out_dim + l.out_dim for l in self.layers if l.kind == "dense")

    def to_json(self) -> str:
        doc = {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "layers": [l.to_dict() for l in self.layers],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        doc = json.loads(text)
        layers = tuple(LayerSpec.from_dict(d) for d in doc["layers"])
        return cls(layers, doc["input_dim"], doc["output_dim"])


@dataclass(frozen=True)
class _Slot:
    layer: int  # index into spec.layers
    part: str  # "W" | "b"
    offset: int
    shape: tuple[int, ...]


class ParamLayout:
    """Bijection between (layer, part, row, col) and flat indices."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        slots = []
        offset = 0
        for i, layer in enumerate(spec.layers):
            if layer.kind != "dense":
                continue
            slots.append(_Slot(i, "W", offset, (layer.in_dim, layer.out_dim)))
            offset += layer.in_dim * layer.out_dim
            slots.append(_Slot(i, "b", offset, (layer.out_dim,)))
            offset += layer.out_dim
        self.slots: tuple[_Slot, ...] = tuple(slots)
        self.size = offset
        self._by_key = {(s.layer, s.part): s for s in slots}

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and other.spec == self.spec

    def __hash__(self):
        return hash(self.spec)

    def __len__(self):
        return self.size

    def index(self, layer: int, part: str, row: int, col: int = 0) -> int:
        slot = self._by_key[(layer, part)]
        if part == "W":
            rows, cols = slot.shape
            if not (0 <= row < rows and 0 <= col < cols):
                raise IndexError((layer, part, row, col))
            return slot.offset + row * cols + col
        if not (0 <= row < slot.shape[0]) or col != 0:
            raise IndexError((layer, part, row, col))
        return slot.offset + row

    def locate(self, flat: int) -> tuple[int, str, int, int]:
        if not 0 <= flat < self.size:
            raise IndexError(flat)
        for slot in self.slots:
            n = math.prod(slot.shape)
            if flat < slot.offset + n:
                rel = flat - slot.offset
                if slot.part == "W":
                    return slot.layer, "W", rel // slot.shape[1], rel % slot.shape[1]
                return slot.layer, "b", rel, 0
        raise AssertionError("unreachable")

    def views(self, values: np.ndarray) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Per dense layer ``(W, b)`` views into ``values`` (no copies)."""
        out = {}
        for s in self.slots:
            n = math.prod(s.shape)
            v = values[s.offset : s.offset + n].reshape(s.shape)
            w, b = out.get(s.layer, (None, None))
            out[s.layer] = (v, b) if s.part == "W" else (w, v)
        return out


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] != self.layout.size:
            raise LayoutError(f"expected {self.layout.size} values, got shape {self.values.shape}")

    def __len__(self):
        return self.layout.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def unflatten(self) -> list[tuple[np.ndarray, np.ndarray]]:
        views = self.layout.views(self.values)
        return [(w.copy(), b.copy()) for _, (w, b) in sorted(views.items())]

    @classmethod
    def flatten(cls, arrays: Sequence[tuple[np.ndarray, np.ndarray]], layout: ParamLayout) -> "ParamVector":
        parts = []
        for w, b in arrays:
            parts.append(np.asarray(w, dtype=np.float64).ravel())
            parts.append(np.asarray(b, dtype=np.float64).ravel())
        return cls(np.concatenate(parts) if parts else np.zeros(0), layout)

    def to_bytes(self) -> bytes:
        return struct.pack("<Q", self.values.shape[0]) + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, layout: ParamLayout) -> "ParamVector":
        if len(blob) < 8:
            raise LayoutError("parameter blob shorter than its length header")
        (n,) = struct.unpack("<Q", blob[:8])
        if len(blob) != 8 + 8 * n:
            raise LayoutError(f"parameter blob holds {len(blob) - 8} bytes, header announces {8 * n}")
        if n != layout.size:
            raise LayoutError(f"blob has {n} values, layout expects {layout.size}")
        return cls(np.frombuffer(blob[8:], dtype="<f8").astype(np.float64), layout)

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.values.tobytes()).hexdigest()


GradVector = ParamVector


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError(f"batch inputs must be a non-empty 2-D matrix, got shape {self.inputs.shape}")
        if not np.isfinite(self.inputs).all():
            raise NumericError("batch contains non-finite inputs")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape[0] != self.inputs.shape[0]:
                raise ValueError("targets and inputs disagree on batch size")


@dataclass
class Network:
    spec: NetworkSpec
    params: ParamVector
    rng_seed: int = 0
    _views: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.params.layout.spec != self.spec:
            raise LayoutError("parameter layout does not belong to this spec")
        self._views = self.params.layout.views(self.params.values)

    @property
    def layout(self) -> ParamLayout:
        return self.params.layout

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    def set_params(self, values: np.ndarray) -> None:
        """Overwrite parameters in place (keeps the existing buffer)."""
        self.params.values[:] = values

    def copy(self) -> "Network":
        return Network(self.spec, self.params.copy(), self.rng_seed)


def build_network(spec: NetworkSpec, seed: int) -> Network:
    """Fan-in uniform init ``U(-1/sqrt(in), 1/sqrt(in))`` for weights, zero biases."""
    layout = ParamLayout(spec)
    values = np.zeros(layout.size)
    rng = np.random.default_rng(seed)
    for slot in layout.slots:
        if slot.part != "W":
            continue
        bound = 1.0 / math.sqrt(slot.shape[0])
        n = math.prod(slot.shape)
        values[slot.offset : slot.offset + n] = rng.uniform(-bound, bound, size=n)
    return Network(spec, ParamVector(values, layout), seed)


# ---------------------------------------------------------------- activations


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _act_forward(layer: LayerSpec, z: np.ndarray) -> np.ndarray:
    a = layer.activation
    if a == "relu":
        return np.maximum(z, 0.0)
    if a == "leaky_relu":
        return np.where(z > 0, z, layer.slope * z)
    if a == "sigmoid":
        return _sigmoid(z)
    if a == "tanh":
        return np.tanh(z)
    return z.copy()


def _act_backward(layer: LayerSpec, z: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    a = layer.activation
    if a == "relu":
        return np.where(z > 0, g, 0.0)
    if a == "leaky_relu":
        return np.where(z > 0, g, layer.slope * g)
    if a == "sigmoid":
        return g * (y * (1.0 - y))
    if a == "tanh":
        return g * (1.0 - y * y)
    return g.copy()


# ------------------------------------------------------------- forward / back


def _inputs(batch) -> np.ndarray:
    if isinstance(batch, Batch):
        return batch.inputs
    return np.ascontiguousarray(batch, dtype=np.float64)


def forward_trace(net: Network, batch) -> list[np.ndarray]:
    """Forward pass keeping every intermediate: ``trace[0]`` is the input,
    ``trace[k + 1]`` the output of ``spec.layers[k]``."""
    x = _inputs(batch)
    if x.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise ValueError(f"expected inputs with {net.spec.input_dim} columns, got shape {x.shape}")
    trace = [x]
    for k, layer in enumerate(net.spec.layers):
        if layer.kind == "dense":
            w, b = net._views[k]
            x = kernels.affine_forward(x, w, b)
        else:
            x = _act_forward(layer, x)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activation at layer {k}", layer=k)
        trace.append(x)
    return trace


def forward(net: Network, batch) -> np.ndarray:
    """Outputs of ``net`` on ``batch`` (``batch_size x output_dim``)."""
    return forward_trace(net, batch)[-1]


def backward(net: Network, batch, upstream_grad: np.ndarray, trace=None, need_input_grad: bool = True):
    """Backprop ``upstream_grad = dL/d(output)``.

    Returns ``(grad, dL/dinput)``; ``grad`` is a :class:`ParamVector` laid out
    like ``net.params``. Pass ``trace`` from :func:`forward_trace` to skip the
    recomputation.
    """
    if trace is None:
        trace = forward_trace(net, batch)
    g = np.ascontiguousarray(upstream_grad, dtype=np.float64)
    if g.shape != trace[-1].shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {trace[-1].shape}")
    grad = np.zeros(net.layout.size)
    gviews = net.layout.views(grad)
    first_dense = next(i for i, l in enumerate(net.spec.layers) if l.kind == "dense")
    for k in range(len(net.spec.layers) - 1, -1, -1):
        layer = net.spec.layers[k]
        if layer.kind == "dense":
            w, _ = net._views[k]
            want_dx = need_input_grad or k > first_dense
            dw, db, dx = kernels.affine_backward(trace[k], w, g, want_dx)
            gw, gb = gviews[k]
            gw[:] = dw
            gb[:] = db
            if dx is None:
                return ParamVector(grad, net.layout), None
            g = dx
        else:
            g = _act_backward(layer, trace[k], trace[k + 1], g)
    return ParamVector(grad, net.layout), g


def sgd_step(net: Network, grad: ParamVector, lr: float) -> None:
    """In place ``params -= lr * grad``."""
    if grad.layout != net.layout:
        raise LayoutError("gradient layout does not match network")
    net.params.values -= lr * grad.values


# ------------------------------------------------------------------- presets


def mlp(dims: Sequence[int], hidden_act: str, final_act: str, slope: float = DEFAULT_LEAKY_SLOPE) -> NetworkSpec:
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        layers.append(LayerSpec.dense(a, b))
        last = i == len(dims) - 2
        layers.append(LayerSpec.act(final_act if last else hidden_act, slope))
    return NetworkSpec.from_layers(layers)


def discriminator_preset(data_dim: int, hidden: int, slope: float = DEFAULT_LEAKY_SLOPE) -> NetworkSpec:
    """Linear, LeakyReLU, Linear, LeakyReLU, Linear, Sigmoid."""
    return mlp([data_dim, hidden, hidden, 1], "leaky_relu", "sigmoid", slope)


def generator_preset(noise_dim: int, hidden: int, data_dim: int, final: str = "tanh",
                     hidden_activation: str = "relu", slope: float = DEFAULT_LEAKY_SLOPE) -> NetworkSpec:
    """Linear, ReLU, Linear, ReLU, Linear, then ``final`` (Tanh for pixel data)."""
    return mlp([noise_dim, hidden, hidden, data_dim], hidden_activation, final, slope)


PRESETS = {
    # name: (data_dim, noise_dim, hidden, generator final activation)
    "mnist": (784, 100, 256, "tanh"),
    "ring": (2, 2, 32, "identity"),
    "gauss1d": (1, 2, 16, "identity"),
}


def preset_specs(name: str, hidden: int | None = None, noise_dim: int | None = None,
                 slope: float = DEFAULT_LEAKY_SLOPE) -> tuple[NetworkSpec, NetworkSpec]:
    """``(generator_spec, discriminator_spec)`` for a named preset."""
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    data_dim, nd, h, final = PRESETS[name]
    h = hidden or h
    nd = noise_dim or nd
    return generator_preset(nd, h, data_dim, final), discriminator_preset(data_dim, h, slope)


def iter_dense(spec: NetworkSpec) -> Iterator[tuple[int, LayerSpec]]:
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            yield i, layer

"""Sequential network container and the spec-driven builder."""
from __future__ import annotations

import math

import numpy as np

from . import branch
from .core import Rng, ShapeError, as_tensor
from .layers import (
    BatchNorm,
    Conv2d,
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    Mode,
    ReLU,
    SBConv2d,
    SBLinear,
    Tanh,
)


class Network:
    def __init__(self, layers: list[Layer], input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names) or not all(names):
            raise ValueError(f"layer names must be unique and non-empty: {names}")
        self.output_shape = self.check_shapes()

    def check_shapes(self):
        shape = self.input_shape
        for layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {layer.name!r} ({layer.kind}): {exc}") from None
        return shape

    def index(self, layer_id) -> int:
        if isinstance(layer_id, (int, np.integer)):
            if not 0 <= layer_id < len(self.layers):
                raise LookupError(f"no layer at index {layer_id}")
            return int(layer_id)
        for i, layer in enumerate(self.layers):
            if layer.name == layer_id:
                return i
        raise LookupError(f"no layer named {layer_id!r}")

    def layer(self, layer_id) -> Layer:
        return self.layers[self.index(layer_id)]

    def forward(self, x, mode=Mode.EVAL, rng: Rng | None = None, upto=None):
        """Run the layers in order; ``upto`` stops after the given layer."""
        stop = len(self.layers) - 1 if upto is None else self.index(upto)
        x = as_tensor(x)
        for layer in self.layers[: stop + 1]:
            x = layer.forward(x, mode, rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def predict_logits(self, x, batch_size=1000):
        x = as_tensor(x)
        out = [self.forward(x[i : i + batch_size], Mode.EVAL) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0) if out else np.empty((0, *self.output_shape))

    def parameters(self):
        """(qualified name, layer, key) for every trainable array."""
        return [(f"{l.name}.{k}", l, k) for l in self.layers for k in l.params]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for layer in self.layers:
            for k, v in layer.params.items():
                state[f"{layer.name}.{k}"] = v
            for k, v in layer.buffers.items():
                state[f"{layer.name}.{k}"] = v
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for k in store:
                    value = as_tensor(state[f"{layer.name}.{k}"])
                    if value.shape != store[k].shape:
                        raise ShapeError(f"{layer.name}.{k}: expected {store[k].shape}, got {value.shape}")
                    store[k] = value.copy()

    def sb_layers(self):
        return [l for l in self.layers if isinstance(l, (SBLinear, SBConv2d))]

    @property
    def stochastic(self):
        return any(l.stochastic for l in self.layers)

    def spec(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.spec() for l in self.layers]}

    def __repr__(self):
        body = "\n".join(f"  {l.name}: {l!r}" for l in self.layers)
        return f"Network(input_shape={self.input_shape}\n{body}\n)"


# ---------------------------------------------------------------- building

SIMPLE = {"relu": ReLU, "tanh": Tanh, "flatten": Flatten}


def layer_from_spec(spec: dict) -> Layer:
    """Instantiate a layer with zero parameters from its spec record."""
    kind = spec["kind"]
    name = spec.get("name", "")
    if kind in SIMPLE:
        return SIMPLE[kind](name=name)
    if kind == "maxpool2d":
        return MaxPool2d(spec.get("kernel_size", 2), name=name)
    if kind == "dropout":
        return Dropout(spec.get("keep_prob", 0.5), name=name)
    if kind == "batchnorm":
        return BatchNorm(spec["num_features"], spec.get("momentum", 0.1), spec.get("eps", 1e-5), name=name)
    if kind == "linear":
        return Linear(spec["in_features"], spec["out_features"], spec.get("bias", True), name=name)
    if kind == "conv2d":
        return Conv2d(
            spec["in_channels"], spec["out_channels"], spec["kernel_size"],
            spec.get("stride", 1), spec.get("padding", 0), spec.get("bias", True), name=name,
        )
    if kind in ("sb_linear", "sb_conv2d"):
        bspec = branch.BranchSpec(spec.get("n_branches", 10), spec.get("keep_probs") or [], spec.get("init", "random_split"))
        n = bspec.n_branches
        if kind == "sb_linear":
            out, d = spec["out_features"], spec["in_features"]
            bias = np.zeros(out) if spec.get("bias", True) else None
            return SBLinear(np.zeros((n, out, d)), bspec.keep_probs, bias=bias, name=name, init=bspec.init.value)
        k, c_out = spec["kernel_size"], spec["out_channels"]
        bias = np.zeros(c_out) if spec.get("bias", True) else None
        return SBConv2d(
            np.zeros((n, c_out, spec["in_channels"], k, k)), bspec.keep_probs, bias=bias,
            stride=spec.get("stride", 1), padding=spec.get("padding", 0), name=name, init=bspec.init.value,
        )
    raise ValueError(f"unknown layer kind {kind!r}")


def fan_in_uniform(shape, rng: Rng) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_layer(layer: Layer, rng: Rng) -> Layer:
    """Fresh parameters; branched layers split (or expand) a fan-in-scaled W."""
    if isinstance(layer, (Linear, Conv2d)):
        layer.params["weight"] = fan_in_uniform(layer.params["weight"].shape, rng.fork("weight"))
        if layer.has_bias:
            layer.params["bias"] = np.zeros_like(layer.params["bias"])
        return layer
    if isinstance(layer, (SBLinear, SBConv2d)):
        w = fan_in_uniform(layer.params["branches"].shape[1:], rng.fork("weight"))
        bspec = branch.BranchSpec(layer.n_branches, layer.keep_probs.tolist(), layer.init)
        if bspec.init is branch.BranchInit.PRETRAINED_EXPAND:
            fresh = branch.expand_pretrained(w, bspec, like=layer)
        else:
            fresh = branch.random_split(w, bspec, rng.fork("split"), like=layer)
        layer.params["branches"] = fresh.params["branches"]
        if layer.has_bias:
            layer.params["bias"] = np.zeros_like(layer.params["bias"])
    return layer


def build_network(arch: dict, rng: Rng | None = None) -> Network:
    """Network from ``{"input_shape": [...], "layers": [spec, ...]}``.

    Unnamed layers get ``<kind><index>`` names. With ``rng`` the parameters
    are initialised, otherwise they stay zero (for loading saved state).
    """
    layers = []
    for i, spec in enumerate(arch["layers"]):
        spec = dict(spec)
        spec.setdefault("name", f"{spec['kind']}{i}")
        layer = layer_from_spec(spec)
        if rng is not None:
            init_layer(layer, rng.fork(layer.name))
        layers.append(layer)
    return Network(layers, arch["input_shape"])


def collapsed_network(net: Network) -> Network:
    """Copy of ``net`` with every branched layer merged into a plain one."""
    layers = []
    for layer in net.layers:
        if isinstance(layer, (SBLinear, SBConv2d)):
            layers.append(branch.collapse_layer(layer))
        else:
            clone = layer_from_spec(layer.spec())
            for k, v in layer.params.items():
                clone.params[k] = v.copy()
            for k, v in layer.buffers.items():
                clone.buffers[k] = v.copy()
            layers.append(clone)
    return Network(layers, net.input_shape)


def probe_points(net: Network) -> list[str]:
    """Names of layers whose outputs are the hidden activations.

    One per hidden block: the activation layer, or the Dropout right after it
    when present. The final block (logits) is excluded.
    """
    points = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, (ReLU, Tanh)):
            nxt = net.layers[i + 1] if i + 1 < len(net.layers) else None
            points.append(nxt.name if isinstance(nxt, Dropout) else layer.name)
    return points


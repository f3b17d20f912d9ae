"""Run configuration: parsing, validation, presets.

A config is one JSON document. Either give the architecture explicitly::

    {"architecture": {"input_shape": [1, 28, 28], "layers": [...]}, ...}

or name a preset and the regularizers to switch on::

    {"preset": "mlp3-lite", "regularizers": ["sb", "bn"], "seed": 3}

Presets fill in architecture, optimizer and data defaults; any explicit
``optimizer``/``data`` keys override them field by field.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import DomainError, ShapeError
from .network import build_network
from .train import SGDConfig

FORMAT_VERSION = 1
REGULARIZERS = ("sb", "bn", "do")
MNIST_SHAPE = [1, 28, 28]


class ConfigError(ValueError):
    def __init__(self, field_path, message):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DataConfig:
    name: str = "mnist"
    root: str | None = None
    fraction: float = 1.0
    test_fraction: float = 1.0


@dataclass
class RunConfig:
    architecture: dict
    optimizer: SGDConfig = field(default_factory=SGDConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "label": self.label,
            "architecture": self.architecture,
            "optimizer": asdict(self.optimizer),
            "data": asdict(self.data),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- presets

MLP_PRESETS = {
    # name: (hidden sizes, which fc layers (1-based) get branches)
    "mlp3": ([1024, 1024], {1, 2, 3}),
    "mlp3-lite": ([256, 256], {1, 2, 3}),
    "mlp5": ([1024] * 4, {1, 3, 5}),
    "mlp5-lite": ([256] * 4, {1, 3, 5}),
}
CNN_PRESETS = {
    # name: (conv channels, fc hidden)
    "cnn": ((32, 64), 1024),
    "cnn-lite": ((8, 16), 128),
}
PRESETS = sorted([*MLP_PRESETS, *CNN_PRESETS])

LITE_FRACTION = 1.0 / 6.0  # 10k of the 60k MNIST training images


def _branched(spec, n_branches, keep_prob, init):
    spec = dict(spec)
    spec["kind"] = "sb_" + spec["kind"]
    spec.update(n_branches=n_branches, keep_probs=[keep_prob] * n_branches, init=init)
    return spec


def _hidden_tail(layers, idx, width, regs, keep_prob, activation="relu"):
    if "bn" in regs:
        layers.append({"kind": "batchnorm", "name": f"bn{idx}", "num_features": width})
    layers.append({"kind": activation, "name": f"{activation}{idx}"})
    if "do" in regs:
        layers.append({"kind": "dropout", "name": f"do{idx}", "keep_prob": keep_prob})


def _check_regs(regularizers):
    regs = set(regularizers)
    unknown = regs - set(REGULARIZERS)
    if unknown:
        raise ConfigError("regularizers", f"unknown regularizer(s) {sorted(unknown)}; choose from {REGULARIZERS}")
    return regs


def mlp_architecture(input_shape, hidden, n_classes, regularizers=(), sb_at=None, n_branches=10,
                     keep_prob=0.5, sb_init="random_split", activation="relu") -> dict:
    """Fully connected stack; ``sb_at`` lists 1-based fc indices to branch (default all)."""
    regs = _check_regs(regularizers)
    sizes = [int(np.prod(input_shape)), *hidden, n_classes]
    sb_at = set(range(1, len(sizes))) if sb_at is None else set(sb_at)
    layers: list[dict] = [{"kind": "flatten", "name": "flatten"}]
    for i in range(1, len(sizes)):
        fc = {"kind": "linear", "name": f"fc{i}", "in_features": sizes[i - 1], "out_features": sizes[i]}
        if "sb" in regs and i in sb_at:
            fc = _branched(fc, n_branches, keep_prob, sb_init)
        layers.append(fc)
        if i < len(sizes) - 1:
            _hidden_tail(layers, i, sizes[i], regs, keep_prob, activation)
    return {"input_shape": list(input_shape), "layers": layers}


def preset_architecture(name, regularizers=(), n_branches=10, keep_prob=0.5, sb_init="random_split",
                        n_classes=10) -> dict:
    """Layer list for a named preset.

    Batch norm sits on hidden pre-activations, dropout after hidden
    activations (so only between fc layers), branching replaces the chosen
    linear layers.
    """
    regs = _check_regs(regularizers)
    layers: list[dict] = []
    if name in MLP_PRESETS:
        hidden, sb_at = MLP_PRESETS[name]
        return mlp_architecture(MNIST_SHAPE, hidden, n_classes, regs, sb_at, n_branches, keep_prob, sb_init)
    elif name in CNN_PRESETS:
        (c1, c2), hidden = CNN_PRESETS[name]
        for i, (cin, cout) in enumerate([(1, c1), (c1, c2)], start=1):
            conv = {"kind": "conv2d", "name": f"conv{i}", "in_channels": cin, "out_channels": cout,
                    "kernel_size": 5, "stride": 1, "padding": 2}
            if "sb" in regs:
                conv = _branched(conv, n_branches, keep_prob, sb_init)
            layers.append(conv)
            if "bn" in regs:
                layers.append({"kind": "batchnorm", "name": f"bnc{i}", "num_features": cout})
            layers.append({"kind": "relu", "name": f"reluc{i}"})
            layers.append({"kind": "maxpool2d", "name": f"pool{i}", "kernel_size": 2})
        layers.append({"kind": "flatten", "name": "flatten"})
        sizes = [c2 * 7 * 7, hidden, n_classes]
        for i in (1, 2):
            fc = {"kind": "linear", "name": f"fc{i}", "in_features": sizes[i - 1], "out_features": sizes[i]}
            if "sb" in regs:
                fc = _branched(fc, n_branches, keep_prob, sb_init)
            layers.append(fc)
            if i == 1:
                _hidden_tail(layers, i, hidden, regs, keep_prob)
    else:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {PRESETS}")
    return {"input_shape": list(MNIST_SHAPE), "layers": layers}


def preset_defaults(name) -> dict:
    lite = name.endswith("-lite")
    lr = 0.01 if name.startswith("cnn") else 0.1
    return {
        "optimizer": {"learning_rate": lr, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 128,
                      "epochs": 5 if lite else 20},
        "data": {"name": "mnist", "root": None, "fraction": LITE_FRACTION if lite else 1.0, "test_fraction": 1.0},
    }


# ---------------------------------------------------------------- parsing

_TOP_KEYS = {"format_version", "label", "architecture", "optimizer", "data", "seed", "output_dir",
             "preset", "regularizers", "branches"}


def _section(raw, key, cls, defaults):
    merged = dict(defaults)
    value = raw.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(key, "must be an object")
    allowed = set(cls.__dataclass_fields__)
    for k in value:
        if k not in allowed:
            raise ConfigError(f"{key}.{k}", f"unknown field; allowed: {sorted(allowed)}")
    merged.update(value)
    try:
        return cls(**merged)
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def parse_config(raw) -> RunConfig:
    """Validate a config mapping (or JSON text) into a :class:`RunConfig`."""
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<document>", "top level must be an object")
    for k in raw:
        if k not in _TOP_KEYS:
            raise ConfigError(k, f"unknown field; allowed: {sorted(_TOP_KEYS)}")
    version = raw.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError("format_version", f"unsupported version {version}, expected {FORMAT_VERSION}")

    defaults = {"optimizer": {}, "data": {}}
    label = raw.get("label", "")
    if "preset" in raw:
        if "architecture" in raw:
            raise ConfigError("preset", "give either 'preset' or 'architecture', not both")
        regs = raw.get("regularizers", [])
        if not isinstance(regs, list):
            raise ConfigError("regularizers", "must be a list")
        br = raw.get("branches", {})
        if not isinstance(br, dict):
            raise ConfigError("branches", "must be an object")
        for k in br:
            if k not in ("n_branches", "keep_prob", "init"):
                raise ConfigError(f"branches.{k}", "unknown field; allowed: ['init', 'keep_prob', 'n_branches']")
        arch = preset_architecture(
            raw["preset"], regs, br.get("n_branches", 10), br.get("keep_prob", 0.5), br.get("init", "random_split")
        )
        defaults = preset_defaults(raw["preset"])
        label = label or "+".join([raw["preset"], *sorted(regs)])
    elif "architecture" in raw:
        arch = raw["architecture"]
    else:
        raise ConfigError("architecture", "missing (or give 'preset')")
    arch = _validate_architecture(arch)

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed", f"must be an integer in [0, 2^64), got {seed!r}")
    output_dir = raw.get("output_dir", f"runs/{label or 'default'}")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir", "must be a non-empty string")
    return RunConfig(
        architecture=arch,
        optimizer=_section(raw, "optimizer", SGDConfig, defaults["optimizer"]),
        data=_section(raw, "data", DataConfig, defaults["data"]),
        seed=seed,
        output_dir=output_dir,
        label=label,
    )


def _validate_architecture(arch):
    if not isinstance(arch, dict) or "layers" not in arch:
        raise ConfigError("architecture", "must be an object with 'layers'")
    if not isinstance(arch["layers"], list) or not arch["layers"]:
        raise ConfigError("architecture.layers", "must be a non-empty list")
    arch = {"input_shape": list(arch.get("input_shape", MNIST_SHAPE)), "layers": [dict(l) for l in arch["layers"]]}
    for i, spec in enumerate(arch["layers"]):
        if "kind" not in spec:
            raise ConfigError(f"architecture.layers[{i}]", "missing 'kind'")
        spec.setdefault("name", f"{spec['kind']}{i}")
    try:
        net = build_network(arch)
    except (ShapeError, DomainError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError("architecture", str(exc)) from None
    # canonical form: what the built layers report about themselves
    return net.spec()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())

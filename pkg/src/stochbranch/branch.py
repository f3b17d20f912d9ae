"""Moving between plain layers and branched layers."""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .core import DTYPE, DomainError, Rng, ShapeError, as_tensor, bernoulli
from .layers import Conv2d, Linear, Mode, SBConv2d, SBLinear, check_uniform_keep


class BranchInit(str, enum.Enum):
    RANDOM_SPLIT = "random_split"
    PRETRAINED_EXPAND = "pretrained_expand"


@dataclass
class BranchSpec:
    n_branches: int = 10
    keep_probs: list = field(default_factory=list)
    init: BranchInit = BranchInit.RANDOM_SPLIT

    def __post_init__(self):
        self.init = BranchInit(self.init)
        if self.n_branches < 1:
            raise DomainError(f"n_branches must be >= 1, got {self.n_branches}")
        if not self.keep_probs:
            self.keep_probs = [0.5] * self.n_branches
        self.keep_probs = [float(p) for p in self.keep_probs]
        if len(self.keep_probs) != self.n_branches:
            raise ShapeError(f"{len(self.keep_probs)} keep probabilities for {self.n_branches} branches")
        for p in self.keep_probs:
            if not 0.0 < p <= 1.0:
                raise DomainError(f"keep probability must be in (0, 1], got {p}")

    @classmethod
    def uniform(cls, n_branches=10, keep_prob=0.5, init=BranchInit.RANDOM_SPLIT):
        return cls(n_branches, [keep_prob] * n_branches, init)


def _sb_from_branches(weight, branches, spec, bias, name, like=None):
    if weight.ndim == 2:
        return SBLinear(branches, spec.keep_probs, bias=bias, name=name, init=spec.init.value)
    stride = getattr(like, "stride", 1)
    padding = getattr(like, "padding", 0)
    return SBConv2d(branches, spec.keep_probs, bias=bias, stride=stride, padding=padding, name=name, init=spec.init.value)


def expand_pretrained(weight, spec: BranchSpec, bias=None, name="", like=None):
    """Branches ``W / (N p_k)``; their expectation-weighted sum is exactly ``W``.

    ``weight`` is (out, in) for a dense layer or (C_out, C_in, k, k) for a
    convolution; ``like`` supplies stride/padding for the latter.
    """
    w = as_tensor(weight)
    p = np.asarray(spec.keep_probs, dtype=DTYPE)
    if np.any(p == 0.0):
        raise DomainError("cannot expand with a zero keep probability")
    n = spec.n_branches
    branches = np.stack([w / (n * pk) for pk in p])
    return _sb_from_branches(w, branches, spec, bias, name, like)


def random_split(weight, spec: BranchSpec, rng: Rng, bias=None, name="", like=None):
    """Random branches that sum to ``weight`` exactly (up to float rounding).

    The first N-1 branches are uniform on [-s, s] with s = max|W| / N; the
    last branch takes the residual.
    """
    w = as_tensor(weight)
    n = spec.n_branches
    s = float(np.max(np.abs(w))) / n if w.size else 0.0
    head = rng.uniform(-s, s, (n - 1, *w.shape)) if n > 1 else np.empty((0, *w.shape))
    last = w - head.sum(axis=0)
    branches = np.concatenate([head, last[None]], axis=0)
    return _sb_from_branches(w, branches, spec, bias, name, like)


def collapse(layer) -> np.ndarray:
    """Merged weight ``sum_k p_k W_k`` of a branched layer."""
    return layer.collapsed_weight()


def collapse_layer(layer):
    """Plain Linear/Conv2d computing the same EVAL output as ``layer``."""
    bias = layer.params.get("bias")
    if isinstance(layer, SBLinear):
        plain = Linear(layer.in_features, layer.out_features, bias=bias is not None, name=layer.name)
    elif isinstance(layer, SBConv2d):
        plain = Conv2d(
            layer.in_channels, layer.out_channels, layer.kernel_size,
            stride=layer.stride, padding=layer.padding, bias=bias is not None, name=layer.name,
        )
    else:
        raise TypeError(f"not a branched layer: {type(layer).__name__}")
    plain.params["weight"] = collapse(layer)
    if bias is not None:
        plain.params["bias"] = bias.copy()
    return plain


class GroupMaskedSBLinear(SBLinear):
    """Branched layer whose branches of one output unit share a single mask.

    Forced masks have shape (batch, out). With a ReLU or tanh on top this is
    ordinary activation dropout applied after the summed dense layer.
    """

    kind = "sb_linear_group"

    def __init__(self, branches, keep_prob, bias=None, name=""):
        n = as_tensor(branches).shape[0]
        super().__init__(branches, [keep_prob] * n, bias=bias, name=name)

    @property
    def keep_prob(self):
        return float(self.keep_probs[0])

    def forward_train(self, x, rng=None, masks=None, cache=True):
        x = as_tensor(x)
        if masks is None:
            unit = bernoulli(rng, (x.shape[0], self.out_features), self.keep_prob)
        else:
            unit = as_tensor(masks)
            if unit.shape != (x.shape[0], self.out_features):
                raise ShapeError(f"group masks must be (batch, {self.out_features}), got {unit.shape}")
        shared = np.repeat(unit[:, :, None], self.n_branches, axis=2)
        return super().forward_train(x, masks=shared, cache=cache)

    def forward(self, x, mode=Mode.EVAL, rng=None, masks=None):
        if mode is Mode.EVAL:
            return self.forward_eval(x)
        return self.forward_train(x, rng, masks=masks, cache=mode is Mode.TRAIN)


def as_group_masked(layer: SBLinear) -> GroupMaskedSBLinear:
    p = check_uniform_keep(layer.keep_probs)
    bias = layer.params.get("bias")
    return GroupMaskedSBLinear(
        layer.params["branches"].copy(), p, bias=None if bias is None else bias.copy(), name=layer.name
    )


def as_dropconnect(weight, keep_prob, bias=None, name="") -> SBLinear:
    """One branch per input column: branch k keeps only column k of ``weight``.

    Masking branch k of unit i then drops exactly the connection (i, k).
    """
    w = as_tensor(weight)
    out, d = w.shape
    branches = np.zeros((d, out, d), dtype=DTYPE)
    idx = np.arange(d)
    branches[idx, :, idx] = w.T
    return SBLinear(branches, [keep_prob] * d, bias=bias, name=name)


def turn_off_probability(keep_probs) -> float:
    """Chance that every branch of a unit is masked at once: prod(1 - p_k)."""
    counts = Counter(float(p) for p in keep_probs)
    out = 1.0
    for p, n in counts.items():
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"keep probability must be in [0, 1], got {p}")
        # grouped powers keep the uniform case equal to (1 - p) ** N bit for bit
        out *= (1.0 - p) ** n
    return out


@dataclass(frozen=True)
class EnsembleSize:
    log2: int
    count: int | None  # None when 2**log2 is too large to be worth materialising

    @property
    def exact(self):
        return self.count is not None


MAX_EXACT_LOG2 = 4096


def ensemble_size(n_units: int, n_branches: int) -> EnsembleSize:
    """Number of distinct mask patterns, 2^(units * branches)."""
    if n_units < 1 or n_branches < 1:
        raise DomainError("n_units and n_branches must be positive")
    bits = n_units * n_branches
    return EnsembleSize(bits, 1 << bits if bits <= MAX_EXACT_LOG2 else None)

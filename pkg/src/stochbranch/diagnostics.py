"""Measurement tools: variance shift ratio, branch similarity, activation statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import DTYPE, ConstraintError, DomainError, Rng, atomic_write
from .data import Dataset, batches
from .layers import Mode, SBConv2d, SBLinear
from .network import Network

UNDEFINED_VAR = 1e-12
HISTOGRAM_FORMAT = "stochbranch-histogram/1"


@dataclass
class ActivationProbe:
    """Streaming per-neuron first and second moments of a layer's output.

    Values are accumulated relative to ``shift`` to limit cancellation.
    """

    layer_id: str
    n_neurons: int
    shift: np.ndarray | None = None
    threshold: float = 0.0
    sums: np.ndarray = field(init=False)
    sums_sq: np.ndarray = field(init=False)
    active_counts: list = field(default_factory=list)
    n_examples: int = 0

    def __post_init__(self):
        self.sums = np.zeros(self.n_neurons, dtype=DTYPE)
        self.sums_sq = np.zeros(self.n_neurons, dtype=DTYPE)
        if self.shift is None:
            self.shift = np.zeros(self.n_neurons, dtype=DTYPE)

    def update(self, acts):
        acts = acts.reshape(len(acts), -1)
        d = acts - self.shift
        self.sums += d.sum(axis=0)
        self.sums_sq += (d * d).sum(axis=0)
        self.active_counts.extend(np.count_nonzero(acts > self.threshold, axis=1).tolist())
        self.n_examples += len(acts)

    @property
    def mean(self):
        return self.shift + self.sums / self.n_examples

    @property
    def var(self):
        m = self.sums / self.n_examples
        return np.maximum(self.sums_sq / self.n_examples - m * m, 0.0)


@dataclass
class VsrReport:
    per_neuron_vsr: np.ndarray  # NaN where undefined
    mean_vsr: float
    n_undefined: int
    var_train: np.ndarray
    var_eval: np.ndarray

    def to_dict(self):
        return {
            "mean_vsr": self.mean_vsr,
            "n_neurons": int(self.per_neuron_vsr.size),
            "n_undefined": self.n_undefined,
            "per_neuron_vsr": [None if np.isnan(v) else float(v) for v in self.per_neuron_vsr],
        }


def vsr_from_variances(var_train, var_eval, floor=UNDEFINED_VAR) -> VsrReport:
    """(VAR_train - VAR_eval) / VAR_train per neuron; tiny VAR_train is undefined."""
    var_train = np.asarray(var_train, dtype=DTYPE)
    var_eval = np.asarray(var_eval, dtype=DTYPE)
    defined = var_train >= floor
    vsr = np.full(var_train.shape, np.nan)
    vsr[defined] = (var_train[defined] - var_eval[defined]) / var_train[defined]
    mean = float(vsr[defined].mean()) if defined.any() else float("nan")
    return VsrReport(vsr, mean, int((~defined).sum()), var_train, var_eval)


def _layer_width(network: Network, layer_id) -> int:
    shape = network.input_shape
    for layer in network.layers[: network.index(layer_id) + 1]:
        shape = layer.output_shape(shape)
    return int(np.prod(shape))


def _probe(network, layer_id, ds, mode, rng, shift=None, threshold=0.0, batch_size=500):
    probe = ActivationProbe(str(layer_id), _layer_width(network, layer_id), shift=shift, threshold=threshold)
    for x, _ in batches(ds, batch_size, shuffle=False):
        probe.update(network.forward(x, mode, rng, upto=layer_id))
    return probe


def _shifted_mean(rows):
    # equal rows give back exactly that row
    return rows[0] + (rows - rows[0]).mean(axis=0)


def measure_vsr(network: Network, layer_id, ds: Dataset, n_mc: int = 16, rng: Rng | None = None,
                batch_size: int = 500) -> VsrReport:
    """Variance shift ratio of every neuron in the output of ``layer_id``.

    The train-time variance pools examples and ``n_mc`` independent mask
    draws (stochastic layers sample, batch norm uses running statistics);
    the test-time variance comes from a deterministic EVAL pass. Pooling is
    mean within-pass variance plus variance of the pass means, so a network
    without noise gets a ratio of exactly 0.
    """
    if n_mc < 2:
        raise DomainError(f"n_mc must be >= 2, got {n_mc}")
    network.index(layer_id)
    rng = rng if rng is not None else Rng(0)
    center = _probe(network, layer_id, ds, Mode.EVAL, None, batch_size=batch_size).mean
    var_eval = _probe(network, layer_id, ds, Mode.EVAL, None, shift=center, batch_size=batch_size).var
    means, variances = [], []
    for t in range(n_mc):
        p = _probe(network, layer_id, ds, Mode.SAMPLE, rng.fork(f"pass-{t}"), shift=center, batch_size=batch_size)
        means.append(p.sums / p.n_examples)
        variances.append(p.var)
    means = np.asarray(means)
    grand = _shifted_mean(means)
    var_train = _shifted_mean(np.asarray(variances)) + ((means - grand) ** 2).mean(axis=0)
    return vsr_from_variances(var_train, var_eval)


def _branch_rows(layer) -> np.ndarray:
    if not isinstance(layer, (SBLinear, SBConv2d)):
        raise TypeError(f"not a branched layer: {type(layer).__name__}")
    br = layer.params["branches"]
    # (units, N, fan_in)
    return br.reshape(br.shape[0], br.shape[1], -1).transpose(1, 0, 2)


@dataclass
class CosineReport:
    mean: float
    n_pairs: int
    n_excluded: int


def branch_cosine_report(layer) -> CosineReport:
    """Pairwise cosine between branch weight rows of the same output unit."""
    rows = _branch_rows(layer)
    n = rows.shape[1]
    if n < 2:
        raise ConstraintError(f"need at least 2 branches for a cosine, got {n}")
    # same reduction for dot products and squared norms, and sqrt of the
    # product, so identical rows give exactly 1.0
    sq = (rows * rows).sum(axis=2)
    iu, ju = np.triu_indices(n, k=1)
    num = np.stack([(rows[:, k] * rows[:, l]).sum(axis=1) for k, l in zip(iu, ju)], axis=1)
    den = np.sqrt(sq[:, iu] * sq[:, ju])
    ok = den > 0
    cos = np.clip(num[ok] / den[ok], -1.0, 1.0)
    mean = float(cos.mean()) if cos.size else float("nan")
    return CosineReport(mean, int(cos.size), int((~ok).sum()))


def branch_cosine(layer) -> float:
    return branch_cosine_report(layer).mean


@dataclass
class ActivationStats:
    mean_activation: np.ndarray
    active_counts: np.ndarray
    dead_count: int


def activation_stats(network: Network, layer_id, ds: Dataset, active_threshold: float = 0.0,
                     batch_size: int = 500) -> ActivationStats:
    """EVAL-mode activation summary; a neuron never above threshold is dead."""
    width = _layer_width(network, layer_id)
    ever_active = np.zeros(width, dtype=bool)
    probe = ActivationProbe(str(layer_id), width, threshold=active_threshold)
    for x, _ in batches(ds, batch_size, shuffle=False):
        acts = network.forward(x, Mode.EVAL, upto=layer_id).reshape(len(x), -1)
        ever_active |= (acts > active_threshold).any(axis=0)
        probe.update(acts)
    return ActivationStats(probe.mean, np.asarray(probe.active_counts, dtype=np.int64), int((~ever_active).sum()))


def histogram(values, n_bins: int) -> dict:
    values = np.asarray(values, dtype=DTYPE).reshape(-1)
    if values.size == 0:
        raise DomainError("cannot build a histogram of no values")
    if n_bins < 1:
        raise DomainError(f"n_bins must be >= 1, got {n_bins}")
    lo, hi = float(values.min()), float(values.max())
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi) if hi > lo else None)
    return {"n": int(values.size), "min": lo, "max": hi, "edges": edges.tolist(), "counts": counts.tolist()}


def export_histograms(values, n_bins: int, path, extra: dict | None = None) -> dict:
    """Write one histogram, or a named mapping of them, as a JSON record."""
    if isinstance(values, dict):
        body = {name: histogram(v, n_bins) for name, v in values.items()}
    else:
        body = {"values": histogram(values, n_bins)}
    record = {"format": HISTOGRAM_FORMAT, "n_bins": n_bins, "histograms": body, **(extra or {})}
    atomic_write(path, json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record

"""Independent brute-force checks of the branched-layer semantics.

The exhaustive expectation recomputes the masked forward pass from the
branch tensors directly, without going through the layer implementations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import branch
from .core import DTYPE, Rng, SizeError, as_tensor, bernoulli
from .layers import Dropout, Linear, Mode, ReLU, Tanh

MAX_ENUM_BITS = 20
CHUNK_BITS = 14


@dataclass
class MaskAssignment:
    bits: np.ndarray  # (units, N) of {0, 1}
    probability: float


def _bit_table(n_bits):
    idx = np.arange(1 << n_bits, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n_bits, dtype=np.int64)) & 1).astype(DTYPE)


def _assignment_chunks(keep_probs, n_units):
    """Yield (bits, probabilities) for all 2^(units*N) mask patterns in order.

    Pattern index m has bit b = (m >> b) & 1, and bit b belongs to unit
    b // N, branch b % N. Each chunk fixes the high bits, so its table is a
    shared low-bit table next to constant high bits.
    """
    p = np.asarray(keep_probs, dtype=DTYPE)
    n = p.size
    total_bits = n_units * n
    if total_bits > MAX_ENUM_BITS:
        raise SizeError(
            f"{n_units} units x {n} branches = {total_bits} mask bits exceeds the enumeration "
            f"limit of {MAX_ENUM_BITS}; use monte_carlo_expectation instead"
        )
    p_flat = np.tile(p, n_units)
    low = min(CHUNK_BITS, total_bits)
    low_bits = _bit_table(low)
    low_probs = np.prod(np.where(low_bits == 1.0, p_flat[:low], 1.0 - p_flat[:low]), axis=1)
    high = total_bits - low
    for h in range(1 << high):
        hb = ((h >> np.arange(high, dtype=np.int64)) & 1).astype(DTYPE)
        h_prob = float(np.prod(np.where(hb == 1.0, p_flat[low:], 1.0 - p_flat[low:])))
        bits = np.concatenate([low_bits, np.broadcast_to(hb, (len(low_bits), high))], axis=1)
        yield bits.reshape(-1, n_units, n), low_probs * h_prob


def assignments(keep_probs, n_units):
    """Every ensemble member with its probability (small cases only)."""
    for bits, probs in _assignment_chunks(keep_probs, n_units):
        for b, pr in zip(bits, probs):
            yield MaskAssignment(b, float(pr))


def enumeration_mass(keep_probs, n_units) -> float:
    return float(sum(probs.sum() for _, probs in _assignment_chunks(keep_probs, n_units)))


def _branch_responses(layer, x):
    """r[b, i, k] = sum_j w^k_ij x_bj, written out as an elementwise product-sum."""
    w = as_tensor(layer.params["branches"])  # (N, out, D)
    return (w[None, :, :, :] * x[:, None, None, :]).sum(axis=3).transpose(0, 2, 1)


def exhaustive_expectation(layer, x) -> np.ndarray:
    """Expected TRAIN pre-activation, summed over every mask assignment.

    ``x`` is a vector (D,) or a batch (B, D); the result has matching rank.
    """
    x = as_tensor(x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    keep = np.asarray(layer.buffers["keep_probs"], dtype=DTYPE)
    r = _branch_responses(layer, xb)  # (B, out, N)
    n_units = r.shape[1]
    expected = np.zeros(r.shape[:2], dtype=DTYPE)
    n = keep.size
    # block-diagonal map from a flat mask pattern to every member's outputs:
    # rmap[(i, k), (b, i)] = r[b, i, k]
    rmap = np.zeros((n_units, n, r.shape[0], n_units), dtype=DTYPE)
    for i in range(n_units):
        rmap[i, :, :, i] = r[:, i, :].T
    rmap = rmap.reshape(n_units * n, -1)
    for bits, probs in _assignment_chunks(keep, n_units):
        outs = bits.reshape(len(bits), -1) @ rmap  # (members, B*out) forced-mask outputs
        expected += (probs @ outs).reshape(expected.shape)
    bias = layer.params.get("bias")
    if bias is not None:
        expected = expected + bias
    return expected[0] if single else expected


def monte_carlo_expectation(layer, x, n_samples: int, rng: Rng):
    """Sample mean and per-unit standard error of TRAIN forwards."""
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    x = as_tensor(x).reshape(-1)
    z = layer.forward_train(np.broadcast_to(x, (n_samples, x.size)), rng, cache=False)
    d = z - z[0]  # shifted, so identical samples give exactly zero spread
    mean = z[0] + d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / np.sqrt(n_samples)
    return mean, se


# ---------------------------------------------------------------- reductions


@dataclass
class ReductionReport:
    name: str
    n_checks: int
    n_mismatches: int
    max_deviation: float
    tolerance: float

    @property
    def ok(self):
        return self.n_mismatches == 0


def verify_dropout_reduction(d, d_hat, keep_prob, rng: Rng, n_inputs=100, n_branches=3, tol=1e-12):
    """Group-masked branches + activation vs. summed dense layer + activation + dropout.

    Both ReLU and tanh are checked on ``n_inputs`` random inputs with a shared
    unit mask per input.
    """
    w = rng.fork("weight").normal((d_hat, d))
    sb = branch.random_split(w, branch.BranchSpec.uniform(n_branches, keep_prob), rng.fork("split"))
    grouped = branch.as_group_masked(sb)
    plain = Linear(d, d_hat, bias=False)
    plain.params["weight"] = sb.params["branches"].sum(axis=0)
    drop = Dropout(keep_prob)
    x = rng.fork("x").normal((n_inputs, d))
    m = bernoulli(rng.fork("mask"), (n_inputs, d_hat), keep_prob)
    worst = 0.0
    bad = 0
    for act in (ReLU(), Tanh()):
        a = act.forward(grouped.forward_train(x, masks=m, cache=False))
        b = drop.forward(act.forward(plain.forward(x)), Mode.TRAIN, mask=m)
        dev = np.abs(a - b).max(axis=1)
        worst = max(worst, float(dev.max()))
        bad += int((dev > tol).sum())
    return ReductionReport("dropout", 2 * n_inputs, bad, worst, tol)


def verify_dropconnect_reduction(d, d_hat, keep_prob, rng: Rng, n_inputs=100, tol=1e-12):
    """One-to-one branches vs. connection-masked weights ``(M * W) x``."""
    w = rng.fork("weight").normal((d_hat, d))
    dc = branch.as_dropconnect(w, keep_prob)
    x = rng.fork("x").normal((n_inputs, d))
    m = bernoulli(rng.fork("mask"), (n_inputs, d_hat, d), keep_prob)
    a = dc.forward_train(x, masks=m, cache=False)
    b = np.einsum("bij,ij,bj->bi", m, w, x)
    dev = np.abs(a - b).max(axis=1)
    return ReductionReport("dropconnect", n_inputs, int((dev > tol).sum()), float(dev.max()), tol)


# ---------------------------------------------------------------- gradients


@dataclass
class GradCheck:
    name: str
    rel_error: float

    def ok(self, tol=1e-6):
        return self.rel_error <= tol


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=DTYPE).reshape(-1)
    b = np.asarray(b, dtype=DTYPE).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def _numeric(f, arr, h):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def gradient_check(module, x, seed=0, h=1e-5, weights=None):
    """Central finite differences against ``backward`` for a layer or network.

    The scalar loss is ``sum(R * forward(x))`` for a fixed random ``R``. Every
    forward gets a fresh ``Rng(seed)`` so stochastic layers reuse the same
    masks throughout. Returns one :class:`GradCheck` per input/parameter.
    """
    x = as_tensor(x).copy()

    def run():
        return module.forward(x, Mode.TRAIN, Rng(seed))

    out = run()
    r = Rng(seed).fork("loss-weights").normal(out.shape) if weights is None else weights

    def loss():
        return float((run() * r).sum())

    run()
    dx = module.backward(r)
    layers = module.layers if hasattr(module, "layers") else [module]
    analytic = {"input": dx}
    for layer in layers:
        for k, g in layer.grads.items():
            analytic[f"{layer.name or layer.kind}.{k}"] = g.copy()
    checks = [GradCheck("input", rel_error(dx, _numeric(loss, x, h)))]
    for layer in layers:
        for k, p in layer.params.items():
            name = f"{layer.name or layer.kind}.{k}"
            checks.append(GradCheck(name, rel_error(analytic[name], _numeric(loss, p, h))))
    return checks

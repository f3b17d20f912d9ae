"""Self-contained verification suite behind ``stochbranch verify``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import branch, data, modelfile, oracle
from .core import Rng
from .layers import BatchNorm, Conv2d, Dropout, Linear, MaxPool2d, ReLU, SBConv2d, SBLinear, Tanh
from .network import build_network


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def random_sb_linear(rng: Rng, max_bits=oracle.MAX_ENUM_BITS, max_in=4) -> SBLinear:
    """Small random branched layer with units * branches <= ``max_bits``."""
    pairs = [(u, n) for u in range(1, 6) for n in range(1, 6) if u * n <= max_bits]
    u, n = pairs[int(rng.integers(0, len(pairs)))]
    d = int(rng.integers(1, max_in + 1))
    keep = rng.uniform(0.05, 1.0, n)
    bias = rng.normal(u) if rng.random(()) < 0.5 else None
    return SBLinear(rng.normal((n, u, d)), keep, bias=bias)


def check_collapse_expectation(n_layers=200, max_bits=12, tol=1e-10, seed=0) -> CheckResult:
    rng = Rng(seed).fork("collapse-expectation")
    worst = 0.0
    for i in range(n_layers):
        r = rng.fork(str(i))
        layer = random_sb_linear(r, max_bits)
        x = r.fork("x").normal((3, layer.in_features))
        dev = float(np.abs(oracle.exhaustive_expectation(layer, x) - layer.forward_eval(x)).max())
        worst = max(worst, dev)
    return CheckResult("collapse-expectation", worst <= tol, f"{n_layers} layers, max |dev| {worst:.3e} (tol {tol:g})")


def check_enumeration_mass(n=50, seed=0) -> CheckResult:
    rng = Rng(seed).fork("mass")
    worst = 0.0
    for i in range(n):
        r = rng.fork(str(i))
        units, nb = int(r.integers(1, 4)), int(r.integers(1, 5))
        worst = max(worst, abs(oracle.enumeration_mass(r.uniform(0.0, 1.0, nb), units) - 1.0))
    return CheckResult("enumeration-mass", worst <= 1e-12, f"{n} ensembles, max |mass - 1| {worst:.3e}")


def _reduction(name, verify, n, seed):
    rng = Rng(seed).fork(name)
    bad = 0
    worst = 0.0
    for i in range(n):
        r = rng.fork(str(i))
        d, dh = int(r.integers(1, 7)), int(r.integers(1, 7))
        p = float(r.uniform(0.05, 1.0))
        rep = verify(d, dh, p, r, n_inputs=20)
        bad += rep.n_mismatches
        worst = max(worst, rep.max_deviation)
    return CheckResult(f"{name}-reduction", bad == 0, f"{n} instances, {bad} mismatches, max |dev| {worst:.3e}")


def gradient_cases(seed=0):
    """(label, module, input) triples covering every layer kind."""
    rng = Rng(seed).fork("gradcases")
    cases = []
    lin = Linear(4, 3, name="linear")
    lin.params["weight"] = rng.normal((3, 4))
    lin.params["bias"] = rng.normal(3)
    cases.append(("linear", lin, rng.normal((5, 4))))
    sb = SBLinear(rng.normal((2, 3, 2)), [0.5, 0.7], bias=rng.normal(3), name="sb_linear")
    cases.append(("sb_linear", sb, rng.normal((4, 2))))
    conv = Conv2d(2, 3, 3, stride=1, padding=1, name="conv2d")
    conv.params["weight"] = rng.normal((3, 2, 3, 3))
    conv.params["bias"] = rng.normal(3)
    cases.append(("conv2d", conv, rng.normal((2, 2, 5, 5))))
    conv_s = Conv2d(1, 2, 3, stride=2, padding=0, name="conv2d_strided")
    conv_s.params["weight"] = rng.normal((2, 1, 3, 3))
    cases.append(("conv2d-stride2", conv_s, rng.normal((2, 1, 7, 7))))
    sbc = SBConv2d(rng.normal((3, 2, 2, 3, 3)), [0.5, 0.5, 0.8], bias=rng.normal(2), padding=1, name="sb_conv2d")
    cases.append(("sb_conv2d", sbc, rng.normal((2, 2, 4, 4))))
    bn = BatchNorm(4, name="bn")
    bn.params["gamma"] = rng.normal(4)
    bn.params["beta"] = rng.normal(4)
    cases.append(("batchnorm", bn, rng.normal((8, 4))))
    bn2 = BatchNorm(2, name="bn2d")
    bn2.params["gamma"] = rng.normal(2)
    cases.append(("batchnorm-4d", bn2, rng.normal((3, 2, 3, 3))))
    x = rng.normal((4, 6))
    x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep clear of the ReLU kink
    cases.append(("relu", ReLU(name="relu"), x))
    cases.append(("tanh", Tanh(name="tanh"), rng.normal((4, 6))))
    cases.append(("dropout", Dropout(0.6, name="dropout"), rng.normal((4, 6))))
    cases.append(("maxpool2d", MaxPool2d(2, name="pool"), rng.normal((2, 2, 4, 5))))
    net = build_network(
        {
            "input_shape": [5],
            "layers": [
                # no bias: batch norm right after makes its true gradient exactly 0
                {"kind": "sb_linear", "name": "fc1", "in_features": 5, "out_features": 6, "n_branches": 3,
                 "bias": False},
                {"kind": "batchnorm", "name": "bn1", "num_features": 6},
                {"kind": "tanh", "name": "act1"},
                {"kind": "dropout", "name": "do1", "keep_prob": 0.5},
                {"kind": "linear", "name": "fc2", "in_features": 6, "out_features": 3},
            ],
        },
        rng.fork("net"),
    )
    cases.append(("network", net, rng.normal((6, 5))))
    return cases


def check_gradients(tol=1e-6, seed=0) -> CheckResult:
    failures = []
    worst = 0.0
    for label, module, x in gradient_cases(seed):
        for c in oracle.gradient_check(module, x, seed=seed):
            worst = max(worst, c.rel_error)
            if not c.ok(tol):
                failures.append(f"{label}:{c.name}={c.rel_error:.2e}")
    detail = f"max rel err {worst:.3e} (tol {tol:g})"
    if failures:
        detail += "; failing " + ", ".join(failures)
    return CheckResult("gradient-check", not failures, detail)


def check_pretrained_round_trip(n=50, seed=0) -> CheckResult:
    rng = Rng(seed).fork("pretrained")
    worst = 0.0
    for i in range(n):
        r = rng.fork(str(i))
        nb = int(r.integers(1, 11))
        spec = branch.BranchSpec(nb, r.uniform(0.05, 1.0, nb).tolist(), "pretrained_expand")
        w = r.normal((int(r.integers(1, 6)), int(r.integers(1, 6))))
        worst = max(worst, float(np.abs(branch.collapse(branch.expand_pretrained(w, spec)) - w).max()))
    return CheckResult("pretrained-round-trip", worst <= 1e-12, f"{n} matrices, max |dev| {worst:.3e}")


def check_model_file(seed=0) -> CheckResult:
    from .config import preset_architecture

    net = build_network(preset_architecture("mlp3-lite", ["sb", "bn"], n_branches=2), Rng(seed))
    back, _ = modelfile.loads(modelfile.dumps(net, seed=seed))
    a, b = net.state_dict(), back.state_dict()
    same = a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) and a[k].tobytes() == b[k].tobytes() for k in a)
    return CheckResult("model-file-round-trip", same, f"{len(a)} tensors")


def check_idx_round_trip(seed=0) -> CheckResult:
    rng = Rng(seed).fork("idx")
    pixels = rng.integers(0, 256, (3, 4, 5)).astype(np.uint8)
    labels = rng.integers(0, 10, 3).astype(np.uint8)
    ok = True
    for arr in (pixels, labels):
        raw = data.serialize_idx(arr)
        back = data.parse_idx(raw)
        ok &= np.array_equal(back, arr) and data.serialize_idx(back) == raw
    return CheckResult("idx-round-trip", bool(ok), "images and labels")


def run_all(seed=0) -> list[CheckResult]:
    return [
        check_collapse_expectation(seed=seed),
        check_enumeration_mass(seed=seed),
        _reduction("dropout", oracle.verify_dropout_reduction, 200, seed),
        _reduction("dropconnect", oracle.verify_dropconnect_reduction, 200, seed),
        check_gradients(seed=seed),
        check_pretrained_round_trip(seed=seed),
        check_model_file(seed=seed),
        check_idx_round_trip(seed=seed),
    ]

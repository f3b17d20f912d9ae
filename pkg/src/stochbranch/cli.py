"""Command-line entry point: ``stochbranch train|eval|collapse|diagnose|verify``.

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 data error,
4 model error.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, data, diagnostics, modelfile
from .branch import ensemble_size, turn_off_probability
from .config import ConfigError, RunConfig, load_config
from .core import Rng, atomic_write
from .data import IdxError, Split
from .layers import Mode, SBConv2d, SBLinear
from .network import build_network, collapsed_network, probe_points
from .train import TrainState, evaluate, run_epoch

log = logging.getLogger("stochbranch")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3, 4

METRICS_FORMAT = "stochbranch-metrics/1"
METRICS_HEADER = "epoch,train_loss,train_error,test_error"
DIAG_FORMAT = "stochbranch-diagnostics/1"
COLLAPSE_TOL = 1e-10


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"config error: cannot read {args.config}: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "data_root", None):
        cfg.data.root = args.data_root
    return cfg


def load_data(cfg: RunConfig):
    """(train, test) datasets with the configured stratified fractions."""
    try:
        train = data.load_split(cfg.data.root, Split.TRAIN)
        test = data.load_split(cfg.data.root, Split.TEST)
        rng = Rng(cfg.seed).fork("subsample")
        if cfg.data.fraction < 1.0:
            train = data.stratified_subsample(train, cfg.data.fraction, rng.fork("train"))
        if cfg.data.test_fraction < 1.0:
            test = data.stratified_subsample(test, cfg.data.test_fraction, rng.fork("test"))
    except (OSError, IdxError, data.EmptyClassError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from None
    return train, test


def _load_model(path):
    try:
        return modelfile.load_model(path)
    except (OSError, modelfile.ModelFormatError) as exc:
        raise CliError(EXIT_MODEL, f"model error: {exc}") from None


def format_metrics(records) -> str:
    buf = io.StringIO()
    buf.write(f"# format: {METRICS_FORMAT}\n{METRICS_HEADER}\n")
    for r in records:
        buf.write(f"{r.epoch},{r.train_loss!r},{r.train_error!r},{r.test_error!r}\n")
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    keys = lines[0].split(",")
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in zip(keys, l.split(","))} for l in lines[1:]]


def train_run(cfg: RunConfig, out_dir, train_ds=None, test_ds=None):
    """Train per ``cfg`` and write config.json, metrics.csv, timing.csv, model.sbm."""
    if train_ds is None:
        train_ds, test_ds = load_data(cfg)
    out = Path(out_dir)
    net = build_network(cfg.architecture, Rng(cfg.seed).fork("init"))
    state = TrainState(net)
    rng = Rng(cfg.seed).fork("train")
    for _ in range(cfg.optimizer.epochs):
        run_epoch(state, train_ds, test_ds, cfg.optimizer, rng)
        r = state.metric_log[-1]
        log.info("epoch %d  loss %.4f  train err %.4f  test err %.4f  (%.1fs)",
                 r.epoch, r.train_loss, r.train_error, r.test_error, r.seconds)
    atomic_write(out / "config.json", cfg.dumps())
    atomic_write(out / "metrics.csv", format_metrics(state.metric_log))
    atomic_write(out / "timing.csv", "epoch,seconds\n" + "".join(f"{r.epoch},{r.seconds:.3f}\n" for r in state.metric_log))
    provenance = {"label": cfg.label, "epochs": state.epoch, "optimizer": cfg.to_dict()["optimizer"],
                  "data": {k: v for k, v in cfg.to_dict()["data"].items() if k != "root"}}
    modelfile.save_model(out / "model.sbm", net, seed=cfg.seed, provenance=provenance)
    return state


def cmd_train(args):
    cfg = _config(args)
    out_dir = args.out or cfg.output_dir
    cfg.output_dir = out_dir
    state = train_run(cfg, out_dir)
    last = state.metric_log[-1] if state.metric_log else None
    print(f"trained {cfg.label or 'model'} for {state.epoch} epochs -> {out_dir}")
    if last is not None:
        print(f"final train_error={last.train_error:.4f} test_error={last.test_error:.4f}")
    return EXIT_OK


def cmd_eval(args):
    net, _ = _load_model(args.model)
    if args.config:
        cfg = _config(args)
    else:
        cfg = RunConfig(architecture=net.spec())
        cfg.data.root = args.data_root
    _, test = load_data(cfg)
    loss, err = evaluate(net, test)
    print(f"test_loss={loss!r} test_error={err!r} n={len(test)}")
    return EXIT_OK


def probe_batch(net, n=16, seed=0):
    return Rng(seed).fork("probe").random((n, *net.input_shape))


def expected_forward(net, x):
    """EVAL output with every branched layer replaced by its mask expectation.

    Each branch is run alone through the masked TRAIN path (one-hot forced
    masks) and weighted by its keep probability, so the merged weight is
    never used; this is the reference the collapsed model is checked against.
    """
    for layer in net.layers:
        if not isinstance(layer, (SBLinear, SBConv2d)):
            x = layer.forward(x, Mode.EVAL)
            continue
        units = layer.out_features if isinstance(layer, SBLinear) else layer.out_channels
        p = layer.keep_probs
        out = 0.0
        for k in range(layer.n_branches):
            m = np.zeros((x.shape[0], units, layer.n_branches))
            m[:, :, k] = 1.0
            out = out + p[k] * layer.forward_train(x, masks=m, cache=False)
        if layer.has_bias:
            # every branch run carried the bias once; keep exactly one copy
            b = layer.params["bias"]
            out = out + (1.0 - p.sum()) * (b if isinstance(layer, SBLinear) else b[None, :, None, None])
        x = out
    return x


def collapse_model(net):
    """Collapsed copy plus max EVAL deviation from the expectation on the probe batch."""
    plain = collapsed_network(net)
    x = probe_batch(net)
    dev = float(np.abs(expected_forward(net, x) - plain.forward(x, Mode.EVAL)).max())
    return plain, dev


def cmd_collapse(args):
    net, manifest = _load_model(args.model)
    plain, dev = collapse_model(net)
    n_sb = len(net.sb_layers())
    print(f"collapsed {n_sb} branched layer(s); probe-batch max |deviation| = {dev:.3e}")
    if not dev <= COLLAPSE_TOL:
        print(f"FAILED: collapse changes EVAL outputs by {dev:.3e} > {COLLAPSE_TOL:g}; nothing written")
        return EXIT_VERIFY
    provenance = dict(manifest.get("provenance") or {})
    provenance["collapsed_from"] = os.path.basename(str(args.model))
    provenance["collapse_max_deviation"] = dev
    modelfile.save_model(args.out, plain, seed=manifest.get("seed"), provenance=provenance)
    return EXIT_OK


def diagnose(net, ds, out_dir, n_mc=16, seed=0, n_bins=50):
    """Write the five diagnostic records to ``out_dir``; returns their paths."""
    out = Path(out_dir)
    rng = Rng(seed).fork("diagnose")
    points = probe_points(net)
    vsr = {p: diagnostics.measure_vsr(net, p, ds, n_mc, rng.fork(p)).to_dict() for p in points}
    sb = net.sb_layers()
    cos = {}
    for layer in sb:
        units = layer.out_features if isinstance(layer, SBLinear) else layer.out_channels
        if layer.n_branches >= 2:
            rep = diagnostics.branch_cosine_report(layer)
            cos[layer.name] = {"mean": rep.mean, "n_pairs": rep.n_pairs, "n_excluded": rep.n_excluded, "units": units}
    stats = {p: diagnostics.activation_stats(net, p, ds) for p in points}
    hists = {}
    for p, st in stats.items():
        hists[f"{p}.mean_activation"] = st.mean_activation
        hists[f"{p}.active_per_image"] = st.active_counts
    ens = {}
    for layer in sb:
        units = layer.out_features if isinstance(layer, SBLinear) else layer.out_channels
        e = ensemble_size(units, layer.n_branches)
        ens[layer.name] = {"units": units, "n_branches": layer.n_branches, "log2": e.log2}
    paths = {name: out / f"{name}.json" for name in ("vsr", "branch_cosine", "activation_histograms", "turn_off", "ensemble")}

    def dump(path, body):
        atomic_write(path, json.dumps({"format": DIAG_FORMAT, **body}, indent=2, sort_keys=True) + "\n")

    dump(paths["vsr"], {"n_mc": n_mc, "n_examples": len(ds), "layers": vsr})
    dump(paths["branch_cosine"], {"layers": cos})
    if hists:
        diagnostics.export_histograms(hists, n_bins, paths["activation_histograms"],
                                      extra={"dead_neurons": {p: st.dead_count for p, st in stats.items()}})
    else:
        dump(paths["activation_histograms"], {"histograms": {}, "dead_neurons": {}})
    dump(paths["turn_off"], {"layers": {l.name: turn_off_probability(l.keep_probs.tolist()) for l in sb}})
    dump(paths["ensemble"], {"layers": ens, "total_log2": sum(e["log2"] for e in ens.values())})
    return paths


def cmd_diagnose(args):
    net, _ = _load_model(args.model)
    cfg = _config(args)
    _, test = load_data(cfg)
    out = args.out or str(Path(cfg.output_dir) / "diagnostics")
    paths = diagnose(net, test, out, n_mc=args.n_mc, seed=cfg.seed)
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_verify(args):
    results = checks.run_all(seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="stochbranch", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--data-root", help=f"dataset directory (fallback ${data.DATA_ROOT_ENV})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test error of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-root")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("collapse", help="merge branches into plain layers")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collapse)

    p = sub.add_parser("diagnose", help="write VSR, cosine, activation and ensemble records")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-root")
    p.add_argument("--n-mc", type=int, default=16)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("verify", help="run the built-in oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import assert_close
from stochbranch import modelfile
from stochbranch.cli import main, read_metrics
from stochbranch.layers import Mode, SBLinear
from stochbranch.network import build_network


def write_cfg(path, **kw):
    raw = {"preset": "mlp3-lite", "regularizers": ["sb", "bn"], "branches": {"n_branches": 3},
           "optimizer": {"epochs": 1, "batch_size": 64}, "data": {"fraction": 0.3, "test_fraction": 0.5}, "seed": 1}
    for k, v in kw.items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k] = {**raw[k], **v}
        else:
            raw[k] = v
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture
def env(surrogate_root, monkeypatch):
    monkeypatch.setenv("STOCHBRANCH_DATA", str(surrogate_root))
    return surrogate_root


def test_train_zero_epochs(tmp_path, env):
    cfg = write_cfg(tmp_path / "c.json", optimizer={"epochs": 0})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    text = (tmp_path / "r" / "metrics.csv").read_text()
    assert text == "# format: stochbranch-metrics/1\nepoch,train_loss,train_error,test_error\n"
    net, manifest = modelfile.load_model(tmp_path / "r" / "model.sbm")
    from stochbranch.core import Rng

    init = build_network(manifest["architecture"], Rng(1).fork("init"))
    assert all(init.state_dict()[k].tobytes() == v.tobytes() for k, v in net.state_dict().items())


def test_train_deterministic_and_seed_override(tmp_path, env, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    outs = []
    for name, extra in (("a", []), ("b", []), ("c", ["--seed", "2"])):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name), *extra]) == 0
        outs.append(((tmp_path / name / "metrics.csv").read_bytes(), (tmp_path / name / "model.sbm").read_bytes()))
    assert outs[0] == outs[1]
    assert outs[0][0] != outs[2][0] and outs[0][1] != outs[2][1]
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert len(rows) == 1 and np.isfinite(rows[0]["test_error"])
    assert "epoch,seconds" in (tmp_path / "a" / "timing.csv").read_text()
    saved = json.loads((tmp_path / "c" / "config.json").read_text())
    assert saved["seed"] == 2


def test_train_config_error(tmp_path, env, capsys):
    cfg = write_cfg(tmp_path / "c.json", optimizer={"momentum": 2.0})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
    assert "optimizer" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_train_missing_data(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("STOCHBRANCH_DATA", raising=False)
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 3
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r"), "--data-root", str(tmp_path)]) == 3
    assert "data error" in capsys.readouterr().err


def test_eval(tmp_path, env, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    main(["train", "--config", cfg, "--out", str(tmp_path / "r")])
    capsys.readouterr()
    assert main(["eval", "--model", str(tmp_path / "r" / "model.sbm"), "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "test_error=" in out
    err = float(out.split("test_error=")[1].split()[0])
    assert err == read_metrics(tmp_path / "r" / "metrics.csv")[-1]["test_error"]


def test_collapse_trained(tmp_path, env, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    main(["train", "--config", cfg, "--out", str(tmp_path / "r")])
    capsys.readouterr()
    assert main(["collapse", "--model", str(tmp_path / "r" / "model.sbm"), "--out", str(tmp_path / "p.sbm")]) == 0
    assert "max |deviation|" in capsys.readouterr().out
    sb, _ = modelfile.load_model(tmp_path / "r" / "model.sbm")
    plain, manifest = modelfile.load_model(tmp_path / "p.sbm")
    assert not plain.sb_layers() and manifest["provenance"]["collapse_max_deviation"] < 1e-10
    x = np.random.default_rng(0).random((5, 1, 28, 28))
    assert_close(plain.forward(x, Mode.EVAL), sb.forward(x, Mode.EVAL), 1e-10)
    for k, v in plain.state_dict().items():
        if "running" in k or "gamma" in k or "beta" in k:
            assert v.tobytes() == sb.state_dict()[k].tobytes()


def test_collapse_no_sb_layers(tmp_path):
    from stochbranch.config import preset_architecture
    from stochbranch.core import Rng

    net = build_network(preset_architecture("mlp3-lite", ["bn"]), Rng(0))
    modelfile.save_model(tmp_path / "m.sbm", net, seed=0)
    assert main(["collapse", "--model", str(tmp_path / "m.sbm"), "--out", str(tmp_path / "p.sbm")]) == 0
    plain, _ = modelfile.load_model(tmp_path / "p.sbm")
    assert all(net.state_dict()[k].tobytes() == v.tobytes() for k, v in plain.state_dict().items())


def test_collapse_expanded_round_trip(tmp_path):
    from stochbranch.config import preset_architecture
    from stochbranch.core import Rng

    net = build_network(preset_architecture("mlp3-lite", ["sb"], sb_init="pretrained_expand"), Rng(0))
    modelfile.save_model(tmp_path / "m.sbm", net)
    assert main(["collapse", "--model", str(tmp_path / "m.sbm"), "--out", str(tmp_path / "p.sbm")]) == 0
    plain, _ = modelfile.load_model(tmp_path / "p.sbm")
    for layer in net.sb_layers():
        w = layer.params["branches"][0] * layer.n_branches * layer.keep_probs[0]  # the source W
        assert_close(plain.layer(layer.name).params["weight"], w, 1e-12)


def test_collapse_refuses_when_deviation_too_large(tmp_path, monkeypatch, capsys):
    from stochbranch.config import preset_architecture
    from stochbranch.core import Rng

    net = build_network(preset_architecture("mlp3-lite", ["sb"], n_branches=2), Rng(0))
    modelfile.save_model(tmp_path / "m.sbm", net)
    monkeypatch.setattr(SBLinear, "collapsed_weight", lambda self: 1.01 * self.params["branches"].sum(axis=0))
    assert main(["collapse", "--model", str(tmp_path / "m.sbm"), "--out", str(tmp_path / "p.sbm")]) == 1
    assert not (tmp_path / "p.sbm").exists()


def test_model_errors(tmp_path, capsys):
    from stochbranch.config import preset_architecture

    buf = modelfile.dumps(build_network(preset_architecture("mlp3-lite", [])))
    (tmp_path / "v2.sbm").write_bytes(buf[:8] + (2).to_bytes(4, "little") + buf[12:])
    assert main(["collapse", "--model", str(tmp_path / "v2.sbm"), "--out", str(tmp_path / "o")]) == 4
    assert "version 2" in capsys.readouterr().err
    assert main(["collapse", "--model", str(tmp_path / "none.sbm"), "--out", str(tmp_path / "o")]) == 4


def test_diagnose_bundle(tmp_path, env):
    cfg = write_cfg(tmp_path / "c.json")
    main(["train", "--config", cfg, "--out", str(tmp_path / "r")])
    out = tmp_path / "d"
    assert main(["diagnose", "--model", str(tmp_path / "r" / "model.sbm"), "--config", cfg, "--out", str(out),
                 "--n-mc", "2"]) == 0
    files = {p.name: json.loads(p.read_text()) for p in out.iterdir()}
    assert set(files) == {"vsr.json", "branch_cosine.json", "activation_histograms.json", "turn_off.json",
                          "ensemble.json"}
    assert files["turn_off.json"]["layers"]["fc1"] == 0.125
    assert files["ensemble.json"]["layers"]["fc1"]["log2"] == 256 * 3
    assert set(files["vsr.json"]["layers"]) == {"relu1", "relu2"}
    assert files["activation_histograms.json"]["format"] == "stochbranch-histogram/1"


def test_diagnose_deterministic_and_expanded(tmp_path, env):
    from stochbranch.config import preset_architecture
    from stochbranch.core import Rng

    cfg = write_cfg(tmp_path / "c.json")
    for name, regs, init in (("det", ["bn"], "random_split"), ("exp", ["sb"], "pretrained_expand")):
        net = build_network(preset_architecture("mlp3-lite", regs, n_branches=3, sb_init=init), Rng(0))
        modelfile.save_model(tmp_path / f"{name}.sbm", net)
        assert main(["diagnose", "--model", str(tmp_path / f"{name}.sbm"), "--config", cfg,
                     "--out", str(tmp_path / name), "--n-mc", "2"]) == 0
    vsr = json.loads((tmp_path / "det" / "vsr.json").read_text())
    for rec in vsr["layers"].values():
        assert all(v == 0.0 for v in rec["per_neuron_vsr"] if v is not None)
    cos = json.loads((tmp_path / "exp" / "branch_cosine.json").read_text())
    assert cos["layers"] and all(rec["mean"] == 1.0 for rec in cos["layers"].values())


def test_verify_passes_fast_and_repeats(capsys):
    t = time.perf_counter()
    assert main(["verify"]) == 0
    assert time.perf_counter() - t < 60
    first = capsys.readouterr().out
    assert main(["verify"]) == 0
    assert capsys.readouterr().out == first
    assert "FAIL" not in first


def test_verify_mutation_detected(monkeypatch, capsys):
    monkeypatch.setattr(SBLinear, "collapsed_weight",
                        lambda self: np.tensordot(self.keep_probs * 0.999, self.params["branches"], axes=1))
    assert main(["verify"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  collapse-expectation" in out and "FAILED: collapse-expectation" in out


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "stochbranch.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "eval", "collapse", "diagnose", "verify"):
        assert cmd in r.stdout

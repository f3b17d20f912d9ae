import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochbranch.branch import BranchSpec, expand_pretrained
from stochbranch.core import ConstraintError, DomainError, Rng
from stochbranch.data import Dataset, Split
from stochbranch.diagnostics import (
    activation_stats, branch_cosine, branch_cosine_report, export_histograms, histogram, measure_vsr,
    vsr_from_variances,
)
from stochbranch.layers import Linear, ReLU, SBLinear
from stochbranch.network import Network, build_network


def ds_of(x):
    return Dataset(np.asarray(x, dtype=float), np.zeros(len(x), dtype=np.int64), Split.TEST)


def mlp(kinds, seed=0):
    layers = [{"kind": kinds[0], "name": "fc1", "in_features": 4, "out_features": 16},
              {"kind": "batchnorm", "name": "bn1", "num_features": 16},
              {"kind": "relu", "name": "relu1"}]
    if len(kinds) > 1:
        layers.append({"kind": "dropout", "name": "do1", "keep_prob": 0.5})
    layers.append({"kind": "linear", "name": "fc2", "in_features": 16, "out_features": 3})
    return build_network({"input_shape": [4], "layers": layers}, Rng(seed))


def test_vsr_deterministic_network_is_zero():
    net = mlp(["linear"])
    rep = measure_vsr(net, "relu1", ds_of(Rng(1).normal((64, 4))), n_mc=4, rng=Rng(2))
    defined = ~np.isnan(rep.per_neuron_vsr)
    assert defined.any()
    assert np.all(rep.per_neuron_vsr[defined] == 0.0)
    assert rep.mean_vsr == 0.0


def test_vsr_injected_statistics():
    rep = vsr_from_variances([2.0, 4.0, 0.0], [1.0, 1.0, 0.0])
    assert rep.per_neuron_vsr[0] == 0.5 and rep.per_neuron_vsr[1] == 0.75
    assert np.isnan(rep.per_neuron_vsr[2]) and rep.n_undefined == 1
    assert rep.mean_vsr == 0.625


def test_vsr_floor():
    rep = vsr_from_variances([1e-13, 1.0], [0.0, 0.5])
    assert rep.n_undefined == 1 and rep.mean_vsr == 0.5


@pytest.mark.parametrize("kinds,point", [(["sb_linear"], "relu1"), (["linear", "do"], "do1")])
def test_vsr_stochastic_positive_and_bounded(kinds, point):
    net = mlp(kinds)
    rep = measure_vsr(net, point, ds_of(Rng(1).normal((128, 4))), n_mc=8, rng=Rng(3))
    vals = rep.per_neuron_vsr[~np.isnan(rep.per_neuron_vsr)]
    assert np.all(vals <= 1.0)
    assert rep.mean_vsr > 0.0
    json.dumps(rep.to_dict())


def test_vsr_argument_errors():
    net = mlp(["linear"])
    with pytest.raises(DomainError):
        measure_vsr(net, "relu1", ds_of(np.zeros((4, 4))), n_mc=1)
    with pytest.raises(LookupError):
        measure_vsr(net, "nope", ds_of(np.zeros((4, 4))))


def test_vsr_does_not_touch_model():
    net = mlp(["sb_linear", "do"])
    before = net.state_dict()
    measure_vsr(net, "do1", ds_of(Rng(1).normal((32, 4))), n_mc=3, rng=Rng(0))
    assert all(before[k].tobytes() == v.tobytes() for k, v in net.state_dict().items())


def test_cosine_expanded_is_one(rng):
    layer = expand_pretrained(rng.normal((5, 7)), BranchSpec.uniform(10, 0.5, "pretrained_expand"))
    assert branch_cosine(layer) == 1.0


def test_cosine_expanded_heterogeneous_probs(rng):
    layer = expand_pretrained(rng.normal((5, 7)), BranchSpec(3, [0.2, 0.5, 0.9], "pretrained_expand"))
    assert abs(branch_cosine(layer) - 1.0) <= 1e-15


def test_cosine_orthogonal_and_antiparallel():
    assert branch_cosine(SBLinear([[[1.0, 0.0]], [[0.0, 1.0]]], [0.5, 0.5])) == 0.0
    assert branch_cosine(SBLinear([[[1.0, 0.0]], [[-1.0, 0.0]]], [0.5, 0.5])) == -1.0


def test_cosine_zero_rows_excluded():
    rep = branch_cosine_report(SBLinear([[[1.0, 0.0], [0.0, 0.0]], [[2.0, 0.0], [1.0, 1.0]]], [0.5, 0.5]))
    assert rep.n_pairs == 1 and rep.n_excluded == 1 and rep.mean == 1.0


def test_cosine_needs_two_branches():
    with pytest.raises(ConstraintError):
        branch_cosine(SBLinear(np.ones((1, 2, 2)), [0.5]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_cosine_scale_invariant(seed, scale):
    r = Rng(seed)
    br = r.normal((3, 4, 5))
    base = branch_cosine(SBLinear(br, [0.5] * 3))
    br2 = br.copy()
    br2[int(r.integers(0, 3)), int(r.integers(0, 4))] *= scale
    assert abs(branch_cosine(SBLinear(br2, [0.5] * 3)) - base) <= 1e-12


def relu_net(w, b):
    lin = Linear(len(w[0]), len(w), name="fc")
    lin.params.update(weight=np.asarray(w, float), bias=np.asarray(b, float))
    return Network([lin, ReLU(name="act")], (len(w[0]),))


def test_activation_identity_positive_inputs():
    st_ = activation_stats(relu_net(np.eye(3), np.zeros(3)), "act", ds_of(np.random.default_rng(0).uniform(0.1, 1, (20, 3))))
    assert st_.dead_count == 0 and np.all(st_.active_counts == 3)


def test_activation_dead_neuron():
    st_ = activation_stats(relu_net([[1.0, 0.0], [0.0, 0.0]], [0.0, -1.0]), "act", ds_of(np.ones((5, 2))))
    assert st_.dead_count == 1 and st_.mean_activation[1] == 0.0


def test_activation_all_zero_input():
    st_ = activation_stats(relu_net(np.eye(2), np.zeros(2)), "act", ds_of(np.zeros((4, 2))))
    assert st_.active_counts.tolist() == [0, 0, 0, 0]


def test_histogram_examples():
    h = histogram([0, 0, 1, 1], 2)
    assert h["counts"] == [2, 2] and h["edges"] == [0.0, 0.5, 1.0]
    h1 = histogram([3.0] * 5, 7)
    assert sorted(h1["counts"], reverse=True)[:2] == [5, 0] and sum(h1["counts"]) == 5


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300), st.integers(1, 40))
def test_histogram_conserves(values, n_bins):
    assert sum(histogram(values, n_bins)["counts"]) == len(values)


def test_histogram_errors():
    with pytest.raises(DomainError):
        histogram([], 3)
    with pytest.raises(DomainError):
        histogram([1.0], 0)


def test_export_histograms(tmp_path):
    p = tmp_path / "h.json"
    export_histograms({"a": [0, 1, 2], "b": [5]}, 3, p, extra={"note": 1})
    rec = json.loads(p.read_text())
    assert rec["format"] == "stochbranch-histogram/1" and rec["note"] == 1
    assert rec["histograms"]["a"]["counts"] == [1, 1, 1]

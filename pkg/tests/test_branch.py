import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_close
from stochbranch.branch import (
    BranchSpec, as_dropconnect, as_group_masked, collapse, collapse_layer, ensemble_size, expand_pretrained,
    random_split, turn_off_probability,
)
from stochbranch.core import ConstraintError, DomainError, Rng, ShapeError
from stochbranch.layers import Conv2d, Dropout, Linear, Mode, SBConv2d, SBLinear

probs = st.floats(0.01, 1.0)


def test_spec_defaults():
    s = BranchSpec()
    assert s.n_branches == 10 and s.keep_probs == [0.5] * 10 and s.init.value == "random_split"


@pytest.mark.parametrize("kw", [dict(n_branches=0), dict(n_branches=2, keep_probs=[0.5]),
                                dict(n_branches=1, keep_probs=[0.0]), dict(n_branches=1, keep_probs=[1.1])])
def test_spec_validation(kw):
    with pytest.raises((DomainError, ShapeError)):
        BranchSpec(**kw)


def test_expand_hand():
    layer = expand_pretrained([[2.0]], BranchSpec(2, [0.5, 0.5], "pretrained_expand"))
    assert layer.params["branches"].tolist() == [[[2.0]], [[2.0]]]


def test_expand_identity():
    w = np.array([[1.5, -2.0], [0.25, 3.0]])
    layer = expand_pretrained(w, BranchSpec(1, [1.0], "pretrained_expand"))
    assert np.array_equal(layer.params["branches"][0], w)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1), st.data())
def test_expand_round_trip(n, out, d, seed, data):
    p = data.draw(st.lists(probs, min_size=n, max_size=n))
    w = Rng(seed).normal((out, d))
    assert_close(collapse(expand_pretrained(w, BranchSpec(n, p, "pretrained_expand"))), w, 1e-12)


def test_expand_conv_round_trip(rng):
    w = rng.normal((3, 2, 3, 3))
    like = Conv2d(2, 3, 3, stride=2, padding=1)
    layer = expand_pretrained(w, BranchSpec.uniform(10, 0.5), like=like)
    assert isinstance(layer, SBConv2d) and layer.stride == 2 and layer.padding == 1
    assert_close(collapse(layer), w, 1e-12)


def test_random_split_single_branch(rng):
    w = rng.normal((3, 4))
    assert np.array_equal(random_split(w, BranchSpec(1, [1.0]), rng).params["branches"][0], w)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_random_split_conserves_sum(n, out, d, seed):
    r = Rng(seed)
    w = r.normal((out, d)) * 3
    br = random_split(w, BranchSpec.uniform(n), r.fork("split")).params["branches"]
    assert_close(br.sum(axis=0), w, 1e-12)
    s = np.abs(w).max() / n
    assert np.all(np.abs(br[:-1]) <= s)


def test_random_split_seeds_differ(rng):
    w = rng.normal((3, 4))
    a = random_split(w, BranchSpec.uniform(4), Rng(1)).params["branches"]
    b = random_split(w, BranchSpec.uniform(4), Rng(2)).params["branches"]
    assert not np.array_equal(a, b)


def test_random_split_collapse_is_not_w(rng):
    w = rng.normal((3, 4))
    layer = random_split(w, BranchSpec.uniform(5, 0.5), rng)
    assert_close(collapse(layer), 0.5 * w, 1e-12)  # uniform p: sum p W^k = p W


def test_collapse_examples():
    layer = SBLinear([[[1.0, 2.0]], [[-1.0, 0.5]]], [0.5, 0.5])
    assert collapse(layer).tolist() == [[0.0, 1.25]]
    assert np.array_equal(collapse(SBLinear(np.ones((1, 2, 2)), [1.0])), np.ones((2, 2)))
    assert np.array_equal(collapse(SBLinear(np.zeros((3, 2, 2)), [0.2, 0.4, 0.6])), np.zeros((2, 2)))


def test_collapse_leaves_layer_unchanged(rng):
    layer = SBLinear(rng.normal((3, 2, 2)), [0.2, 0.4, 0.6])
    before = layer.params["branches"].copy()
    collapse(layer)
    assert np.array_equal(before, layer.params["branches"])


@pytest.mark.parametrize("conv", [False, True])
def test_collapse_layer_matches_eval(rng, conv):
    if conv:
        layer = SBConv2d(rng.normal((3, 2, 2, 3, 3)), [0.5, 0.3, 0.9], bias=rng.normal(2), padding=1)
        x = rng.normal((2, 2, 5, 5))
        assert isinstance(collapse_layer(layer), Conv2d)
    else:
        layer = SBLinear(rng.normal((3, 4, 5)), [0.5, 0.3, 0.9], bias=rng.normal(4))
        x = rng.normal((6, 5))
        assert isinstance(collapse_layer(layer), Linear)
    assert_close(collapse_layer(layer).forward(x), layer.forward(x, Mode.EVAL), 1e-12)


# ---------------------------------------------------------------- group masking


def test_group_masked_unequal_probs():
    with pytest.raises(ConstraintError):
        as_group_masked(SBLinear(np.ones((2, 1, 1)), [0.5, 0.6]))


def test_group_masked_zero_mask(rng):
    g = as_group_masked(SBLinear(rng.normal((3, 4, 2)), [0.5] * 3))
    z = g.forward_train(rng.normal((5, 2)), masks=np.zeros((5, 4)))
    assert np.all(z == 0.0)


def test_group_masked_equals_linear_plus_dropout(rng):
    br = rng.normal((3, 4, 2))
    g = as_group_masked(SBLinear(br, [0.5] * 3))
    x = rng.normal((5, 2))
    m = (rng.random((5, 4)) < 0.5).astype(float)
    lin = Linear(2, 4, bias=False)
    lin.params["weight"] = br.sum(axis=0)
    ref = Dropout(0.5).forward(lin.forward(x), Mode.TRAIN, mask=m)
    assert_close(g.forward_train(x, masks=m), ref, 1e-12)


def test_group_masked_keep_one_deterministic(rng):
    br = rng.normal((3, 4, 2))
    g = as_group_masked(SBLinear(br, [1.0] * 3))
    x = rng.normal((5, 2))
    assert_close(g.forward(x, Mode.TRAIN, rng), x @ br.sum(axis=0).T, 1e-12)


# ---------------------------------------------------------------- DropConnect


def test_dropconnect_single_input():
    dc = as_dropconnect([[3.0]], 0.5)
    assert dc.n_branches == 1
    assert dc.forward_train(np.array([[2.0]]), masks=np.array([[[1.0]]])).tolist() == [[6.0]]


def test_dropconnect_hand():
    dc = as_dropconnect([[1.0, 2.0]], 0.5)
    assert dc.forward_train(np.ones((1, 2)), masks=np.array([[[1.0, 0.0]]])).tolist() == [[1.0]]


def test_dropconnect_collapse(rng):
    w = rng.normal((3, 4))
    assert_close(collapse(as_dropconnect(w, 0.3)), 0.3 * w, 1e-15)


# ---------------------------------------------------------------- counting


def test_turn_off_examples():
    assert turn_off_probability([0.5] * 10) == 0.0009765625
    assert turn_off_probability([0.3, 1.0, 0.2]) == 0.0
    assert turn_off_probability([0.5]) == 0.5


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 50))
def test_turn_off_uniform_identity(p, n):
    assert turn_off_probability([p] * n) == (1 - p) ** n


def test_turn_off_domain():
    with pytest.raises(DomainError):
        turn_off_probability([0.5, 1.5])


def test_ensemble_size():
    assert ensemble_size(1, 1).count == 2
    assert ensemble_size(2, 2).count == 16
    e = ensemble_size(1024, 10)
    assert e.log2 == 10240 and not e.exact
    assert ensemble_size(64, 10).count == 2**640

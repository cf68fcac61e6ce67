import json
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pc_lab.analysis import (
    CostLedger, compare_gradients, cost_model, layer_costs, measure_runtime, modeled_times,
    trace_first_nonzero,
)
from pc_lab.chain import ChainSpec, forward
from pc_lab.engines import GradientSet, InferenceConfig, backprop_grad, fpa_inference

from conftest import make_net

GOLDEN = Path(__file__).parent / "golden"


# ------------------------------------------------------------------ tracing

def test_trace_depth5_layer2():
    params, x, t = make_net(0, (3, 4, 4, 4, 4, 2), "tanh")
    rep = trace_first_nonzero("vpc", params, x, t, InferenceConfig("vpc", 0.5, 5))
    assert rep.first_nonzero_step[2] == 3
    assert rep.first_nonzero_step[5] == 0


@pytest.mark.parametrize("gamma", [0.25, 0.5, 1.0])
def test_trace_depth6_both_variants(gamma):
    params, x, t = make_net(1, (4, 6, 6, 6, 6, 6, 3), "tanh", bias=False, batch=2)
    reps = [trace_first_nonzero(v, params, x, t, InferenceConfig(v, gamma, 6)) for v in ("vpc", "fpa")]
    for rep in reps:
        assert rep.matches_expected()
    assert reps[0].first_nonzero_step == reps[1].first_nonzero_step == {l: 6 - l for l in range(1, 7)}


def test_trace_zero_loss_warns():
    params, x, _ = make_net(2, (3, 4, 4, 2), "tanh")
    t = forward(params, x, np.zeros((1, 2))).mu[-1]
    with pytest.warns(RuntimeWarning, match="zero output loss"):
        rep = trace_first_nonzero("fpa", params, x, t)
    assert all(v is None for v in rep.first_nonzero_step.values())
    assert not rep.matches_expected()


# ---------------------------------------------------------------- cost model

def test_layer_costs():
    np.testing.assert_array_equal(layer_costs(ChainSpec((2, 3, 1), "tanh")), [15.0, 7.0])


@pytest.mark.parametrize("variant", ["fpa", "zil"])
def test_uniform_widths_equality(variant):
    for L in range(1, 9):
        spec = ChainSpec((16,) * (L + 1), "tanh")
        led = cost_model(spec, variant, L)
        c = layer_costs(spec)
        assert led.modeled_time_variant == c.sum() + L * 2 * c.max() == 3 * c.sum()
        assert led.modeled_time_variant == led.modeled_time_backprop


def test_unequal_widths_strict():
    led = cost_model(ChainSpec((4, 8, 16, 2), "tanh"), "fpa", 3)
    assert led.modeled_time_variant > led.modeled_time_backprop and led.bound_satisfied


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 1e3), min_size=1, max_size=12), st.integers(0, 40),
       st.sampled_from(["fpa", "zil", "vpc"]))
def test_bound_holds_for_t_c_at_least_L(costs, extra, variant):
    t_bp, t_var = modeled_times(costs, variant, len(costs) + extra)
    assert t_var >= t_bp


def test_cheap_gradient_constant_knob():
    t_bp3, _ = modeled_times([1.0, 2.0], "fpa", 2, constant=3)
    t_bp5, _ = modeled_times([1.0, 2.0], "fpa", 2, constant=5)
    assert (t_bp3, t_bp5) == (9.0, 15.0)


def test_modeled_times_rejects_bad_costs():
    with pytest.raises(ValueError):
        modeled_times([], "fpa", 1)
    with pytest.raises(ValueError):
        modeled_times([1.0, -1.0], "fpa", 1)


# ------------------------------------------------------------------ timing

def test_measure_runtime_three_samples():
    params, x, t = make_net(3, (4, 8, 8, 2), "tanh")
    stats = measure_runtime("backprop", params, x, t, repetitions=3)
    assert len(stats.samples) == 3 and stats.median > 0 and stats.iqr >= 0
    assert stats.metadata["blas_threads"] == 1
    with pytest.raises(ValueError):
        measure_runtime("backprop", params, x, t, repetitions=2)


def test_fpa_zero_steps_close_to_forward():
    params, x, t = make_net(4, (64, 128, 128, 128, 10), "tanh", batch=32)
    fwd = measure_runtime("forward", params, x, t, repetitions=15)
    fpa = measure_runtime("fpa", params, x, t, InferenceConfig("fpa", 1.0, 0), repetitions=15)
    # T = 0 adds only the output error and the parameter VJPs on top of the forward pass;
    # allow a generous noise margin
    assert fpa.median < 10 * fwd.median + 1e-3


# -------------------------------------------------------------- similarity

def test_cosine_identical_and_opposite():
    params, x, t = make_net(5, (3, 5, 5, 2), "tanh", bias=True)
    g = backprop_grad(params, x, t)
    same = compare_gradients(g, g)
    assert all(c == pytest.approx(1.0, abs=1e-15) for c in same.per_layer)
    neg = compare_gradients(g, g.scaled(-1.0))
    assert neg.global_cosine == pytest.approx(-1.0, abs=1e-15)
    assert all(c == pytest.approx(-1.0, abs=1e-15) for c in neg.per_layer)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_symmetric(seed):
    params, x, t = make_net(seed, (3, 5, 4, 2), "tanh", bias=True)
    a = backprop_grad(params, x, t)
    b = fpa_inference(params, x, t, InferenceConfig("fpa", 0.4, 2))[1]
    ab, ba = compare_gradients(a, b), compare_gradients(b, a)
    assert ab.per_layer == ba.per_layer and ab.zero_block == ba.zero_block
    assert ab.global_cosine == pytest.approx(ba.global_cosine, abs=1e-15)


def test_zero_block_flagged_not_nan():
    params, x, t = make_net(6, (3, 4, 4, 2), "tanh")
    zero = GradientSet.zeros_like(params)
    rep = compare_gradients(zero, backprop_grad(params, x, t))
    assert rep.per_layer == (None, None, None) and all(rep.zero_block) and rep.global_cosine is None


def test_fpa_short_run_golden():
    gold = json.loads((GOLDEN / "fpa_short_cosine.json").read_text())
    params, x, t = make_net(21, (5, 8, 8, 8, 8, 8, 3), "tanh", bias=True, batch=4)
    g = fpa_inference(params, x, t, InferenceConfig("fpa", gold["gamma"], gold["steps"]))[1]
    rep = compare_gradients(g, backprop_grad(params, x, t))
    assert list(rep.zero_block) == gold["zero_block"]
    assert rep.zero_block[0] and rep.zero_block[1]
    for got, want in zip(rep.per_layer, gold["per_layer"]):
        assert (got is None) == (want is None)
        if want is not None:
            assert got == pytest.approx(want, abs=1e-12)
    assert rep.global_cosine == pytest.approx(gold["global_cosine"], abs=1e-12)
    assert rep.global_cosine < 1.0


def test_ledger_bound_property():
    led = CostLedger(3)
    assert led.bound_satisfied is None

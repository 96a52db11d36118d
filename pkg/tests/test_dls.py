"""Layer scoring, exploit/explore selection, masking, and the step schedule."""

import numpy as np
import pytest

from rosalab.dls import (
    DLSConfig,
    DLSState,
    dls_step,
    inactive_trainable_parameters,
    layer_score,
    mask_gradients,
    select_layers,
)
from rosalab.errors import ConfigError, ScoringError
from rosalab.model import ModelConfig, TransformerLM
from rosalab.roae import RoAEConfig, attach_roae
from rosalab.tensor import backward, cross_entropy_mean

TOY = ModelConfig(d=32, n_layers=2, h_q=4, h_k=4, d_h=8, vocab=64, max_seq=64)


def adapted_model(seed=0):
    model = TransformerLM(TOY, np.random.default_rng(seed))
    model.freeze_base()
    attach_roae(model, RoAEConfig(rank=4), np.random.default_rng(seed + 1))
    return model


def run_backward(model, rng):
    tokens = rng.integers(0, 64, size=(2, 8))
    targets = rng.integers(0, 64, size=(2, 8))
    model.zero_grad()
    backward(cross_entropy_mean(model.lm_forward(tokens), targets))


def test_layer_score_cases(rng):
    assert layer_score(np.zeros(4), np.zeros(4)) == 0.0
    a = np.zeros(9)
    a[0] = 3.0
    f = np.zeros(5)
    f[2] = 4.0
    assert layer_score(a, f) == 5.0
    for _ in range(10):
        ga, gf = rng.normal(size=16), rng.normal(size=16)
        naive = np.sqrt(sum(x * x for x in ga) + sum(x * x for x in gf))
        assert abs(layer_score(ga, gf) - naive) <= 1e-12


def test_layer_score_requires_gradients():
    with pytest.raises(ScoringError, match="frozen"):
        layer_score(None, np.zeros(3))


def test_config_validation():
    with pytest.raises(ConfigError):
        DLSConfig(k_ratio=0.0)
    with pytest.raises(ConfigError):
        DLSConfig(p_exploit=1.5)
    with pytest.raises(ConfigError):
        DLSConfig(interval_u=0)
    assert DLSConfig(k_ratio=0.5).k_for(4) == 2
    assert DLSConfig(k_ratio=0.5).k_for(5) == 3  # ceil
    assert DLSConfig(k_ratio=0.1).k_for(2) == 1  # never empty


def test_exploit_selects_top_k():
    cfg = DLSConfig(k_ratio=0.5, p_exploit=1.0)
    result = select_layers([1.0, 2.0, 3.0, 4.0], cfg, np.random.default_rng(0))
    assert result.mode == "exploit"
    assert set(result.selected) == {2, 3}


def test_exploit_tie_break_prefers_lower_index():
    cfg = DLSConfig(k_ratio=0.5, p_exploit=1.0)
    result = select_layers([1.0, 1.0, 1.0, 1.0], cfg, np.random.default_rng(0))
    assert result.selected == (0, 1)


def test_explore_is_seeded_and_distinct():
    cfg = DLSConfig(k_ratio=0.5, p_exploit=0.0)
    picks = [
        select_layers([0.0] * 8, cfg, np.random.default_rng(42)).selected for _ in range(3)
    ]
    assert picks[0] == picks[1] == picks[2]
    assert len(set(picks[0])) == 4
    assert all(0 <= i < 8 for i in picks[0])
    modes = {select_layers([0.0] * 8, cfg, np.random.default_rng(s)).mode for s in range(5)}
    assert modes == {"explore"}


def test_mask_gradients(rng):
    model = adapted_model()
    run_backward(model, rng)
    before = [p.grad.copy() for p in model.layer_trainable_parameters(0)]
    mask_gradients(model, selected=(0, 1))
    for p, b in zip(model.layer_trainable_parameters(0), before):
        np.testing.assert_array_equal(p.grad, b)

    mask_gradients(model, selected=(1,))
    assert all(np.all(p.grad == 0) for p in model.layer_trainable_parameters(0))
    assert any(np.abs(p.grad).max() > 0 for p in model.layer_trainable_parameters(1))

    run_backward(model, rng)
    mask_gradients(model, selected=())
    for i in range(2):
        assert all(np.all(p.grad == 0) for p in model.layer_trainable_parameters(i))


def test_dls_step_schedule(rng):
    model = adapted_model()
    cfg = DLSConfig(k_ratio=0.5, p_exploit=1.0, interval_u=40, warmup_steps=10)
    state = DLSState(cfg, 2, np.random.default_rng(0))
    trace = {}
    for step in range(1, 130):
        run_backward(model, rng)
        dls_step(state, step, model)
        trace[step] = state.selected
        if step <= 10:
            assert state.selected == (0, 1) and state.last_mode == "warmup"
        elif step < 40:  # warmup set persists until the first event fires
            assert state.selected == (0, 1)
        else:
            assert len(state.selected) == 1
    assert [e.step for e in state.events] == [40, 80, 120]
    # between events the active set is constant
    for lo, hi in ((40, 79), (80, 119)):
        assert all(trace[s] == trace[lo] for s in range(lo, hi + 1))


def test_warmup_trains_all_layers(rng):
    model = adapted_model()
    cfg = DLSConfig(warmup_steps=100, interval_u=40)
    state = DLSState(cfg, 2, np.random.default_rng(0))
    run_backward(model, rng)
    dls_step(state, 40, model)  # within warmup despite being a multiple of u
    assert state.selected == (0, 1)
    assert state.events == []
    assert inactive_trainable_parameters(state, model) == []


def test_inactive_parameters_listing():
    model = adapted_model()
    state = DLSState(DLSConfig(), 2, np.random.default_rng(0), selected=(1,))
    skipped = inactive_trainable_parameters(state, model)
    assert {id(p) for p in skipped} == {id(p) for p in model.layer_trainable_parameters(0)}

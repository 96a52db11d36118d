"""Run-level guarantees: determinism, identity at init, freezing, resume."""

import os

import numpy as np
import pytest

from rosalab.config import RunConfig
from rosalab.data import make_batch
from rosalab.errors import TrainingAbort
from rosalab.train import (
    build_trainer,
    evaluate,
    load_trainer,
    run_training,
    save_trainer,
    train_step,
)


def tiny_cfg(tmp_path, name, **over):
    base = dict(
        task="copy",
        steps=8,
        batch=4,
        seq_len=16,
        seed=11,
        rank=4,
        warmup_steps=2,
        interval_u=3,
        run_dir=str(tmp_path / name),
    )
    base.update(over)
    return RunConfig(**base)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_first_step_loss_equals_frozen_base(tmp_path):
    adapted = build_trainer(tiny_cfg(tmp_path, "a"))
    plain = build_trainer(tiny_cfg(tmp_path, "b", adapter="none"))
    batch_a = make_batch(adapted.source, 4, 16, adapted.batch_rng)
    batch_b = make_batch(plain.source, 4, 16, plain.batch_rng)
    np.testing.assert_array_equal(batch_a.inputs, batch_b.inputs)
    assert train_step(adapted, batch_a, 1) == train_step(plain, batch_b, 1)


def test_identity_at_init_with_pretraining(tmp_path):
    adapted = build_trainer(tiny_cfg(tmp_path, "a", pretrain_steps=5))
    plain = build_trainer(tiny_cfg(tmp_path, "b", pretrain_steps=5, adapter="none"))
    assert adapted.base_metrics == plain.base_metrics


def test_run_training_is_deterministic(tmp_path):
    r1 = run_training(tiny_cfg(tmp_path, "run1"))
    r2 = run_training(tiny_cfg(tmp_path, "run2"))
    assert r1.final_loss == r2.final_loss
    assert read(os.path.join(r1.run_dir, "loss.csv")) == read(os.path.join(r2.run_dir, "loss.csv"))
    assert read(os.path.join(r1.run_dir, "final.ckpt")) == read(os.path.join(r2.run_dir, "final.ckpt"))


def test_seed_changes_the_trace(tmp_path):
    r1 = run_training(tiny_cfg(tmp_path, "s1"))
    r2 = run_training(tiny_cfg(tmp_path, "s2", seed=12))
    assert read(os.path.join(r1.run_dir, "loss.csv")) != read(os.path.join(r2.run_dir, "loss.csv"))


def test_base_weights_frozen_through_training(tmp_path):
    state = build_trainer(tiny_cfg(tmp_path, "fr"))
    snapshot = {
        name: p.data.copy()
        for name, p in state.model.named_parameters()
        if ".roae." not in name
    }
    for step in range(1, 9):
        batch = make_batch(state.source, 4, 16, state.batch_rng)
        train_step(state, batch, step)
    for name, p in state.model.named_parameters():
        if ".roae." not in name:
            np.testing.assert_array_equal(p.data, snapshot[name], err_msg=name)


def test_resume_matches_monolithic(tmp_path):
    cfg_full = tiny_cfg(tmp_path, "mono", steps=10)
    run_training(cfg_full)

    cfg_half = tiny_cfg(tmp_path, "half", steps=5, save_every=5)
    run_training(cfg_half)
    cfg_rest = tiny_cfg(
        tmp_path,
        "rest",
        steps=10,
        resume_from=os.path.join(cfg_half.run_dir, "step000005.ckpt"),
    )
    run_training(cfg_rest)

    assert read(os.path.join(cfg_full.run_dir, "final.ckpt")) == read(
        os.path.join(cfg_rest.run_dir, "final.ckpt")
    )
    mono_rows = read(os.path.join(cfg_full.run_dir, "loss.csv")).decode().splitlines()
    rest_rows = read(os.path.join(cfg_rest.run_dir, "loss.csv")).decode().splitlines()
    assert mono_rows[6:] == rest_rows[1:]  # steps 6..10 agree row for row


def test_save_load_roundtrip_state(tmp_path):
    state = build_trainer(tiny_cfg(tmp_path, "rt"))
    for step in range(1, 5):
        batch = make_batch(state.source, 4, 16, state.batch_rng)
        train_step(state, batch, step)
    path = str(tmp_path / "state.ckpt")
    save_trainer(state, path)
    loaded = load_trainer(path, run_dir=state.cfg.run_dir, steps=state.cfg.steps)
    assert loaded.step == state.step
    for (n1, p1), (n2, p2) in zip(state.model.named_parameters(), loaded.model.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data, err_msg=n1)
    assert evaluate(state) == evaluate(loaded)
    b1 = make_batch(state.source, 4, 16, state.batch_rng)
    b2 = make_batch(loaded.source, 4, 16, loaded.batch_rng)
    np.testing.assert_array_equal(b1.inputs, b2.inputs)


def test_nonfinite_loss_aborts_with_context(tmp_path):
    cfg = tiny_cfg(tmp_path, "abort", steps=4)
    state = build_trainer(cfg)
    state.model.embed.data = np.full_like(state.model.embed.data, np.inf)
    with pytest.raises(TrainingAbort) as err:
        run_training(cfg, state=state)
    assert err.value.step == 1


def test_run_dir_layout(tmp_path):
    cfg = tiny_cfg(tmp_path, "layout", interval_u=2, warmup_steps=1)
    run_training(cfg)
    for name in ("config.cfg", "loss.csv", "selection.log", "final.ckpt", "summary.txt"):
        assert os.path.exists(os.path.join(cfg.run_dir, name)), name
    lines = read(os.path.join(cfg.run_dir, "selection.log")).decode().splitlines()
    assert lines and all(line.startswith("step=") for line in lines)
    csv = read(os.path.join(cfg.run_dir, "loss.csv")).decode().splitlines()
    assert csv[0] == "step,loss" and len(csv) == 9


def test_twincopy_task_runs(tmp_path):
    cfg = tiny_cfg(tmp_path, "twin", task="twincopy", seq_len=16, pretrain_steps=3)
    state = build_trainer(cfg)
    batch = make_batch(state.source, 4, 16, state.batch_rng)
    assert np.isfinite(train_step(state, batch, 1))

"""Joint training loop: forward pass, update partition, probe, saliency."""

import csv
import math

import numpy as np
import pytest

from dualstream.config import Config
from dualstream.data import AugmentConfig, make_view_pair, synth_disks, synth_shapes
from dualstream.errors import ConfigError
from dualstream.losses import loss_att, loss_t
from dualstream.rng import SeededRng
from dualstream.schedules import LrSchedule, TauSchedule
from dualstream.tensor import Tensor, backward
from dualstream.train import (
    METRICS_COLUMNS,
    ModelConfig,
    TrainState,
    attention_map,
    encode_features,
    forward_once,
    init_dual_stream,
    linear_probe,
    pretrain,
    probe_split,
    train_linear_classifier,
    train_step,
    write_metrics,
)
from dualstream import tree as tr


def small_cfg(**over):
    base = dict(dataset="synth:32:0", epochs=2, batch_size=16, n_blocks=2,
                warmup_epochs=1)
    base.update(over)
    return Config(**base)


def view_batch(n, seed=0):
    records = synth_shapes(n, seed)
    rng = SeededRng(seed + 1000)
    pairs = [make_view_pair(r, AugmentConfig(), rng) for r in records]
    v1 = Tensor(np.stack([p.view1 for p in pairs]))
    v2 = Tensor(np.stack([p.view2 for p in pairs]))
    return v1, v2


def make_state(total_steps=100, warmup=5, batch=16, seed=0):
    return TrainState(
        step=0, total_steps=total_steps,
        lr_sched=LrSchedule(base_lr=0.05 * batch / 256.0,
                            warmup_steps=warmup, total_steps=total_steps),
        tau_sched=TauSchedule(tau_base=0.99, total_steps=total_steps),
        rng=SeededRng(seed),
    )


@pytest.fixture(scope="module")
def setup():
    cfg = small_cfg()
    model = ModelConfig.from_run_config(cfg)
    params = init_dual_stream(model, seed=0)
    return cfg, model, params


# ---------------------------------------------------------------------------
# forward


def test_forward_once_shapes_and_finiteness(setup):
    cfg, model, params = setup
    v1, v2 = view_batch(4)
    out = forward_once(params, model, v1, v2, training=True)
    for f in (out.f1, out.f2, out.f3, out.f4):
        assert f.shape == (4, 64)
        assert np.all(np.isfinite(f.data))


def test_momentum_branches_carry_no_grad(setup):
    cfg, model, params = setup
    v1, v2 = view_batch(4)
    out = forward_once(params, model, v1, v2, training=True)
    assert not out.f2.requires_grad
    assert not out.f4.requires_grad


def test_t_stream_loss_never_reaches_encoder(setup):
    """The transformer consumes a detached feature map, so L_t has zero
    gradient into every encoder parameter."""
    cfg, model, params = setup
    tr.zero_grads(params["online"])
    v1, v2 = view_batch(4, seed=1)
    out = forward_once(params, model, v1, v2, training=True)
    backward(loss_t(out.f3, out.f4))
    for name, t in tr.grad_leaves(params["online"]["encoder"]):
        assert t.grad is None, f"L_t leaked into encoder/{name}"
    touched = [t for _, t in tr.grad_leaves(params["online"]["transformer"])
               if t.grad is not None]
    assert touched, "L_t should train the transformer"


def test_alignment_loss_never_reaches_transformer(setup):
    """L_att sees f3 behind a stop-gradient, so it trains the CNN stream
    only."""
    cfg, model, params = setup
    tr.zero_grads(params["online"])
    v1, v2 = view_batch(4, seed=2)
    out = forward_once(params, model, v1, v2, training=True)
    backward(loss_att(out.f1, out.f2, out.f3, out.f4))
    for name, t in tr.grad_leaves(params["online"]["transformer"]):
        assert t.grad is None, f"L_att leaked into transformer/{name}"
    for name, t in tr.grad_leaves(params["online"]["projector2"]):
        assert t.grad is None, f"L_att leaked into projector2/{name}"
    touched = [t for _, t in tr.grad_leaves(params["online"]["encoder"])
               if t.grad is not None]
    assert touched, "L_att should train the encoder"


# ---------------------------------------------------------------------------
# train_step


def test_train_step_updates_online_and_momentum():
    cfg = small_cfg()
    model = ModelConfig.from_run_config(cfg)
    params = init_dual_stream(model, seed=3)
    before_online = {n: t.data.copy()
                     for n, t in tr.grad_leaves(params["online"])}
    before_momentum = {n: t.data.copy()
                       for n, t in tr.flatten(params["momentum"])}
    v1, v2 = view_batch(8, seed=4)
    state = make_state()
    bd = train_step(state, params, model, v1, v2, cfg)
    assert state.step == 1
    assert math.isfinite(bd.l_total)
    changed = sum(not np.array_equal(before_online[n], t.data)
                  for n, t in tr.grad_leaves(params["online"]))
    assert changed > 0
    m_changed = sum(not np.array_equal(before_momentum[n], t.data)
                    for n, t in tr.flatten(params["momentum"]))
    assert m_changed > 0  # tau < 1 at step 0 pulls momentum toward online


def test_momentum_groups_have_zero_grad_after_step():
    cfg = small_cfg()
    model = ModelConfig.from_run_config(cfg)
    params = init_dual_stream(model, seed=5)
    v1, v2 = view_batch(8, seed=5)
    train_step(make_state(), params, model, v1, v2, cfg)
    for name, t in tr.flatten(params["momentum"]):
        assert t.grad is None or np.all(t.grad == 0), \
            f"momentum/{name} received gradient"


def test_train_step_past_schedule_end():
    cfg = small_cfg()
    model = ModelConfig.from_run_config(cfg)
    params = init_dual_stream(model, seed=6)
    v1, v2 = view_batch(4, seed=6)
    state = make_state(total_steps=1, warmup=0)
    train_step(state, params, model, v1, v2, cfg)
    with pytest.raises(ConfigError):
        train_step(state, params, model, v1, v2, cfg)


def test_overfit_one_batch_reduces_loss():
    """Oracle for the whole learning loop: repeated steps on one fixed batch
    must drive the objective down."""
    cfg = small_cfg(lambda_=1.0)
    model = ModelConfig.from_run_config(cfg)
    params = init_dual_stream(model, seed=7)
    v1, v2 = view_batch(8, seed=7)
    state = make_state(total_steps=40, warmup=2, batch=8)
    first = train_step(state, params, model, v1, v2, cfg).l_total
    last = first
    for _ in range(24):
        last = train_step(state, params, model, v1, v2, cfg).l_total
    assert last < first, f"no learning: {first} -> {last}"


# ---------------------------------------------------------------------------
# pretrain driver


@pytest.fixture(scope="module")
def short_run():
    cfg = small_cfg()
    return cfg, *pretrain(cfg)


def test_pretrain_metrics_rows(short_run):
    cfg, params, model, rows = short_run
    assert len(rows) == cfg.epochs * math.ceil(32 / cfg.batch_size)
    assert [r["step"] for r in rows] == list(range(len(rows)))
    for row in rows:
        assert set(row) == set(METRICS_COLUMNS)
        assert all(math.isfinite(row[k]) for k in METRICS_COLUMNS)
        assert row["lr"] >= 0 and 0.99 <= row["tau"] <= 1.0


def test_pretrain_is_reproducible(short_run):
    cfg, params, model, rows = short_run
    params2, _, rows2 = pretrain(cfg)
    for a, b in zip(rows, rows2):
        for key in METRICS_COLUMNS:
            assert abs(a[key] - b[key]) <= 1e-6 * max(1.0, abs(a[key]))
    for group in ("online", "momentum"):
        for (na, ta), (_, tb) in zip(tr.flatten(params[group]),
                                     tr.flatten(params2[group])):
            np.testing.assert_array_equal(ta.data, tb.data, err_msg=na)


def test_write_metrics_csv(short_run, tmp_path):
    cfg, params, model, rows = short_run
    path = tmp_path / "metrics.csv"
    write_metrics(str(path), rows)
    with open(path, newline="") as fh:
        read = list(csv.DictReader(fh))
    assert len(read) == len(rows)
    for got, want in zip(read, rows):
        for key in METRICS_COLUMNS:
            assert abs(float(got[key]) - want[key]) < 1e-6


# ---------------------------------------------------------------------------
# linear probe


def test_probe_split_disjoint_and_deterministic():
    train_idx, test_idx = probe_split(50, seed=0)
    assert len(train_idx) + len(test_idx) == 50
    assert not set(train_idx) & set(test_idx)
    t2, h2 = probe_split(50, seed=0)
    np.testing.assert_array_equal(train_idx, t2)
    np.testing.assert_array_equal(test_idx, h2)


def test_linear_classifier_separable_features():
    """On linearly separable clusters a softmax regression must reach 100%
    train accuracy."""
    rng = np.random.default_rng(0)
    centers = np.eye(4, dtype=np.float32) * 5.0
    labels = np.repeat(np.arange(4), 25)
    feats = centers[labels] + 0.1 * rng.standard_normal((100, 4)).astype(np.float32)
    w, b = train_linear_classifier(feats, labels, 4, epochs=20, lr=0.5)
    pred = (feats @ w + b).argmax(axis=1)
    assert (pred == labels).mean() == 1.0


def test_encode_features_frozen_and_batched(short_run):
    cfg, params, model, _ = short_run
    images = np.stack([r.pixels for r in synth_shapes(10, 8)])
    before = {n: t.data.copy()
              for n, t in tr.flatten(params["online"]["encoder"])}
    f_all = encode_features(params["online"]["encoder"], model.encoder, images)
    f_small = encode_features(params["online"]["encoder"], model.encoder,
                              images, batch_size=3)
    assert f_all.shape == (10, 128)
    np.testing.assert_allclose(f_all, f_small, atol=1e-5)
    for n, t in tr.flatten(params["online"]["encoder"]):
        np.testing.assert_array_equal(before[n], t.data, err_msg=n)


def test_linear_probe_end_to_end(short_run):
    cfg, params, model, _ = short_run
    records = synth_shapes(60, 9)
    acc = linear_probe(params["online"]["encoder"], model.encoder, records,
                       epochs=10, lr=0.2)
    assert 0.0 <= acc <= 1.0


# ---------------------------------------------------------------------------
# saliency


def test_attention_map_contract(short_run):
    cfg, params, model, _ = short_run
    img = synth_shapes(1, 10)[0].pixels
    heat = attention_map(params["online"]["encoder"], model.encoder, img)
    assert heat.shape == (32, 32)
    assert heat.min() >= 0.0 and heat.max() <= 1.0


def test_attention_map_deterministic(short_run):
    cfg, params, model, _ = short_run
    img = synth_shapes(1, 11)[0].pixels
    a = attention_map(params["online"]["encoder"], model.encoder, img)
    b = attention_map(params["online"]["encoder"], model.encoder, img)
    np.testing.assert_array_equal(a, b)


def test_attention_map_finite_on_disks(short_run):
    cfg, params, model, _ = short_run
    img, _bbox = synth_disks(1, 12)[0]
    heat = attention_map(params["online"]["encoder"], model.encoder, img)
    assert np.all(np.isfinite(heat))

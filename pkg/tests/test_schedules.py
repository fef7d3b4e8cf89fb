"""Learning-rate warmup/decay, momentum coefficient, EMA mechanics."""

import math

import numpy as np
import pytest

from dualstream.errors import ConfigError, ContractError, StructureError
from dualstream.rng import SeededRng
from dualstream.schedules import (
    FLOOR_LR,
    LrSchedule,
    TauSchedule,
    base_lr_for,
    ema_update,
    lr_at,
    tau_at,
)
from dualstream.tensor import Tensor


def test_base_lr_linear_scaling():
    assert base_lr_for(256) == 0.05
    assert base_lr_for(1024) == 0.2
    assert base_lr_for(128) == 0.025
    with pytest.raises(ConfigError):
        base_lr_for(0)


def test_lr_endpoints_exact():
    s = LrSchedule(base_lr=0.05, warmup_steps=10, total_steps=100)
    assert lr_at(s, 0) == FLOOR_LR
    assert lr_at(s, 10) == 0.05
    assert abs(lr_at(s, 100)) < 1e-18
    # halfway through decay: base/2
    assert abs(lr_at(s, 55) - 0.025) < 1e-12


def test_lr_warmup_monotone_and_decay_monotone():
    s = LrSchedule(base_lr=0.05, warmup_steps=10, total_steps=100)
    vals = [lr_at(s, t) for t in range(101)]
    assert all(b > a for a, b in zip(vals[:10], vals[1:11]))
    assert all(b < a for a, b in zip(vals[10:-1], vals[11:]))
    assert all(v >= 0 for v in vals)


def test_lr_zero_warmup_starts_at_base():
    s = LrSchedule(base_lr=0.1, warmup_steps=0, total_steps=50)
    assert lr_at(s, 0) == 0.1


def test_lr_out_of_range_step():
    s = LrSchedule(base_lr=0.05, warmup_steps=5, total_steps=50)
    with pytest.raises(ContractError):
        lr_at(s, 51)
    with pytest.raises(ContractError):
        lr_at(s, -1)


def test_lr_schedule_validation():
    with pytest.raises(ConfigError):
        LrSchedule(base_lr=0.05, warmup_steps=50, total_steps=50)
    with pytest.raises(ConfigError):
        LrSchedule(base_lr=1e-7, warmup_steps=0, total_steps=10)


def test_tau_closed_form_points():
    s = TauSchedule(tau_base=0.99, total_steps=100)
    assert abs(tau_at(s, 0) - 0.99) < 1e-12
    assert abs(tau_at(s, 100) - 1.0) < 1e-12
    assert abs(tau_at(s, 50) - 0.995) < 1e-12
    # generic point against the formula written independently
    t = 37
    ref = 1.0 - (1.0 - 0.99) * (math.cos(math.pi * t / 100) + 1.0) / 2.0
    assert tau_at(s, t) == ref


def test_tau_monotone_nondecreasing():
    s = TauSchedule(tau_base=0.99, total_steps=200)
    vals = [tau_at(s, t) for t in range(201)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0.99 <= v <= 1.0 for v in vals)


def test_tau_validation():
    with pytest.raises(ConfigError):
        TauSchedule(tau_base=1.5, total_steps=10)


# ---------------------------------------------------------------------------
# EMA


def tree_pair(val_online, val_momentum):
    o = {"a": Tensor(np.full(3, val_online, dtype=np.float32), requires_grad=True)}
    m = {"a": Tensor(np.full(3, val_momentum, dtype=np.float32))}
    return o, m


def test_ema_closed_form():
    o, m = tree_pair(1.0, 0.0)
    ema_update(o, m, tau=0.5)
    np.testing.assert_allclose(m["a"].data, 0.5, atol=1e-7)
    ema_update(o, m, tau=0.5)
    np.testing.assert_allclose(m["a"].data, 0.75, atol=1e-7)


def test_ema_tau_one_freezes_and_tau_zero_copies():
    o, m = tree_pair(3.0, 1.0)
    ema_update(o, m, tau=1.0)
    np.testing.assert_allclose(m["a"].data, 1.0, atol=1e-7)
    ema_update(o, m, tau=0.0)
    np.testing.assert_array_equal(m["a"].data, o["a"].data)


def test_ema_geometric_convergence():
    o, m = tree_pair(1.0, 0.0)
    for _ in range(50):
        ema_update(o, m, tau=0.9)
    expected = 1.0 - 0.9 ** 50
    np.testing.assert_allclose(m["a"].data, expected, rtol=1e-4)


def test_ema_never_touches_online_and_preserves_ids():
    o, m = tree_pair(2.0, 0.0)
    before = o["a"].data.copy()
    buf = m["a"].data
    ema_update(o, m, tau=0.5)
    np.testing.assert_array_equal(o["a"].data, before)
    assert m["a"].data is buf  # in-place update


def test_ema_structural_mismatch():
    o, _ = tree_pair(1.0, 0.0)
    m = {"b": Tensor(np.zeros(3, dtype=np.float32))}
    with pytest.raises(StructureError):
        ema_update(o, m, tau=0.5)


def test_full_schedule_matches_training_recipe():
    """batch 128 run: lr scales to 0.025; a 1-epoch warmup over 16-step
    epochs hits base lr exactly at step 16; tau starts at 0.99."""
    total, warmup = 320, 16
    lrs = LrSchedule(base_lr=base_lr_for(128), warmup_steps=warmup,
                     total_steps=total)
    taus = TauSchedule(tau_base=0.99, total_steps=total)
    assert lr_at(lrs, warmup) == 0.025
    assert tau_at(taus, 0) == pytest.approx(0.99, abs=1e-12)
    assert tau_at(taus, total) == pytest.approx(1.0, abs=1e-12)

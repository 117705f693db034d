import numpy as np
import pytest

from lemsim import commitment as cm


def test_raw_error_above_band():
    assert cm.raw_error(13.0, 10.0, 2.0) == pytest.approx(1.0)


def test_raw_error_band_center_reward():
    assert cm.raw_error(10.0, 10.0, 2.0) == pytest.approx(-2.0)


def test_raw_error_boundary():
    assert cm.raw_error(12.0, 10.0, 2.0) == pytest.approx(0.0)


def test_raw_error_below_band():
    assert cm.raw_error(6.5, 10.0, 2.0) == pytest.approx(1.5)


def test_raw_error_negative_half_width():
    with pytest.raises(ValueError):
        cm.raw_error(1.0, 1.0, -0.1)


def band(p, dp, q=0.0, dq=0.0):
    return cm.ClearedBand(p_star=p, dp=dp, q_star=q, dq=dq)


def test_update_scores_no_deviation_no_change():
    led = cm.CommitmentLedger.fresh(["a", "b"])
    clr = {"a": band(10.0, 0.0), "b": band(-5.0, 0.0)}
    actual = {"a": (10.0, 0.0), "b": (-5.0, 0.0)}
    cm.update_scores(led, clr, actual)
    assert led.scores["a"] == 1.0 and led.scores["b"] == 1.0


def test_update_scores_two_dca_normalization():
    # violator +1 kW over a 10 kW setpoint; complier at band center of a
    # 20 kW setpoint with half-width 2 (reward -2): hand-computed update
    led = cm.CommitmentLedger.fresh(["v", "c"])
    led.scores = {"v": 0.8, "c": 0.8}
    clr = {"v": band(10.0, 1.0), "c": band(20.0, 2.0)}
    actual = {"v": (12.0, 0.0), "c": (20.0, 0.0)}
    e_v = 1.0 / 10.0
    e_c = -2.0 / 20.0
    norm = np.hypot(e_v, e_c)
    cm.update_scores(led, clr, actual)
    assert led.scores["v"] == pytest.approx(0.8 - (e_v / norm) / 2.0, abs=1e-12)
    assert led.scores["c"] == pytest.approx(min(0.8 - (e_c / norm) / 2.0, 1.0), abs=1e-12)
    assert led.scores["v"] < 0.8 < led.scores["c"]


def test_update_scores_clamped_at_zero():
    led = cm.CommitmentLedger.fresh(["a"])
    led.scores["a"] = 0.01
    clr = {"a": band(10.0, 0.0)}
    actual = {"a": (40.0, 0.0)}  # huge violation, normalized error -> 1
    cm.update_scores(led, clr, actual)
    assert led.scores["a"] == 0.0


def test_update_scores_clamped_at_one():
    led = cm.CommitmentLedger.fresh(["a"])
    clr = {"a": band(10.0, 5.0)}
    actual = {"a": (10.0, 0.0)}  # in-band reward would push above 1
    cm.update_scores(led, clr, actual)
    assert led.scores["a"] == 1.0


def test_zero_setpoint_guard():
    led = cm.CommitmentLedger.fresh(["a"], s_base_kw=1000.0)
    clr = {"a": band(0.0, 0.0)}
    actual = {"a": (0.5, 0.0)}  # denominator floored at 1 kW, no blow-up
    cm.update_scores(led, clr, actual)
    assert 0.0 <= led.scores["a"] < 1.0
    assert np.isfinite(led.scores["a"])


def test_scale_invariance_of_normalized_direction():
    rng = np.random.default_rng(2)
    raw = rng.uniform(-2, 2, size=6)
    sp = rng.uniform(5, 20, size=6)
    a = cm._normalized_errors(raw, sp, 1000.0)
    b = cm._normalized_errors(raw * 7.3, sp, 1000.0)
    assert np.allclose(a, b, atol=1e-12)


def test_inband_vs_outband_contribution_signs():
    rng = np.random.default_rng(4)
    for _ in range(20):
        led = cm.CommitmentLedger.fresh(["in", "out"])
        led.scores = {"in": 0.5, "out": 0.5}
        sp_in, sp_out = rng.uniform(5, 30, size=2)
        d_in, d_out = rng.uniform(0.5, 3, size=2)
        clr = {"in": band(sp_in, d_in), "out": band(sp_out, d_out)}
        actual = {
            "in": (sp_in + rng.uniform(-0.9, 0.9) * d_in, 0.0),
            "out": (sp_out + d_out + rng.uniform(0.1, 2.0), 0.0),
        }
        cm.update_scores(led, clr, actual)
        assert led.scores["in"] >= 0.5
        assert led.scores["out"] < 0.5


def test_simulate_response_exact_follow():
    model = cm.ResponseModel(
        dca_ids=("a",), follow_prob={"a": 1.0}, overshoot_scale=0.5, noise_scale=0.0, rng_seed=1
    )
    clr = {"a": band(12.0, 2.0, q=-3.0, dq=1.0)}
    out = cm.simulate_response(model, clr, step=7)
    assert out["a"] == (12.0, -3.0)


def test_simulate_response_overshoot_distance():
    model = cm.ResponseModel(
        dca_ids=("a",), follow_prob={"a": 0.0}, overshoot_scale=0.5, noise_scale=0.0, rng_seed=1
    )
    clr = {"a": band(10.0, 2.0)}
    out = cm.simulate_response(model, clr, step=3)
    p = out["a"][0]
    dist_to_edge = min(abs(p - 12.0), abs(p - 8.0))
    assert dist_to_edge == pytest.approx(1.0, abs=1e-12)
    assert not (8.0 <= p <= 12.0)


def test_simulate_response_deterministic():
    model = cm.ResponseModel(
        dca_ids=("a", "b"),
        follow_prob={"a": 0.5, "b": 0.5},
        overshoot_scale=0.3,
        noise_scale=0.7,
        rng_seed=99,
    )
    clr = {"a": band(10.0, 2.0), "b": band(-4.0, 1.0)}
    runs = [
        [cm.simulate_response(model, clr, step=s) for s in range(50)] for _ in range(2)
    ]
    assert runs[0] == runs[1]


def test_boundedness_over_long_run():
    rng = np.random.default_rng(8)
    ids = [f"d{i}" for i in range(4)]
    model = cm.ResponseModel(
        dca_ids=tuple(ids),
        follow_prob={d: p for d, p in zip(ids, (1.0, 0.8, 0.3, 0.0))},
        overshoot_scale=1.0,
        noise_scale=1.0,
        rng_seed=5,
    )
    led = cm.CommitmentLedger.fresh(ids)
    for step in range(1440):
        clr = {
            d: band(float(rng.uniform(-30, 30)), float(rng.uniform(0, 4))) for d in ids
        }
        actual = cm.simulate_response(model, clr, step)
        cm.update_scores(led, clr, actual)
        assert all(0.0 <= s <= 1.0 for s in led.scores.values())
    assert len(led.history) == 1440


def test_perfect_follower_never_below_defector():
    ids = ["good", "bad"]
    model = cm.ResponseModel(
        dca_ids=tuple(ids),
        follow_prob={"good": 1.0, "bad": 0.0},
        overshoot_scale=0.5,
        noise_scale=0.5,
        rng_seed=13,
    )
    led = cm.CommitmentLedger.fresh(ids)
    rng = np.random.default_rng(14)
    for step in range(100):
        clr = {d: band(float(rng.uniform(5, 25)), float(rng.uniform(0.5, 3))) for d in ids}
        actual = cm.simulate_response(model, clr, step)
        cm.update_scores(led, clr, actual)
        assert led.scores["good"] >= led.scores["bad"]

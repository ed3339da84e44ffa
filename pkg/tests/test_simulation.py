from __future__ import annotations

import math
from datetime import date

import numpy as np
import pytest

from surroprev import _kernels
from surroprev.calibration import calibrate, logit_params
from surroprev.datamodel import (
    Bucketization,
    DomainError,
    FileLabelSource,
    ImpressionLog,
    ScoreTable,
)
from surroprev.simulation import (
    DrawMode,
    ImpressionMode,
    SimulationConfig,
    box_muller,
    draw_bucket_prevalences,
    simulate,
    simulate_day,
    simulation_rng,
)

D = date(2024, 2, 1)
TWO = Bucketization((0.0, 0.5, 1.0))


@pytest.fixture
def world():
    rng = np.random.default_rng(0)
    n = 400
    users = [f"u{k % 40:02d}" for k in range(n)]
    items = [f"i{k % 25:02d}" for k in range(n)]
    arms = ["control" if int(u[1:]) % 2 else "treatment" for u in users]
    log = ImpressionLog.from_columns([D] * n, users, items, arms, rng.integers(1, 30, n))
    ids = sorted(set(items))
    s = rng.uniform(0, 1, len(ids))
    scores = ScoreTable.from_arrays({"k": (ids, s)})
    labels = FileLabelSource.from_triples((i, "k", int(x > 0.5)) for i, x in zip(ids, s))
    table = calibrate(log, scores, labels, TWO, category="k", n=15, seed=2)
    return log, scores, table


def test_box_muller_known_values():
    assert box_muller(1.0, 0.0) == 0.0
    assert box_muller(math.exp(-0.5), 0.0) == pytest.approx(1.0)
    assert box_muller(math.exp(-2.0), 0.5) == pytest.approx(-2.0)
    u = np.random.default_rng(1).random((2, 200_000))
    z = box_muller(1 - u[0], u[1])
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


@pytest.mark.parametrize("mode", list(ImpressionMode))
def test_probability_edges(world, mode):
    log, scores, _ = world
    cfg = SimulationConfig(D, "k", seed=1, impression_mode=mode)
    r = simulate_day(log, scores, TWO, np.array([1.0, 1.0]), cfg)
    assert r.control.flagged == r.control.impressions and r.treatment.prevalence == 1.0
    r = simulate_day(log, scores, TWO, np.array([0.0, 0.0]), cfg)
    assert r.control.flagged == 0 and r.treatment.flagged == 0


@pytest.mark.parametrize("mode", list(ImpressionMode))
def test_control_equals_treatment_gives_zero_delta(world, mode):
    log, scores, _ = world
    cfg = SimulationConfig(D, "k", seed=1, impression_mode=mode)
    r = simulate_day(log, scores, TWO, np.array([0.3, 0.6]), cfg, arms={"control": "control", "treatment": "control"})
    assert r.delta == 0.0


def test_deterministic_and_order_free(world):
    log, scores, _ = world
    cfg = SimulationConfig(D, "k", seed=5, impression_mode=ImpressionMode.EXACT)
    a = simulate_day(log, scores, TWO, np.array([0.2, 0.7]), cfg, keep_users=True)
    b = simulate_day(log, scores, TWO, np.array([0.2, 0.7]), cfg, keep_users=True)
    assert a.to_record() == b.to_record()
    # reversing row order (same content) changes nothing
    rev = ImpressionLog.from_columns(
        log.day[::-1], log.users[log.user][::-1], log.items[log.item][::-1], log.arms[log.arm][::-1],
        log.impressions[::-1],
    )
    c = simulate_day(rev, scores, TWO, np.array([0.2, 0.7]), cfg, keep_users=True)
    assert c.to_record() == a.to_record()
    assert np.array_equal(c.user_flagged, a.user_flagged)


def test_user_in_two_arms_rejected(world):
    _, scores, _ = world
    log = ImpressionLog.from_columns([D, D], ["u", "u"], ["i00", "i01"], ["control", "treatment"], np.array([1, 1]))
    with pytest.raises(DomainError, match="more than one arm"):
        simulate_day(log, scores, TWO, np.array([0.5, 0.5]), SimulationConfig(D, "k", 0))
    with pytest.raises(DomainError, match="no arm assignment"):
        simulate_day(log, scores, TWO, np.array([0.5, 0.5]), SimulationConfig(D, "k", 0), assignment={})


def test_missing_p_star_for_trafficked_bucket(world):
    log, scores, _ = world
    with pytest.raises(DomainError, match="bucket"):
        simulate_day(log, scores, TWO, np.array([0.5, np.nan]), SimulationConfig(D, "k", 0))


def test_zero_sigma_reproduces_point(world):
    _, _, table = world
    params = logit_params(table)
    params = params.__class__(params.mu, np.zeros_like(params.sigma), params.empty, params.point)
    p = draw_bucket_prevalences(params, simulation_rng(1, 0, D))
    assert np.array_equal(p, table.prevalence)


def test_logit_normal_draw_distribution(world):
    _, _, table = world
    params = logit_params(table)
    draws = np.array([draw_bucket_prevalences(params, simulation_rng(s, 0, D)) for s in range(4000)])
    ok = ~params.empty & (params.sigma > 0) & (params.sigma < 5)
    assert ok.any()
    draws = draws[:, ok]
    logits = np.log(draws / (1 - draws))
    assert np.allclose(logits.mean(0), params.mu[ok], atol=4 * params.sigma[ok] / math.sqrt(4000) + 1e-9)
    assert np.allclose(logits.std(0), params.sigma[ok], rtol=0.05)


def test_simulate_repeats_and_modes(world):
    log, scores, table = world
    out = simulate(log, scores, table, [D], seed=3, repeats=3)
    assert [r.config.run for r in out] == [0, 1, 2]
    assert len({tuple(r.p_star) for r in out}) == 3
    fixed = simulate(log, scores, table, [D], seed=3, repeats=2, draw_mode=DrawMode.FIXED)
    assert np.array_equal(fixed[0].p_star, fixed[1].p_star, equal_nan=True)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_backends_agree_on_exact_mode(world, monkeypatch):
    log, scores, _ = world
    cfg = SimulationConfig(D, "k", seed=9, impression_mode=ImpressionMode.EXACT)
    results = []
    for backend in ("numpy", "numba"):
        monkeypatch.setattr(_kernels, "BACKEND", backend)
        results.append(simulate_day(log, scores, TWO, np.array([0.25, 0.75]), cfg).to_record())
    assert results[0] == results[1]

"""Single-calibration-draw Monte Carlo of daily arm prevalences.

For one day: draw one prevalence per bucket from the logit-normal
calibration, flag each impression with its bucket's probability, then sum
flagged impressions per user and per arm.

Impression-level randomness is keyed by ``(seed, run, day, user, item)``,
so results do not depend on row or user iteration order and users can be
processed in any partitioning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Mapping

import numpy as np
from scipy import stats

from . import _kernels
from .calibration import CalibrationTable, LogitParams, inverse_logit, logit_params
from .datamodel import Bucketization, DomainError, ImpressionLog, ScoreTable

_EXACT_TAG = 0x45584354
_BINOM_TAG = 0x42494E4D


class DrawMode(str, Enum):
    LOGIT_NORMAL = "logit-normal"
    FIXED = "fixed-at-point"


class ImpressionMode(str, Enum):
    EXACT = "exact-loop"
    BINOMIAL = "binomial-fast-path"


@dataclass(frozen=True)
class SimulationConfig:
    day: date
    category: str
    seed: int
    draw_mode: DrawMode = DrawMode.LOGIT_NORMAL
    impression_mode: ImpressionMode = ImpressionMode.BINOMIAL
    run: int = 0


@dataclass(frozen=True)
class ArmResult:
    arm: str
    impressions: int
    flagged: int

    @property
    def prevalence(self) -> float:
        return self.flagged / self.impressions if self.impressions else math.nan


@dataclass(frozen=True, eq=False)
class SimulationResult:
    day: date
    control: ArmResult
    treatment: ArmResult
    p_star: np.ndarray
    config: SimulationConfig
    user_ids: np.ndarray | None = field(default=None, repr=False)
    user_impressions: np.ndarray | None = field(default=None, repr=False)
    user_flagged: np.ndarray | None = field(default=None, repr=False)

    @property
    def delta(self) -> float:
        return self.treatment.prevalence - self.control.prevalence

    def to_record(self) -> dict:
        return {
            "day": self.day.isoformat(),
            "run": self.config.run,
            "seed": self.config.seed,
            "category": self.config.category,
            "draw_mode": DrawMode(self.config.draw_mode).value,
            "impression_mode": ImpressionMode(self.config.impression_mode).value,
            "control_arm": self.control.arm,
            "treatment_arm": self.treatment.arm,
            "control_impressions": self.control.impressions,
            "control_flagged": self.control.flagged,
            "control_prevalence": self.control.prevalence,
            "treatment_impressions": self.treatment.impressions,
            "treatment_flagged": self.treatment.flagged,
            "treatment_prevalence": self.treatment.prevalence,
            "delta": self.delta,
            "p_star": [None if math.isnan(x) else float(x) for x in self.p_star],
            "p_star_scope": "per run and day",
        }


def simulation_rng(seed: int, run: int, day: date) -> np.random.Generator:
    """Generator for the per-(run, day) calibration draw."""
    return np.random.default_rng([int(seed), int(run), day.toordinal()])


def box_muller(u1, u2) -> np.ndarray:
    """Standard normals from uniforms ``u1`` in (0, 1] and ``u2`` in [0, 1)."""
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def draw_bucket_prevalences(params: LogitParams, rng: np.random.Generator) -> np.ndarray:
    """One ``P*`` per bucket: inverse logit of ``mu + sigma * z``.

    Zero-scale buckets return the table prevalence unchanged; empty buckets
    are NaN.  Two uniforms are consumed per bucket, empty or not, so draws
    for a bucket do not depend on the emptiness of others.
    """
    B = params.mu.shape[0]
    u = rng.random((2, B))
    z = box_muller(1.0 - u[0], u[1])
    theta = params.mu + params.sigma * z
    p = inverse_logit(theta)
    p = np.where(params.sigma == 0, params.point, p)
    return np.where(params.empty, math.nan, p)


def fixed_bucket_prevalences(table: CalibrationTable) -> np.ndarray:
    return np.where(table.empty, math.nan, table.prevalence)


def _arm_assignment(
    day_log: ImpressionLog, arms: Mapping[str, str], assignment: Mapping[str, str] | None
) -> np.ndarray:
    """Role code per row: 0 control, 1 treatment, -1 neither."""
    role_of_arm = {arms["treatment"]: 1, arms["control"]: 0}
    if assignment is None:
        if len(day_log):
            pair = np.unique(np.stack([day_log.user, day_log.arm]), axis=1)
            dup = np.flatnonzero(np.diff(pair[0]) == 0)
            if dup.size:
                raise DomainError(f"user {day_log.users[pair[0][dup[0]]]!r} appears in more than one arm")
        lookup = np.array([role_of_arm.get(str(a), -1) for a in day_log.arms], dtype=np.int64)
        return lookup[day_log.arm] if len(day_log) else np.empty(0, np.int64)
    user_labels = day_log.users[day_log.user]
    roles = np.empty(len(day_log), dtype=np.int64)
    for k, u in enumerate(user_labels):
        a = assignment.get(str(u))
        if a is None:
            raise DomainError(f"user {u!r} has no arm assignment")
        roles[k] = role_of_arm.get(a, -1)
    return roles


def simulate_day(
    log: ImpressionLog,
    scores: ScoreTable,
    buckets: Bucketization,
    p_star,
    config: SimulationConfig,
    arms: Mapping[str, str] | None = None,
    assignment: Mapping[str, str] | None = None,
    keep_users: bool = False,
) -> SimulationResult:
    """Simulate flagged impressions for ``config.day``.

    ``arms`` maps the roles ``control`` and ``treatment`` to arm labels in
    the log.  Without an explicit ``assignment`` (user -> arm label), each
    user's arm is read from the log and must be unique.
    """
    arms = dict(arms or {"control": "control", "treatment": "treatment"})
    p_star = np.asarray(p_star, dtype=np.float64)
    if p_star.shape != (buckets.n_buckets,):
        raise DomainError("need one P* per bucket")
    day_log = log.select(log.day == np.datetime64(config.day, "D"))
    if assignment is None:
        wanted = [log.arm_code(arms["control"]), log.arm_code(arms["treatment"])]
        day_log = day_log.select(np.isin(day_log.arm, wanted))
    roles = _arm_assignment(day_log, arms, assignment)
    day_log = day_log.select(roles >= 0)
    roles = roles[roles >= 0]

    item_scores = scores.scores_for_log(log, config.category)
    row_bucket = buckets.assign(item_scores)[day_log.item]
    probs = p_star[row_bucket]
    if np.isnan(probs).any():
        b = sorted({int(x) + 1 for x in row_bucket[np.isnan(probs)]})
        raise DomainError(f"no P* for bucket(s) {b} that carry impressions")
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise DomainError("P* must lie in [0, 1]")

    ucodes, uinv = np.unique(day_log.user, return_inverse=True)
    icodes, iinv = np.unique(day_log.item, return_inverse=True)
    uh = _kernels.hash_ids(day_log.users[ucodes])[uinv] if ucodes.size else np.empty(0, np.uint64)
    ih = _kernels.hash_ids(day_log.items[icodes])[iinv] if icodes.size else np.empty(0, np.uint64)
    counts = day_log.impressions
    mode = ImpressionMode(config.impression_mode)
    if counts.size == 0:
        flagged = np.zeros(0, dtype=np.int64)
    elif mode is ImpressionMode.EXACT:
        keys = _kernels.derive_keys(config.seed, _EXACT_TAG, config.run, config.day.toordinal(), uh, ih)
        flagged = _kernels.exact_flag_counts(keys, counts, probs)
    else:
        keys = _kernels.derive_keys(config.seed, _BINOM_TAG, config.run, config.day.toordinal(), uh, ih)
        u = _kernels.stream_uniforms(keys, 0)
        flagged = stats.binom.ppf(u, counts, probs).astype(np.int64)

    # users first, then arms
    n_users = ucodes.size
    user_imps = np.bincount(uinv, weights=counts, minlength=n_users).astype(np.int64)
    user_flag = np.bincount(uinv, weights=flagged, minlength=n_users).astype(np.int64)
    user_role = np.zeros(n_users, dtype=np.int64)
    user_role[uinv] = roles
    arm_imps = np.bincount(user_role, weights=user_imps, minlength=2).astype(np.int64)
    arm_flag = np.bincount(user_role, weights=user_flag, minlength=2).astype(np.int64)
    if arms["control"] == arms["treatment"]:
        arm_imps[1], arm_flag[1] = arm_imps[0], arm_flag[0]
    return SimulationResult(
        day=config.day,
        control=ArmResult(arms["control"], int(arm_imps[0]), int(arm_flag[0])),
        treatment=ArmResult(arms["treatment"], int(arm_imps[1]), int(arm_flag[1])),
        p_star=p_star,
        config=config,
        user_ids=day_log.users[ucodes] if keep_users else None,
        user_impressions=user_imps if keep_users else None,
        user_flagged=user_flag if keep_users else None,
    )


def simulate(
    log: ImpressionLog,
    scores: ScoreTable,
    table: CalibrationTable,
    days,
    *,
    seed: int,
    arms: Mapping[str, str] | None = None,
    repeats: int = 1,
    draw_mode: DrawMode = DrawMode.LOGIT_NORMAL,
    impression_mode: ImpressionMode = ImpressionMode.BINOMIAL,
) -> list[SimulationResult]:
    """Independent runs over ``days``; each (run, day) gets its own calibration draw."""
    params = logit_params(table)
    out = []
    for run in range(repeats):
        for d in days:
            if DrawMode(draw_mode) is DrawMode.FIXED:
                p_star = fixed_bucket_prevalences(table)
            else:
                p_star = draw_bucket_prevalences(params, simulation_rng(seed, run, d))
            cfg = SimulationConfig(d, table.category, seed, DrawMode(draw_mode), ImpressionMode(impression_mode), run)
            out.append(simulate_day(log, scores, table.buckets, p_star, cfg, arms=arms))
    return out

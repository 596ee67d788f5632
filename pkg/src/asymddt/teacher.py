"""Tabular Q-learning teacher, Q-to-distribution conversion and dataset generation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import DistillDataset
from .thermal import (
    ACTION_NAMES,
    FEATURE_NAMES,
    N_ACTIONS,
    EnvConfig,
    EnvState,
    env_reset,
    env_step,
)
from .tree import FeatureScaling, softmax

log = logging.getLogger(__name__)

TRAIN_DAYS = 60
TEST_DAYS = 14


class TeacherFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Discretization:
    hour_bins: int = 24
    zone_edges: tuple = tuple(np.arange(12.0, 26.0 + 1e-9, 0.5).round(6))
    outdoor_edges: tuple = tuple(np.arange(-10.0, 20.0 + 1e-9, 2.0).round(6))
    comfort_levels: tuple = (15.0, 21.0)

    def key(self, hour, zone_temp, outdoor_temp, comfort) -> tuple:
        """Map a raw state onto bin indices; values outside the edges clamp to the edge bin."""
        hb = min(max(int(hour * self.hour_bins / 24.0), 0), self.hour_bins - 1)
        zb = _bin(zone_temp, self.zone_edges)
        ob = _bin(outdoor_temp, self.outdoor_edges)
        cb = int(np.argmin([abs(comfort - c) for c in self.comfort_levels]))
        return (hb, zb, ob, cb)

    def state_key(self, state: EnvState) -> tuple:
        return self.key(state.hour, state.zone_temp, state.outdoor_temp, state.comfort_lower)

    def to_dict(self):
        return {"hour_bins": self.hour_bins, "zone_edges": list(self.zone_edges),
                "outdoor_edges": list(self.outdoor_edges), "comfort_levels": list(self.comfort_levels)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["hour_bins"]), tuple(float(v) for v in d["zone_edges"]),
                   tuple(float(v) for v in d["outdoor_edges"]),
                   tuple(float(v) for v in d["comfort_levels"]))


def _bin(value, edges) -> int:
    i = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(i, 0), len(edges) - 2)


@dataclass
class TeacherModel:
    q_values: dict = field(default_factory=dict)
    discretization: Discretization = field(default_factory=Discretization)
    kind: str = "tabular"
    missing_lookups: int = 0

    def q(self, state: EnvState):
        return self.q_values.get(self.discretization.state_key(state))

    def distribution(self, state: EnvState, tau: float = 1.0) -> np.ndarray:
        return teacher_distribution(self, state, tau)

    def greedy_action(self, state: EnvState) -> int:
        q = self.q(state)
        if q is None:
            self.missing_lookups += 1
            return 0
        return int(np.argmax(q))


@dataclass(frozen=True)
class TeacherTrainConfig:
    episodes: int = 2000
    learning_rate: float = 0.1
    discount: float = 0.98
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    train_days: int = TRAIN_DAYS
    start_temp_range: tuple = (15.0, 24.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if self.episodes < 0:
            raise ValueError("episodes must be nonnegative")


def teacher_train(env_cfg: EnvConfig, cfg: TeacherTrainConfig,
                  discretization: Discretization | None = None):
    """Run epsilon-greedy tabular Q-learning on one-day episodes.

    Episodes start at midnight of a random day inside the training period
    from a random zone temperature (exploring starts).
    Returns the teacher and the per-episode return curve.
    """
    disc = discretization or Discretization()
    rng = np.random.default_rng(cfg.seed)
    table: dict[tuple, np.ndarray] = {}
    curve = []
    steps = env_cfg.steps_per_day
    for ep in range(cfg.episodes):
        frac = ep / max(cfg.episodes - 1, 1)
        eps = cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac
        day = int(rng.integers(cfg.train_days))
        state = env_reset(env_cfg, start_day=day, zone_temp=rng.uniform(*cfg.start_temp_range))
        key = disc.state_key(state)
        ret = 0.0
        for _ in range(steps):
            q = table.setdefault(key, np.zeros(N_ACTIONS))
            if rng.random() < eps:
                a = int(rng.integers(N_ACTIONS))
            else:
                a = int(np.argmax(q))
            nxt, rc = env_step(state, a, env_cfg)
            nkey = disc.state_key(nxt)
            nq = table.get(nkey)
            bootstrap = 0.0 if nq is None else float(nq.max())
            q[a] += cfg.learning_rate * (rc.reward + cfg.discount * bootstrap - q[a])
            ret += rc.reward
            state, key = nxt, nkey
        curve.append(ret)
    if cfg.episodes == 0:
        log.warning("teacher trained with 0 episodes: Q-table is empty (all-zero)")
    return TeacherModel(table, disc), curve


def teacher_distribution(model: TeacherModel, state: EnvState, tau: float = 1.0) -> np.ndarray:
    """softmax(Q(state) / tau); unseen states give the uniform distribution."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    q = model.q(state)
    if q is None:
        model.missing_lookups += 1
        return np.full(N_ACTIONS, 1.0 / N_ACTIONS)
    return softmax(np.asarray(q) / tau)


def generate_dataset(model: TeacherModel, env_cfg: EnvConfig, days: int, tau: float = 1.0,
                     start_day: int = 0, scaling: FeatureScaling | None = None) -> DistillDataset:
    """Roll out the teacher's greedy policy over a contiguous period and record targets.

    When ``scaling`` is None the statistics are computed from this rollout
    (train split); pass the train split's scaling for a test split.
    """
    state = env_reset(env_cfg, start_day=start_day)
    raw, targets, tidx = [], [], []
    before = model.missing_lookups
    for _ in range(days * env_cfg.steps_per_day):
        raw.append(state.raw_features())
        targets.append(teacher_distribution(model, state, tau))
        tidx.append(state.time_index)
        state, _ = env_step(state, model.greedy_action(state), env_cfg)
    missing = model.missing_lookups - before
    if missing:
        log.warning("%d teacher lookups hit unseen states (uniform target / action 0 used)", missing)
    raw = np.array(raw)
    if scaling is None:
        scaling = FeatureScaling.fit(raw)
    return DistillDataset(
        x=scaling.standardize(raw),
        targets=np.array(targets),
        scaling=scaling,
        time_index=np.array(tidx, dtype=np.int64),
        feature_names=list(FEATURE_NAMES),
        action_names=list(ACTION_NAMES),
        meta={"tau": tau, "start_day": start_day, "days": days, "env_seed": env_cfg.seed},
    )


def generate_train_test(model, env_cfg, tau=1.0, train_days=TRAIN_DAYS, test_days=TEST_DAYS):
    train = generate_dataset(model, env_cfg, train_days, tau, start_day=0)
    test = generate_dataset(model, env_cfg, test_days, tau, start_day=train_days,
                            scaling=train.scaling)
    return train, test


def save_teacher(model: TeacherModel, path):
    """Line-delimited JSON: a header, then one {state_key, q} record per table entry."""
    with open(path, "w") as fh:
        header = {"kind": "header", "teacher_kind": model.kind, "n_actions": N_ACTIONS,
                  "discretization": model.discretization.to_dict()}
        fh.write(json.dumps(header) + "\n")
        for key in sorted(model.q_values):
            q = model.q_values[key]
            fh.write(json.dumps({"state_key": list(key), "q": [float(v) for v in q]}) + "\n")
    return Path(path)


def load_external_teacher(path) -> TeacherModel:
    """Load a teacher table.

    Records carry either ``state_key`` (bin indices) or ``state`` (raw
    ``[hour, zone_temp, outdoor_temp, comfort_lower]``) plus ``q`` with one
    value per action. An optional leading header record sets the
    discretization.
    """
    disc = Discretization()
    table = {}
    kind = "external-table"
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TeacherFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise TeacherFormatError(f"{path}:{lineno}: record must be an object")
            if rec.get("kind") == "header":
                if "discretization" in rec:
                    disc = Discretization.from_dict(rec["discretization"])
                kind = rec.get("teacher_kind", kind)
                continue
            q = rec.get("q")
            if not isinstance(q, list) or len(q) != N_ACTIONS:
                n = len(q) if isinstance(q, list) else "no"
                raise TeacherFormatError(
                    f"{path}:{lineno}: expected {N_ACTIONS} Q-values, got {n}")
            q = np.array(q, dtype=float)
            if not np.all(np.isfinite(q)):
                raise TeacherFormatError(f"{path}:{lineno}: non-finite Q-value")
            if "state_key" in rec:
                key = tuple(int(v) for v in rec["state_key"])
                if len(key) != 4:
                    raise TeacherFormatError(f"{path}:{lineno}: state_key must have 4 entries")
            elif "state" in rec:
                s = rec["state"]
                if len(s) != 4:
                    raise TeacherFormatError(f"{path}:{lineno}: state must have 4 entries")
                key = disc.key(*(float(v) for v in s))
            else:
                raise TeacherFormatError(f"{path}:{lineno}: record needs 'state_key' or 'state'")
            table[key] = q
    return TeacherModel(table, disc, kind=kind)


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "return"])
        for i, r in enumerate(curve):
            w.writerow([i, repr(float(r))])
    return Path(path)


def greedy_margin(model: TeacherModel) -> float:
    """Median gap between the best and second-best Q-value over the table (diagnostic)."""
    if not model.q_values:
        return math.nan
    q = np.sort(np.array(list(model.q_values.values())), axis=1)
    return float(np.median(q[:, -1] - q[:, -2]))

"""Policy rollouts, fidelity and the full-vs-asymmetric budget comparison."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .distill import (
    DistillConfig,
    DistillDataset,
    DistillError,
    _kl_rows,
    distill_asymmetric_path,
    distill_full,
)
from .teacher import TEST_DAYS, TRAIN_DAYS, TeacherModel
from .thermal import EnvConfig, env_reset, env_step, state_to_features
from .tree import SOFT, TreeModel, harden, predict

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PAPER_BUDGETS = (3, 7, 15, 31)
DAILY_CSV_COLUMNS = ("budget", "method", "mode", "seed", "day", "reward")


class ComparisonConfigError(ValueError):
    pass


def tree_policy(tree: TreeModel):
    """Greedy policy of a tree: argmax of its output, ties to the lowest action."""
    if tree.scaling is None:
        raise DistillError("tree has no feature scaling; cannot encode environment states")

    def act(state):
        x = state_to_features(state, tree.scaling)
        return int(np.argmax(predict(tree, x[None, :])[0]))

    return act


def as_policy(policy):
    if isinstance(policy, TeacherModel):
        return policy.greedy_action
    if isinstance(policy, TreeModel):
        return tree_policy(policy)
    if callable(policy):
        return policy
    raise TypeError(f"cannot use {type(policy).__name__} as a policy")


@dataclass
class Rollout:
    daily_rewards: list
    step_rewards: list = field(default_factory=list)
    identity_violations: int = 0
    steps: list = field(default_factory=list)


def rollout(policy, env_cfg: EnvConfig, days: int, start_day: int = TRAIN_DAYS,
            seed: int | None = None, keep_steps: bool = False) -> Rollout:
    act = as_policy(policy)
    if seed is not None:
        env_cfg = env_cfg.with_overrides(seed=seed)
    state = env_reset(env_cfg, start_day=start_day)
    per_day = env_cfg.steps_per_day
    daily, step_rewards, steps = [], [], []
    acc, violations = 0.0, 0
    for k in range(days * per_day):
        a = act(state)
        nxt, rc = env_step(state, a, env_cfg)
        if rc.reward != -(rc.discomfort + rc.omega * rc.energy_cost):
            violations += 1
        if keep_steps:
            steps.append((state, a, rc))
        step_rewards.append(rc.reward)
        acc += rc.reward
        if (k + 1) % per_day == 0:
            daily.append(acc)
            acc = 0.0
        state = nxt
    return Rollout(daily, step_rewards, violations, steps)


def rollout_policy(policy, env_cfg: EnvConfig, days: int, start_day: int = TRAIN_DAYS,
                   seed: int | None = None) -> list:
    """Per-day reward totals of a greedy rollout (teacher, tree or state->action callable)."""
    return rollout(policy, env_cfg, days, start_day, seed).daily_rewards


def fidelity(tree: TreeModel, data: DistillDataset) -> float:
    """Fraction of samples where the tree's argmax action equals the target's argmax."""
    if len(data) == 0:
        raise DistillError("fidelity needs a non-empty dataset")
    pred = predict(tree, data.x)
    return float(np.mean(np.argmax(pred, axis=1) == np.argmax(data.targets, axis=1)))


def mean_kl(tree: TreeModel, data: DistillDataset) -> float:
    """Mean KL(target || tree output) in the tree's own mode."""
    return float(np.mean(_kl_rows(data.targets, predict(tree, data.x))))


def summarize(values) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(med), "q1": float(q1),
            "q3": float(q3), "min": float(v.min()), "max": float(v.max())}


@dataclass
class EvaluationReport:
    policy: str
    mode: str
    daily_rewards: list
    summary: dict
    test_kl: float | None = None
    fidelity: float | None = None
    node_count: int | None = None
    max_depth: int | None = None

    def to_dict(self):
        return asdict(self)


def evaluate_tree(tree: TreeModel, test: DistillDataset, env_cfg: EnvConfig, days: int = TEST_DAYS,
                  start_day: int = TRAIN_DAYS, name: str = "tree") -> EvaluationReport:
    daily = rollout_policy(tree, env_cfg, days, start_day)
    return EvaluationReport(name, tree.mode, daily, summarize(daily), mean_kl(tree, test),
                            fidelity(tree, test), tree.n_internal, tree.max_depth)


def evaluate_teacher(teacher: TeacherModel, env_cfg: EnvConfig, days: int = TEST_DAYS,
                     start_day: int = TRAIN_DAYS) -> EvaluationReport:
    daily = rollout_policy(teacher, env_cfg, days, start_day)
    return EvaluationReport("teacher", "greedy", daily, summarize(daily))


def full_depth_for(budget: int) -> int:
    depth = math.log2(budget + 1)
    if budget < 1 or depth != int(depth):
        raise ComparisonConfigError(
            f"node budget {budget} is not 2^d - 1, so no complete tree has that many decision nodes")
    return int(depth)


@dataclass
class ComparisonMatrix:
    budgets: list
    seeds: list
    test_days: int
    teacher: EvaluationReport
    always_off: EvaluationReport
    cells: list  # dicts: budget, method, mode, seed, report
    timings: dict = field(default_factory=dict)
    reward_identity_violations: int = 0
    steps_checked: int = 0

    def cell(self, budget, method, mode, seed) -> EvaluationReport:
        for c in self.cells:
            if (c["budget"], c["method"], c["mode"], c["seed"]) == (budget, method, mode, seed):
                return c["report"]
        raise KeyError((budget, method, mode, seed))

    def pooled(self, budget, method, mode) -> list:
        out = []
        for s in self.seeds:
            out.extend(self.cell(budget, method, mode, s).daily_rewards)
        return out

    def to_dict(self) -> dict:
        rows = {}
        for b in self.budgets:
            row = {"teacher": self.teacher.summary, "full_depth": full_depth_for(b)}
            for method in ("full", "asymmetric"):
                row[method] = {}
                for mode in ("soft", "hardened"):
                    reps = [self.cell(b, method, mode, s) for s in self.seeds]
                    row[method][mode] = {
                        "daily_reward": summarize(self.pooled(b, method, mode)),
                        "test_kl_per_seed": [r.test_kl for r in reps],
                        "fidelity_per_seed": [r.fidelity for r in reps],
                        "node_count": [r.node_count for r in reps],
                        "max_depth_per_seed": [r.max_depth for r in reps],
                    }
            rows[str(b)] = row
        return {"schema_version": SCHEMA_VERSION, "budgets": self.budgets, "seeds": self.seeds,
                "test_days": self.test_days, "teacher": self.teacher.to_dict(),
                "always_off": self.always_off.to_dict(), "rows": rows,
                "reward_identity_violations": self.reward_identity_violations,
                "steps_checked": self.steps_checked}

    def daily_rows(self):
        for b in self.budgets:
            for s in self.seeds:
                for day, r in enumerate(self.teacher.daily_rewards):
                    yield (b, "teacher", "greedy", s, day, r)
                for method in ("full", "asymmetric"):
                    for mode in ("soft", "hardened"):
                        for day, r in enumerate(self.cell(b, method, mode, s).daily_rewards):
                            yield (b, method, mode, s, day, r)

    def write(self, json_path, csv_path):
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1))
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DAILY_CSV_COLUMNS)
            for b, m, mode, s, d, r in self.daily_rows():
                w.writerow([b, m, mode, s, d, repr(float(r))])


def compare_budgets(train: DistillDataset, test: DistillDataset, env_cfg: EnvConfig,
                    teacher: TeacherModel, budgets=PAPER_BUDGETS, seeds=range(5),
                    cfg: DistillConfig | None = None, test_days: int = TEST_DAYS,
                    test_start_day: int = TRAIN_DAYS, tree_sink=None) -> ComparisonMatrix:
    """Distill full and asymmetric trees per budget and seed, then evaluate on the test period.

    ``tree_sink(budget, method, seed, soft_tree, trace)`` is called for every
    distilled tree when given (used to persist artifacts).
    """
    cfg = cfg or DistillConfig()
    budgets = [int(b) for b in budgets]
    seeds = [int(s) for s in seeds]
    depths = {b: full_depth_for(b) for b in budgets}

    teacher_roll = rollout(teacher, env_cfg, test_days, test_start_day)
    teacher_rep = EvaluationReport("teacher", "greedy", teacher_roll.daily_rewards,
                                   summarize(teacher_roll.daily_rewards))
    off = rollout_policy(lambda s: 0, env_cfg, test_days, test_start_day)
    off_rep = EvaluationReport("always_off", "constant", off, summarize(off))
    violations, checked = teacher_roll.identity_violations, len(teacher_roll.step_rewards)

    cells, timings = [], {"full": 0.0, "asymmetric": 0.0, "evaluate": 0.0}
    for seed in seeds:
        scfg = DistillConfig(**{**asdict(cfg), "seed": seed})
        t0 = time.perf_counter()
        asym = distill_asymmetric_path(train, scfg, budgets)
        timings["asymmetric"] += time.perf_counter() - t0
        for b in budgets:
            t0 = time.perf_counter()
            full_tree, full_trace = distill_full(train, depths[b], scfg)
            timings["full"] += time.perf_counter() - t0
            for method, (tree, trace) in (("full", (full_tree, full_trace)),
                                          ("asymmetric", asym[b])):
                if tree_sink is not None:
                    tree_sink(b, method, seed, tree, trace)
                t0 = time.perf_counter()
                for mode, t in ((SOFT, tree), ("hardened", harden(tree))):
                    ro = rollout(t, env_cfg, test_days, test_start_day)
                    violations += ro.identity_violations
                    checked += len(ro.step_rewards)
                    rep = EvaluationReport(method, mode, ro.daily_rewards,
                                           summarize(ro.daily_rewards), mean_kl(t, test),
                                           fidelity(t, test), t.n_internal, t.max_depth)
                    cells.append({"budget": b, "method": method, "mode": mode, "seed": seed,
                                  "report": rep})
                timings["evaluate"] += time.perf_counter() - t0
            log.info("seed %d budget %d done", seed, b)
    return ComparisonMatrix(budgets, seeds, test_days, teacher_rep, off_rep, cells, timings,
                            violations, checked)

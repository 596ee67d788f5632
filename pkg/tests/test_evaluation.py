import csv
import json

import numpy as np
import pytest

from asymddt.distill import DistillConfig, DistillDataset
from asymddt.evaluation import (
    DAILY_CSV_COLUMNS,
    ComparisonConfigError,
    compare_budgets,
    fidelity,
    full_depth_for,
    rollout,
    rollout_policy,
    summarize,
    tree_policy,
)
from asymddt.teacher import Discretization, TeacherModel, generate_train_test
from asymddt.thermal import N_ACTIONS, EnvConfig
from asymddt.tree import FeatureScaling, TreeModel, harden, serialize_tree

from conftest import random_dataset, random_tree


def thermostat_teacher():
    """Table teacher that heats fully whenever the zone bin is below 21 C."""
    disc = Discretization()
    table = {}
    for h in range(disc.hour_bins):
        for z in range(len(disc.zone_edges) - 1):
            for o in range(len(disc.outdoor_edges) - 1):
                for c in range(len(disc.comfort_levels)):
                    q = np.zeros(N_ACTIONS)
                    q[4 if disc.zone_edges[z] < 21.0 else 0] = 1.0
                    table[(h, z, o, c)] = q
    return TeacherModel(table, disc)


@pytest.fixture(scope="module")
def small_setup():
    teacher = thermostat_teacher()
    train, test = generate_train_test(teacher, EnvConfig(), 1.0, train_days=4, test_days=2)
    return teacher, train, test


class TestRollout:
    def test_always_off_cold_day_negative(self):
        daily = rollout_policy(lambda s: 0, EnvConfig(), 1, start_day=30)
        assert daily[0] < 0

    def test_deterministic(self, small_setup):
        teacher = small_setup[0]
        assert rollout_policy(teacher, EnvConfig(), 2) == rollout_policy(teacher, EnvConfig(), 2)

    def test_daily_sums_match_steps(self):
        ro = rollout(lambda s: int(s.time_index % N_ACTIONS), EnvConfig(), 3, start_day=0)
        assert len(ro.daily_rewards) == 3
        assert sum(ro.daily_rewards) == pytest.approx(sum(ro.step_rewards), abs=1e-9)
        assert ro.identity_violations == 0

    def test_student_copying_teacher_gets_same_rewards(self, small_setup):
        teacher = small_setup[0]
        copy = lambda s: teacher.greedy_action(s)
        assert rollout_policy(copy, EnvConfig(), 2) == rollout_policy(teacher, EnvConfig(), 2)

    def test_tree_policy_needs_scaling(self):
        with pytest.raises(Exception):
            tree_policy(TreeModel.stub(4, 5))

    def test_tree_rollout_does_not_mutate(self, rng):
        t = random_tree(rng, 3)
        t.scaling = FeatureScaling(np.zeros(4), np.ones(4))
        before = serialize_tree(t)
        rollout_policy(t, EnvConfig(), 1)
        rollout_policy(harden(t), EnvConfig(), 1)
        assert serialize_tree(t) == before


class TestFidelity:
    def test_modal_leaf_perfect(self):
        t = TreeModel.stub(4, 5, logits=np.r_[0, 0, 3.0, 0, 0])
        targets = np.tile(np.r_[0.1, 0.1, 0.6, 0.1, 0.1], (10, 1))
        assert fidelity(t, DistillDataset(np.zeros((10, 4)), targets)) == 1.0

    def test_uniform_ties_lowest_index(self):
        t = TreeModel.stub(4, 5)
        data = DistillDataset(np.zeros((4, 4)), np.full((4, 5), 0.2))
        assert fidelity(t, data) == 1.0

    def test_random_baseline(self, rng):
        t = random_tree(rng, 7, logit_scale=3.0)
        f = fidelity(t, random_dataset(rng, 1000))
        # binomial(1000, 0.2): 4 standard deviations is about 0.05
        assert abs(f - 0.2) < 0.06


class TestSummaryAndBudgets:
    def test_summarize(self):
        s = summarize([1.0, 2.0, 3.0, 4.0])
        assert s["mean"] == 2.5 and s["median"] == 2.5 and s["min"] == 1 and s["max"] == 4

    @pytest.mark.parametrize("budget,depth", [(3, 2), (7, 3), (15, 4), (31, 5)])
    def test_full_depths(self, budget, depth):
        assert full_depth_for(budget) == depth

    @pytest.mark.parametrize("budget", [0, 6, 10])
    def test_bad_budget(self, budget):
        with pytest.raises(ComparisonConfigError):
            full_depth_for(budget)


@pytest.fixture(scope="module")
def matrix(small_setup):
    teacher, train, test = small_setup
    cfg = DistillConfig(epochs=40, full_epochs=40, min_leaf_samples=2)
    return compare_budgets(train, test, EnvConfig(), teacher, budgets=(1, 3), seeds=(0, 1),
                           cfg=cfg, test_days=2, test_start_day=4)


class TestCompare:
    def test_cells(self, matrix):
        assert len(matrix.cells) == 2 * 2 * 2 * 2
        for c in matrix.cells:
            assert len(c["report"].daily_rewards) == 2
            assert 0.0 <= c["report"].fidelity <= 1.0

    def test_node_counts(self, matrix):
        assert matrix.cell(3, "full", "soft", 0).node_count == 3
        assert matrix.cell(3, "asymmetric", "hardened", 1).node_count == 3

    def test_teacher_column_constant(self, matrix):
        rows = [r for r in matrix.daily_rows() if r[1] == "teacher"]
        by_budget = {}
        for b, _, _, s, d, r in rows:
            by_budget.setdefault((s, d), set()).add(r)
        assert all(len(v) == 1 for v in by_budget.values())

    def test_files(self, matrix, tmp_path):
        matrix.write(tmp_path / "m.json", tmp_path / "d.csv")
        doc = json.loads((tmp_path / "m.json").read_text())
        assert doc["schema_version"] == 1 and set(doc["rows"]) == {"1", "3"}
        with open(tmp_path / "d.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == DAILY_CSV_COLUMNS
        # budgets x seeds x (teacher + 2 methods x 2 modes) x days
        assert len(rows) - 1 == 2 * 2 * 5 * 2

    def test_bad_budget_rejected(self, small_setup):
        teacher, train, test = small_setup
        with pytest.raises(ComparisonConfigError):
            compare_budgets(train, test, EnvConfig(), teacher, budgets=(6,), seeds=(0,))

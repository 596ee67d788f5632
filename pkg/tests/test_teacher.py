import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asymddt.teacher import (
    Discretization,
    TeacherFormatError,
    TeacherModel,
    TeacherTrainConfig,
    generate_dataset,
    generate_train_test,
    load_external_teacher,
    save_teacher,
    teacher_distribution,
    teacher_train,
)
from asymddt.thermal import EnvConfig, env_reset, env_step
from asymddt.evaluation import rollout_policy


@pytest.fixture(scope="module")
def trained():
    """Default-configuration teacher (2000 one-day episodes)."""
    return teacher_train(EnvConfig(), TeacherTrainConfig())[0]


def table_teacher(q):
    s = env_reset(EnvConfig(), start_hour=12)
    disc = Discretization()
    return TeacherModel({disc.state_key(s): np.asarray(q, float)}, disc), s


class TestDistribution:
    def test_constant_q_uniform(self):
        m, s = table_teacher([3.0] * 5)
        np.testing.assert_allclose(teacher_distribution(m, s, 1.0), 0.2, atol=1e-15)

    def test_hand_softmax(self):
        m, s = table_teacher([1.0, 0, 0, 0, 0])
        e = math.e
        expected = [e / (e + 4)] + [1 / (e + 4)] * 4
        p = teacher_distribution(m, s, 1.0)
        np.testing.assert_allclose(p, expected, atol=1e-12)
        assert p[0] == pytest.approx(0.4046, abs=1e-4) and p[1] == pytest.approx(0.1488, abs=1e-4)

    def test_low_temperature_concentrates(self):
        m, s = table_teacher([0.5, 0.2, -0.1, 0.0, 0.3])
        assert teacher_distribution(m, s, 0.01).max() > 0.999

    @given(st.lists(st.floats(-50, 50), min_size=5, max_size=5), st.floats(-100, 100),
           st.floats(0.05, 10))
    def test_shift_invariance(self, q, c, tau):
        m, s = table_teacher(q)
        m2, _ = table_teacher(np.array(q) + c)
        p, p2 = teacher_distribution(m, s, tau), teacher_distribution(m2, s, tau)
        assert abs(p.sum() - 1) < 1e-12
        np.testing.assert_allclose(p, p2, atol=1e-9)

    def test_missing_state_uniform_and_counted(self):
        m = TeacherModel()
        p = teacher_distribution(m, env_reset(EnvConfig()), 1.0)
        np.testing.assert_allclose(p, 0.2)
        assert m.missing_lookups == 1

    def test_bad_tau(self):
        m, s = table_teacher([0] * 5)
        with pytest.raises(ValueError):
            teacher_distribution(m, s, 0.0)

    def test_out_of_range_clamps(self):
        d = Discretization()
        assert d.key(12.0, 40.0, -30.0, 21.0) == d.key(12.0, 26.0, -10.0, 21.0)


class TestTraining:
    def test_zero_episodes(self, caplog):
        m, curve = teacher_train(EnvConfig(), TeacherTrainConfig(episodes=0))
        assert m.q_values == {} and curve == []
        assert "0 episodes" in caplog.text

    def test_deterministic(self):
        cfg = TeacherTrainConfig(episodes=20, seed=4)
        a, ca = teacher_train(EnvConfig(), cfg)
        b, cb = teacher_train(EnvConfig(), cfg)
        assert ca == cb and a.q_values.keys() == b.q_values.keys()
        for k in a.q_values:
            np.testing.assert_array_equal(a.q_values[k], b.q_values[k])

    def test_only_visited_states_stored(self):
        cfg = TeacherTrainConfig(episodes=3, seed=1)
        m, _ = teacher_train(EnvConfig(), cfg)
        assert 0 < len(m.q_values) <= 3 * EnvConfig().steps_per_day

    def test_bad_discount(self):
        with pytest.raises(ValueError):
            TeacherTrainConfig(discount=1.0)

    def test_beats_constant_policies(self, trained):
        cfg = EnvConfig()
        teacher = np.mean(rollout_policy(trained, cfg, 14))
        off = np.mean(rollout_policy(lambda s: 0, cfg, 14))
        full = np.mean(rollout_policy(lambda s: 4, cfg, 14))
        assert teacher > off and teacher > full


class TestDataset:
    def test_one_day_count(self, trained):
        d = generate_dataset(trained, EnvConfig(), 1, 1.0)
        assert len(d) == 96
        assert np.max(np.abs(d.targets.sum(1) - 1)) < 1e-9

    def test_train_test_split(self, trained):
        train, test = generate_train_test(trained, EnvConfig(), 1.0, train_days=3, test_days=2)
        assert len(train) == 3 * 96 and len(test) == 2 * 96
        assert not set(train.time_index) & set(test.time_index)
        assert test.scaling == train.scaling
        assert train.meta["tau"] == 1.0

    def test_deterministic(self, trained):
        a = generate_dataset(trained, EnvConfig(), 2, 0.5)
        b = generate_dataset(trained, EnvConfig(), 2, 0.5)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.targets, b.targets)

    def test_follows_greedy_rollout(self, trained):
        cfg = EnvConfig()
        d = generate_dataset(trained, cfg, 1, 1.0, start_day=5)
        s = env_reset(cfg, start_day=5)
        for row in d.raw_x()[:10]:
            np.testing.assert_allclose(row, s.raw_features(), atol=1e-9)
            s, _ = env_step(s, trained.greedy_action(s), cfg)


class TestTeacherFiles:
    def test_round_trip(self, trained, tmp_path):
        path = save_teacher(trained, tmp_path / "t.jsonl")
        back = load_external_teacher(path)
        assert back.q_values.keys() == trained.q_values.keys()
        cfg = EnvConfig()
        s = env_reset(cfg, start_day=60)
        for _ in range(200):
            np.testing.assert_array_equal(teacher_distribution(back, s, 1.0),
                                          teacher_distribution(trained, s, 1.0))
            s, _ = env_step(s, trained.greedy_action(s), cfg)

    def test_single_record(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text(json.dumps({"state": [12.0, 20.0, 5.0, 21.0], "q": [1, 2, 3, 4, 5]}) + "\n")
        m = load_external_teacher(p)
        assert len(m.q_values) == 1 and m.kind == "external-table"

    def test_wrong_q_length_names_line(self, tmp_path):
        p = tmp_path / "t.jsonl"
        good = json.dumps({"state_key": [0, 0, 0, 0], "q": [0] * 5})
        bad = json.dumps({"state_key": [0, 1, 0, 0], "q": [0] * 4})
        p.write_text(good + "\n" + bad + "\n")
        with pytest.raises(TeacherFormatError, match=r":2: expected 5 Q-values, got 4"):
            load_external_teacher(p)

    def test_malformed_json_names_line(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(TeacherFormatError, match=":1:"):
            load_external_teacher(p)

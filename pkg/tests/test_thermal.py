import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asymddt.thermal import (
    EPISODE_LOG_COLUMNS,
    N_ACTIONS,
    EnvConfig,
    EnvFault,
    EnvState,
    compose_reward,
    electric_energy_kwh,
    env_config_from_mapping,
    env_reset,
    env_step,
    load_env_config,
    outdoor_temp,
    price,
    state_to_features,
    write_episode_log,
)
from asymddt.tree import FeatureScaling


def state(tz=20.0, to=0.0, hour=12.0, ts=21.0, t=48):
    return EnvState(hour, tz, to, ts, t)


class TestReset:
    def test_deterministic(self):
        cfg = EnvConfig(seed=7)
        assert env_reset(cfg, start_day=3) == env_reset(cfg, start_day=3)

    def test_initial_zone_temp(self):
        assert env_reset(EnvConfig()).zone_temp == 20.0

    @pytest.mark.parametrize("hour,expected", [(12, 21.0), (3, 15.0), (7, 21.0), (22, 15.0)])
    def test_comfort_schedule(self, hour, expected):
        assert env_reset(EnvConfig(), start_hour=hour).comfort_lower == expected

    def test_seed_changes_noise(self):
        a = env_reset(EnvConfig(seed=1), start_day=5)
        b = env_reset(EnvConfig(seed=2), start_day=5)
        assert a.outdoor_temp != b.outdoor_temp


class TestStep:
    def test_hand_euler_step(self):
        nxt, _ = env_step(state(20.0, 0.0), 4, EnvConfig(outdoor_noise_std=0.0))
        # 20 + 900 / 1e7 * (250 * (0 - 20) + 3 * 3000)
        assert nxt.zone_temp == pytest.approx(20.36, abs=1e-9)

    def test_reward_arithmetic(self):
        assert compose_reward(0.5, 0.01, 100.0) == pytest.approx(-1.5, abs=1e-12)

    def test_off_relaxes_toward_ambient(self):
        nxt, rc = env_step(state(20.0, 0.0), 0, EnvConfig())
        assert 0.0 < nxt.zone_temp < 20.0
        assert rc.energy_cost == 0.0

    def test_discomfort_uses_next_bound(self):
        cfg = EnvConfig()
        # 06:45 -> 07:00 switches the bound from 15 to 21
        s = EnvState(6.75, 18.0, 0.0, 15.0, 27)
        nxt, rc = env_step(s, 0, cfg)
        assert nxt.comfort_lower == 21.0
        assert rc.discomfort == pytest.approx((21.0 - nxt.zone_temp) * 0.25, abs=1e-12)

    def test_advances_time(self):
        nxt, _ = env_step(state(hour=23.75, t=95), 0, EnvConfig())
        assert nxt.time_index == 96 and nxt.hour == 0.0

    def test_invalid_action(self):
        with pytest.raises(ValueError):
            env_step(state(), N_ACTIONS, EnvConfig())

    def test_nonfinite_state_faults(self):
        with pytest.raises(EnvFault):
            env_step(state(tz=math.nan), 0, EnvConfig())

    def test_cost_per_floor_area(self):
        cfg = EnvConfig()
        _, rc = env_step(state(hour=12.0), 4, cfg)
        assert rc.energy_cost == pytest.approx(0.30 * 0.75 / cfg.floor_area, rel=1e-12)


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.floats(-10, 15), st.floats(0.5, 25))
    def test_zero_action_relaxation(self, to, gap):
        cfg = EnvConfig(outdoor_noise_std=0.0, outdoor_daily_amp=0.0, outdoor_seasonal_amp=0.0,
                        outdoor_mean=to)
        s = env_reset(cfg, zone_temp=to + gap)
        prev = s.zone_temp
        for _ in range(200):
            s, _ = env_step(s, 0, cfg)
            assert to <= s.zone_temp <= prev
            prev = s.zone_temp

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(0, N_ACTIONS - 1), min_size=1, max_size=200), st.integers(0, 50))
    def test_reward_identity_and_cost_accounting(self, actions, day):
        cfg = EnvConfig()
        s = env_reset(cfg, start_day=day)
        total_cost, tariff_energy = 0.0, 0.0
        for a in actions:
            h = s.hour
            s, rc = env_step(s, a, cfg)
            assert rc.reward == -(rc.discomfort + rc.omega * rc.energy_cost)
            assert rc.discomfort >= 0 and rc.energy_cost >= 0
            total_cost += rc.energy_cost
            tariff_energy += price(cfg, h) * electric_energy_kwh(cfg, a) / cfg.floor_area
        assert total_cost == pytest.approx(tariff_energy, abs=1e-9)

    def test_full_determinism(self):
        cfg = EnvConfig(seed=3)
        runs = []
        for _ in range(2):
            s = env_reset(cfg, start_day=10)
            traj = []
            for t in range(300):
                s, rc = env_step(s, t % N_ACTIONS, cfg)
                traj.append((s, rc))
            runs.append(traj)
        assert runs[0] == runs[1]

    def test_outdoor_peaks_in_afternoon(self):
        cfg = EnvConfig(outdoor_noise_std=0.0, outdoor_seasonal_amp=0.0)
        temps = [outdoor_temp(cfg, t) for t in range(96)]
        assert int(np.argmax(temps)) * 0.25 == cfg.outdoor_peak_hour


class TestFeatures:
    def test_hour_encoding(self):
        assert state_to_features(state(hour=12.0))[0] == 0.5

    def test_standardize_mean_gives_zero(self):
        s = state()
        raw = state_to_features(s)
        np.testing.assert_array_equal(state_to_features(s, FeatureScaling(raw, np.ones(4))), 0.0)

    def test_round_trip(self, rng):
        sc = FeatureScaling(rng.normal(size=4), rng.uniform(0.5, 3, 4))
        raw = state_to_features(state(19.3, -2.7, 8.25))
        np.testing.assert_allclose(sc.unstandardize(sc.standardize(raw)), raw, atol=1e-12)


class TestConfigAndLog:
    def test_load_config(self, tmp_path):
        p = tmp_path / "env.ini"
        p.write_text("[env]\ncapacitance = 2e7\nseed = 4\n")
        cfg = load_env_config(p)
        assert cfg.capacitance == 2e7 and cfg.seed == 4

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            env_config_from_mapping({"capacitence": "1"})

    def test_invalid_timestep(self):
        with pytest.raises(ValueError):
            EnvConfig(timestep=7)

    def test_episode_log(self, tmp_path):
        cfg = EnvConfig()
        s = env_reset(cfg)
        nxt, rc = env_step(s, 2, cfg)
        path = write_episode_log(tmp_path / "log.csv", [(s, 2, rc)])
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == list(EPISODE_LOG_COLUMNS)
        assert len(lines) == 2

"""Tests for demo scenario assembly and reference integration."""

import numpy as np
import pytest

from funnelkit.dynamics import DubinsModel
from funnelkit.io import config_from_dict, save_trajectory
from funnelkit.scenarios import (
    _tvlqr_weights,
    build_scenario,
    integrate_reference,
    load_packaged_config,
    packaged_config_names,
)
from funnelkit.solver import ConfigError


def dubins_closed_form(speed, turn, theta0, t):
    """Exact unicycle arc from the origin under constant turn rate."""
    theta = theta0 + turn * t
    x = speed / turn * (np.sin(theta) - np.sin(theta0))
    y = speed / turn * (np.cos(theta0) - np.cos(theta))
    return np.stack([x, y, theta], axis=-1)


@pytest.fixture(scope="module")
def entry_scenario():
    return build_scenario(load_packaged_config("entry_demo"))


@pytest.fixture(scope="module")
def dubins_scenario():
    return build_scenario(load_packaged_config("dubins_demo"))


class TestPackagedConfigs:
    def test_demo_names_present(self):
        names = packaged_config_names()
        assert "entry_demo" in names
        assert "dubins_demo" in names

    def test_load_packaged(self):
        cfg = load_packaged_config("entry_demo")
        assert cfg.system == "entry"
        assert isinstance(cfg.seed, int)

    def test_unknown_name_lists_available(self):
        with pytest.raises(ConfigError, match="dubins_demo"):
            load_packaged_config("rocket_demo")


class TestDubinsScenario:
    def test_shapes_consistent(self, dubins_scenario):
        sc = dubins_scenario
        N = sc.trajectory.n_steps
        assert sc.name == "dubins"
        assert sc.trajectory.states.shape == (N, 3)
        assert sc.certificate.P.shape == (N, 3, 3)
        assert sc.certificate.K.shape == (N - 1, 1, 3)
        assert sc.disturbance.dim == sc.model.n_dist == 3
        assert sc.initial_set.dim == 3

    def test_reference_follows_closed_form(self, dubins_scenario):
        sc = dubins_scenario
        cfg = sc.config.model
        expected = dubins_closed_form(cfg["speed"], cfg["turn_rate"], 0.0,
                                      sc.trajectory.times)
        assert np.allclose(sc.trajectory.states, expected, atol=1e-7)

    def test_gains_are_stabilizing(self, dubins_scenario):
        # additive convention: closing the loop must beat the open-loop value
        cert = dubins_scenario.certificate
        K = cert.K
        assert np.all(np.isfinite(K))
        assert np.max(np.abs(K)) > 0


class TestEntryScenario:
    def test_shapes_consistent(self, entry_scenario):
        sc = entry_scenario
        N = sc.trajectory.n_steps
        assert sc.name == "entry"
        assert sc.trajectory.states.shape == (N, 6)
        assert sc.certificate.P.shape == (N, 6, 6)
        assert sc.certificate.K.shape == (N - 1, 1, 6)
        # only the two density coefficients are active disturbance channels
        assert sc.model.n_dist == 2
        assert sc.disturbance.dim == 2

    def test_reference_decelerates(self, entry_scenario):
        V = entry_scenario.trajectory.states[:, 3]
        assert V[-1] < V[0]
        assert np.all(V > 0)

    def test_certificate_matrices_positive_definite(self, entry_scenario):
        for P in entry_scenario.certificate.P[:: max(1, len(entry_scenario.certificate.P) // 7)]:
            assert np.linalg.eigvalsh(P)[0] > 0


class TestIntegrateReference:
    def test_matches_dubins_closed_form(self):
        model = DubinsModel(speed=2.0)
        theta0 = 0.3
        controls = np.full((50, 1), 0.5)
        traj = integrate_reference(model, [0.0, 0.0, theta0], controls, 0.01)
        expected = dubins_closed_form(2.0, 0.5, theta0, traj.times)
        # RK4 at dt=0.01 over 0.5 s: global error well under 1e-8
        assert np.allclose(traj.states, expected, atol=1e-8)

    def test_straight_line_exact(self):
        model = DubinsModel(speed=3.0)
        controls = np.zeros((20, 1))
        traj = integrate_reference(model, [1.0, -2.0, 0.5], controls, 0.05)
        t = traj.times
        assert np.allclose(traj.states[:, 0], 1.0 + 3.0 * np.cos(0.5) * t, atol=1e-12)
        assert np.allclose(traj.states[:, 1], -2.0 + 3.0 * np.sin(0.5) * t, atol=1e-12)
        assert np.allclose(traj.states[:, 2], 0.5, atol=1e-12)

    def test_variable_step_sizes(self):
        model = DubinsModel(speed=2.0)
        dts = np.array([0.01, 0.02, 0.04, 0.03])
        controls = np.full((4, 1), 0.5)
        traj = integrate_reference(model, [0.0, 0.0, 0.0], controls, dts)
        assert np.allclose(traj.times, [0.0, 0.01, 0.03, 0.07, 0.1])
        expected = dubins_closed_form(2.0, 0.5, 0.0, traj.times[-1])
        assert np.allclose(traj.states[-1], expected, atol=1e-10)

    def test_single_row_with_scalar_dt_rejected(self):
        model = DubinsModel(speed=1.0)
        with pytest.raises(ValueError, match="control row per step"):
            integrate_reference(model, [0.0, 0.0, 0.0], [0.5], 0.1)


class TestWeights:
    def test_missing_q_or_r(self):
        with pytest.raises(ConfigError, match="Q and R"):
            _tvlqr_weights({"Q": [1.0, 1.0]}, 2, 1)

    def test_diagonal_expansion_and_qf_scale(self):
        Q, R, Qf = _tvlqr_weights({"Q": [1.0, 4.0], "R": [[0.5]], "Qf_scale": 3.0}, 2, 1)
        assert np.array_equal(Q, np.diag([1.0, 4.0]))
        assert np.array_equal(R, [[0.5]])
        assert np.array_equal(Qf, 3.0 * Q)

    def test_explicit_qf_wins(self):
        _, _, Qf = _tvlqr_weights({"Q": [1.0], "R": [1.0], "Qf": [7.0]}, 1, 1)
        assert np.array_equal(Qf, [[7.0]])

    def test_wrong_size_rejected(self):
        with pytest.raises(ConfigError, match="tvlqr.R"):
            _tvlqr_weights({"Q": [1.0, 1.0], "R": [1.0, 1.0]}, 2, 1)


class TestConfigErrors:
    def entry_raw(self) -> dict:
        import importlib.resources as ir
        import json

        text = (ir.files("funnelkit") / "configs" / "entry_demo.json").read_text()
        return json.loads(text)

    def dubins_raw(self) -> dict:
        import importlib.resources as ir
        import json

        text = (ir.files("funnelkit") / "configs" / "dubins_demo.json").read_text()
        return json.loads(text)

    def test_entry_missing_model_field(self):
        raw = self.entry_raw()
        del raw["model"]["mass"]
        with pytest.raises(ConfigError, match="mass"):
            build_scenario(config_from_dict(raw))

    def test_entry_unknown_disturbance_slot(self):
        raw = self.entry_raw()
        raw["model"]["disturbance_slots"] = ["density_a0", "wind_gust"]
        with pytest.raises(ConfigError, match="wind_gust"):
            build_scenario(config_from_dict(raw))

    def test_entry_missing_initial_state_field(self):
        raw = self.entry_raw()
        del raw["model"]["initial_state"]["speed"]
        with pytest.raises(ConfigError, match="speed"):
            build_scenario(config_from_dict(raw))

    def test_bank_schedule_length_checked(self):
        raw = self.entry_raw()
        raw["model"]["bank"] = [0.3, 0.3, 0.3]
        with pytest.raises(ConfigError, match="steps-1"):
            build_scenario(config_from_dict(raw))

    def test_turn_rate_schedule_length_checked(self):
        raw = self.dubins_raw()
        raw["model"]["turn_rate"] = [0.5, 0.5]
        with pytest.raises(ConfigError, match="steps-1"):
            build_scenario(config_from_dict(raw))

    def test_missing_initial_set(self):
        raw = self.dubins_raw()
        del raw["initial_set"]
        with pytest.raises(ConfigError, match="initial_set"):
            build_scenario(config_from_dict(raw))

    def test_missing_disturbance(self):
        raw = self.dubins_raw()
        del raw["disturbance"]
        with pytest.raises(ConfigError, match="disturbance"):
            build_scenario(config_from_dict(raw))

    def test_initial_set_size_checked(self):
        raw = self.dubins_raw()
        raw["initial_set"] = [1.0, 1.0]
        with pytest.raises(ConfigError, match="3x3"):
            build_scenario(config_from_dict(raw))

    def test_disturbance_channel_count_checked(self):
        raw = self.dubins_raw()
        raw["disturbance"] = [1.0, 1.0]
        with pytest.raises(ConfigError, match="channels"):
            build_scenario(config_from_dict(raw))


class TestExternalTrajectory:
    def make_reference(self, tmp_path):
        model = DubinsModel(speed=2.0)
        controls = np.full((12, 1), 0.4)
        traj = integrate_reference(model, [0.0, 0.0, 0.0], controls, 0.1)
        path = tmp_path / "ref.json"
        save_trajectory(traj, path)
        return traj, path

    def external_config(self, path) -> dict:
        return {
            "system": "external",
            "seed": 5,
            "trajectory": str(path),
            "model": {"kind": "dubins", "speed": 2.0},
            "tvlqr": {"Q": [1.0, 1.0, 0.5], "R": [0.5]},
            "initial_set": [50.0, 50.0, 80.0],
            "disturbance": [2000.0, 2000.0, 800.0],
        }

    def test_builds_from_file(self, tmp_path):
        traj, path = self.make_reference(tmp_path)
        sc = build_scenario(config_from_dict(self.external_config(path)))
        assert sc.name == "external"
        assert np.array_equal(sc.trajectory.states, traj.states)
        assert sc.certificate.P.shape == (13, 3, 3)

    def test_requires_model_kind(self, tmp_path):
        _, path = self.make_reference(tmp_path)
        data = self.external_config(path)
        data["model"] = {}
        with pytest.raises(ConfigError, match="model.kind"):
            build_scenario(config_from_dict(data))

    def test_state_count_mismatch_rejected(self, tmp_path):
        _, path = self.make_reference(tmp_path)
        data = self.external_config(path)
        data["model"] = {"kind": "entry"} | {
            k: v for k, v in self.entry_model_stub().items()
        }
        with pytest.raises(ConfigError, match="states"):
            build_scenario(config_from_dict(data))

    @staticmethod
    def entry_model_stub() -> dict:
        import importlib.resources as ir
        import json

        raw = json.loads((ir.files("funnelkit") / "configs" / "entry_demo.json").read_text())
        return raw["model"]

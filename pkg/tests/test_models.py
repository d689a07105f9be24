import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkmcdse.models.events import LoadDrop, PacketLoss, apply_event, event_from_config
from mkmcdse.models.holt import HoltForecaster, holt_transition
from mkmcdse.models.noise import (
    GaussianNoise,
    MixedGaussianNoise,
    RayleighNoise,
    mixed_gaussian_default,
    noise_from_config,
)
from mkmcdse.models.power import (
    GridConfigError,
    PowerModel,
    load_grid,
    node_selection,
    padded_selection,
    parse_selection,
    power_jacobian,
    power_measurement,
    power_truth,
)
from mkmcdse.models.vehicle import (
    INITIAL_TRUTH,
    MEASUREMENT_MATRIX,
    VehicleModel,
    transition_matrix,
    vehicle_measure,
    vehicle_step,
)

GRID = load_grid()


class TestNoise:
    def test_mixture_moments(self):
        mix = mixed_gaussian_default()
        assert mix.variance == pytest.approx(15.04)
        assert mix.second_moment == pytest.approx(15.04)
        shifted = mixed_gaussian_default(0.5)
        assert shifted.second_moment == pytest.approx(15.29)
        assert shifted.variance == pytest.approx(15.04)

    def test_mixture_sample_variance(self):
        x = mixed_gaussian_default().sample(np.random.default_rng(0), 400_000)
        assert x.var() == pytest.approx(15.04, rel=0.01)

    def test_rayleigh_moments(self):
        r = RayleighNoise(3.0)
        x = r.sample(np.random.default_rng(1), 400_000)
        assert r.second_moment == 18.0
        assert x.mean() == pytest.approx(r.mean, rel=0.01)
        assert x.var() == pytest.approx(r.variance, rel=0.01)
        assert x.min() >= 0

    def test_gaussian_second_moment(self):
        assert GaussianNoise(2.0, 3.0).second_moment == 7.0

    @pytest.mark.parametrize("bad", [
        lambda: GaussianNoise(var=0.0),
        lambda: MixedGaussianNoise(((0.5, 0.0, 1.0), (0.6, 0.0, 1.0))),
        lambda: MixedGaussianNoise(((1.0, 0.0, -1.0),)),
        lambda: RayleighNoise(0.0),
        lambda: noise_from_config({"kind": "laplace"}),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            bad()

    def test_from_config(self):
        assert noise_from_config({"kind": "rayleigh", "sigma": 2}) == RayleighNoise(2.0)
        assert noise_from_config({"kind": "mixed_gaussian"}) == mixed_gaussian_default()
        custom = noise_from_config({"kind": "mixed_gaussian", "components": [[0.5, 0, 1], [0.5, 1, 2]]})
        assert custom.components == ((0.5, 0.0, 1.0), (0.5, 1.0, 2.0))


class TestVehicle:
    def test_transition(self):
        F = transition_matrix(0.3)
        assert F[0, 2] == F[1, 3] == 0.3
        np.testing.assert_array_equal(np.diag(F), np.ones(4))

    def test_deterministic_step(self):
        x = vehicle_step(INITIAL_TRUTH, np.random.default_rng(0), np.zeros((4, 4)))
        np.testing.assert_allclose(x, transition_matrix() @ INITIAL_TRUTH)

    def test_measurement(self):
        y = vehicle_measure(INITIAL_TRUTH, np.random.default_rng(0), RayleighNoise(1e-12))
        np.testing.assert_allclose(y, MEASUREMENT_MATRIX @ INITIAL_TRUTH, atol=1e-10)

    def test_filter_model_is_linear(self):
        vm = VehicleModel()
        fm = vm.filter_model()
        u = np.arange(4.0)
        np.testing.assert_allclose(fm.f(u), vm.F @ u)
        np.testing.assert_allclose(fm.h(u), vm.Hm @ u)
        assert vm.initial_belief().cov[0, 0] == 900.0


class TestHolt:
    def test_one_step(self):
        pred, level, trend, G = holt_transition(np.array([1.0]), np.array([0.0]), np.array([2.0]), 0.8, 0.5)
        # level 1.8, trend 0.4, forecast 2.2
        assert level[0] == pytest.approx(1.8) and trend[0] == pytest.approx(0.4)
        assert pred[0] == pytest.approx(2.2)
        assert G[0, 0] == pytest.approx(1.2)

    @given(x=st.lists(st.floats(-10, 10), min_size=3, max_size=3), h=st.floats(1e-4, 1e-2))
    def test_jacobian_matches_finite_difference(self, x, h):
        x = np.array(x)
        base = HoltForecaster(np.ones(3))
        G = base.jacobian(x)
        fd = np.empty((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd[:, k] = (HoltForecaster(np.ones(3))(x + e) - HoltForecaster(np.ones(3))(x - e)) / (2 * h)
        np.testing.assert_allclose(G, fd, atol=1e-8)

    def test_constant_series_is_fixed_point(self):
        f = HoltForecaster(np.full(2, 1.5))
        for _ in range(5):
            np.testing.assert_allclose(f(np.full(2, 1.5)), 1.5)

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            HoltForecaster(np.zeros(2), alpha_h=1.0)


class TestPowerGrid:
    def test_dimensions(self):
        assert GRID.n_bus == 14 and GRID.n_state == 27

    def test_base_case_flows(self):
        # published IEEE 14-bus solution: 232.4 MW out of bus 1, 156.9 MW on line 1-2
        y = power_measurement(GRID.initial_state(), GRID, ["P1", "P1-2"])
        assert y[0] == pytest.approx(2.3235, abs=5e-4)
        assert y[1] == pytest.approx(1.568, abs=5e-4)

    def test_injection_equals_sum_of_flows(self):
        u = GRID.initial_state()
        # bus 1 connects to buses 2 and 5 only and has no shunt
        p = power_measurement(u, GRID, ["P1", "P1-2", "P1-5", "Q1", "Q1-2", "Q1-5"])
        assert p[0] == pytest.approx(p[1] + p[2], abs=1e-12)
        assert p[3] == pytest.approx(p[4] + p[5], abs=1e-12)

    def test_selection_padding(self):
        for node in range(2):
            sel = node_selection(GRID, node)
            assert len(sel) == 96
            assert len(set(sel.quantities)) >= 95  # the base list may repeat a quantity
        base = GRID.selections["T1"]
        padded = padded_selection(GRID, base, 96)
        assert padded[: len(base)] == base
        assert padded[len(base)].token() == "Q5-1"

    def test_slack_angle_measured_as_zero(self):
        y = power_measurement(GRID.initial_state(), GRID, ["A1"])
        assert y[0] == 0.0

    @settings(max_examples=20)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_jacobian_matches_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        sel = node_selection(GRID, int(rng.integers(0, 2)))
        u = GRID.initial_state() + 0.05 * rng.standard_normal(GRID.n_state)
        J = power_jacobian(u, GRID, sel)
        h = 1e-6
        fd = np.empty_like(J)
        for k in range(u.size):
            e = np.zeros(u.size)
            e[k] = h
            fd[:, k] = (power_measurement(u + e, GRID, sel) - power_measurement(u - e, GRID, sel)) / (2 * h)
        np.testing.assert_allclose(J, fd, atol=1e-6)

    @pytest.mark.parametrize("tok", ["X1", "V15", "P1-3", "P0", "Q1-99"])
    def test_bad_tokens(self, tok):
        with pytest.raises(GridConfigError):
            parse_selection([tok], GRID)

    def test_bad_state_length(self):
        with pytest.raises(GridConfigError):
            power_measurement(np.ones(5), GRID, ["V1"])

    def test_missing_grid_file(self, tmp_path):
        with pytest.raises(GridConfigError):
            load_grid(tmp_path / "none.toml")

    def test_filter_model(self):
        pm = PowerModel(GRID, node_selection(GRID, 0))
        fm = pm.filter_model()
        assert fm.Q.shape == (27, 27) and fm.R.shape == (96, 96)
        np.testing.assert_allclose(fm.h(GRID.initial_state()), power_measurement(GRID.initial_state(), GRID,
                                                                                   pm.selection))


class TestEvents:
    def test_load_drop_applied_once(self):
        drop = LoadDrop(bus=8, fraction=0.15, step=3)
        x = GRID.initial_state()
        np.testing.assert_array_equal(apply_event(drop, x, 2), x)
        y = apply_event(drop, x, 3)
        assert y[7] == pytest.approx(0.85 * x[7])
        assert np.array_equal(np.delete(y, 7), np.delete(x, 7))

    def test_truth_with_drop(self):
        drop = LoadDrop(bus=8, fraction=0.15, step=5)
        a = power_truth(GRID, 10, np.random.default_rng(0), 0.0, [drop])
        assert a[4, 7] == pytest.approx(GRID.vm0[7])
        assert a[5, 7] == pytest.approx(0.85 * GRID.vm0[7])
        assert a[9, 7] == pytest.approx(0.85 * GRID.vm0[7])

    def test_from_config(self):
        assert event_from_config({"kind": "load_drop", "bus": 8, "fraction": 0.15, "step": 40}, 100) == \
            LoadDrop(8, 0.15, 40)
        pl = event_from_config({"kind": "packet_loss", "rate": 0.3, "start": 100}, 200)
        assert pl == PacketLoss(0.3, 100)
        assert pl.fault_model().active(150) and not pl.fault_model().active(99)

    @pytest.mark.parametrize("spec", [
        {"kind": "load_drop", "bus": 8, "fraction": 0.15, "step": 100},
        {"kind": "load_drop", "bus": 8, "fraction": 1.5, "step": 10},
        {"kind": "packet_loss", "rate": 0.0, "start": 10},
        {"kind": "packet_loss", "rate": 0.3, "start": 500},
        {"kind": "blackout"},
    ])
    def test_invalid(self, spec):
        with pytest.raises(ValueError):
            event_from_config(spec, 100)

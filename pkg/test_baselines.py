"""Tests for the raw, standard PEC and ZNE baselines and the variance gap."""
import math

import numpy as np
import pytest

from baselines import (
    ZneModel,
    ZnePoint,
    exact_pec_value,
    pec_estimate,
    pec_shot_records,
    raw_estimate,
    sampling_variance_delta,
    variance_gap,
    zne_estimate,
    zne_extrapolate,
)
from circuit_model import Circuit, Gate, LatticeSpec, NoiseSite, build_identity_chain, build_tfim_trotter
from fpec_estimator import ShotBudgetError, gamma_series
from pauli_core import PreconditionError, StochasticPauliChannel, depolarizing_channel, invert_channel
from sim_engine import DiagonalObservable, OracleLimitError, RngStream, exact_expectation


def x_flip(p):
    return StochasticPauliChannel.from_probs({"X": p})


def z_obs(n=1):
    return DiagonalObservable("pauli_z", n)


def random_pauli_channel(rng, n, eps=0.1):
    errors = rng.dirichlet(np.ones(4 ** n - 1)) * eps
    return StochasticPauliChannel(n, np.concatenate(([1.0 - eps], errors)))


class TestRawEstimate:
    def test_noiseless_initial_state(self):
        circuit = build_tfim_trotter(LatticeSpec(2, 2, steps=0), StochasticPauliChannel.identity(2))
        report = raw_estimate(circuit, 100, DiagonalObservable("sz_squared", 4), RngStream(0))
        assert report.mean == 1.0
        assert report.std_error == 0.0

    def test_x_flip(self):
        circuit = build_identity_chain(1, x_flip(0.2))
        report = raw_estimate(circuit, 5000, z_obs(), RngStream(4))
        assert abs(report.mean - 0.6) <= 4 * report.std_error

    def test_single_shot_has_no_error_bar(self):
        report = raw_estimate(build_identity_chain(1, x_flip(0.2)), 1, z_obs(), RngStream(0))
        assert report.std_error is None
        assert report.var_per_shot is None

    def test_empty_budget(self):
        with pytest.raises(PreconditionError):
            raw_estimate(build_identity_chain(1, x_flip(0.2)), 0, z_obs(), RngStream(0))


class TestStandardPec:
    def test_exact_branches_toy(self):
        circuit = build_identity_chain(1, x_flip(0.1))
        quasi = invert_channel(x_flip(0.1))
        assert exact_pec_value(circuit, quasi, z_obs()) == pytest.approx(1.0, abs=1e-12)
        assert exact_expectation(circuit, [], z_obs(), inverse=quasi) == pytest.approx(1.0, abs=1e-12)

    def test_sampled_toy(self):
        circuit = build_identity_chain(1, x_flip(0.1))
        report = pec_estimate(circuit, invert_channel(x_flip(0.1)), 4000, z_obs(), RngStream(6))
        assert report.overhead == pytest.approx(1.25)
        assert abs(report.mean - 1.0) <= 4 * report.std_error

    def test_noiseless_reduces_to_raw(self):
        circuit = build_tfim_trotter(LatticeSpec(2, 2, steps=1), StochasticPauliChannel.identity(2), 0.7)
        quasi = invert_channel(StochasticPauliChannel.identity(2))
        obs = DiagonalObservable("sz_squared", 4)
        rng = RngStream(12)
        assert pec_estimate(circuit, quasi, 300, obs, rng).mean == pytest.approx(raw_estimate(circuit, 300, obs, rng).mean)

    @pytest.mark.parametrize("n, l", [(1, 1), (1, 2), (1, 3), (1, 4), (2, 1), (2, 2), (2, 3)])
    def test_branch_enumeration_is_unbiased(self, n, l):
        rng = np.random.default_rng(10 * n + l)
        channel = random_pauli_channel(rng, n)
        gates, sites = [], []
        for _ in range(l):
            gates.append(Gate.ry(rng.uniform(-3, 3), 0))
            if n == 2:
                gates.append(Gate.rzz(rng.uniform(-3, 3), 0, 1))
            sites.append(NoiseSite(len(gates) - 1, channel))
        circuit = Circuit(n, tuple(gates), tuple(sites))
        obs = DiagonalObservable("z_prefix_average", n)
        ideal = exact_expectation(circuit.noiseless(), [], obs)
        assert exact_pec_value(circuit, invert_channel(channel), obs) == pytest.approx(ideal, abs=1e-10)

    def test_branch_limit(self):
        channel = depolarizing_channel(2, 0.01)
        circuit = build_tfim_trotter(LatticeSpec(2, 2, steps=1), channel)
        with pytest.raises(OracleLimitError):
            exact_pec_value(circuit, invert_channel(channel), DiagonalObservable("sz_squared", 4))

    def test_shot_records(self):
        circuit = build_identity_chain(5, x_flip(0.1))
        records = pec_shot_records(circuit, invert_channel(x_flip(0.1)), 2000, z_obs(), RngStream(2))
        assert len(records) == 2000
        for record in records:
            assert record.sign == (-1.0) ** record.ops_injected
            assert abs(record.value) == 1.0
        injected = np.mean([r.ops_injected for r in records])
        assert injected == pytest.approx(5 * 0.125 / 1.25, abs=0.08)


@pytest.mark.slow
@pytest.mark.parametrize("l", [50, 100])
def test_pec_overhead_scaling(l):
    channel = x_flip(0.01)
    quasi = invert_channel(channel)
    circuit = build_identity_chain(l, channel)
    rng = RngStream(99)
    pec = pec_estimate(circuit, quasi, 100_000, z_obs(), rng)
    raw = raw_estimate(circuit, 100_000, z_obs(), rng)
    ratio = pec.var_per_shot / raw.var_per_shot
    assert ratio == pytest.approx(quasi.gamma ** (2 * l), rel=0.15)


class TestZneExtrapolation:
    def test_flat_curve(self):
        fit = zne_extrapolate([ZnePoint(1.0, 0.7, None), ZnePoint(4.0, 0.7, None)])
        assert fit.model is ZneModel.EXPONENTIAL
        assert fit.extrapolated == pytest.approx(0.7)

    def test_pure_exponential(self):
        fit = zne_extrapolate([ZnePoint(1.0, 0.9, None), ZnePoint(4.0, 0.9 ** 4, None)])
        assert fit.extrapolated == pytest.approx(1.0, abs=1e-12)

    def test_multi_point_exponential(self):
        points = [ZnePoint(s, 0.8 * 0.9 ** s, None) for s in (1.0, 2.0, 3.0)]
        assert zne_extrapolate(points).extrapolated == pytest.approx(0.8, abs=1e-10)

    def test_sign_change_falls_back_to_linear(self):
        fit = zne_extrapolate([ZnePoint(1.0, 0.5, 0.01), ZnePoint(4.0, -0.1, 0.01)])
        assert fit.model is ZneModel.LINEAR_FALLBACK
        assert fit.extrapolated == pytest.approx(0.7)
        assert fit.std_error == pytest.approx(math.sqrt(17) / 3 * 0.01, rel=1e-6)

    def test_tiny_value_falls_back_to_linear(self):
        fit = zne_extrapolate([ZnePoint(1.0, 0.2, None), ZnePoint(3.0, 1e-8, None)])
        assert fit.model is ZneModel.LINEAR_FALLBACK

    def test_exponential_error_propagation(self):
        fit = zne_extrapolate([ZnePoint(1.0, 0.8, 0.01), ZnePoint(4.0, 0.5, 0.02)])
        # y1 (y1 / y2)^(1/3): d/dy1 = (4/3) x / y1, d/dy2 = -(1/3) x / y2
        x = fit.extrapolated
        expected = math.hypot(4 / 3 * x / 0.8 * 0.01, 1 / 3 * x / 0.5 * 0.02)
        assert fit.std_error == pytest.approx(expected, rel=1e-5)

    @pytest.mark.parametrize("scales", [[1.0], [4.0, 1.0], [0.5, 2.0]])
    def test_invalid_scales(self, scales):
        with pytest.raises(PreconditionError):
            zne_extrapolate([ZnePoint(s, 0.5, None) for s in scales])

    def test_noiseless_circuit(self):
        circuit = build_tfim_trotter(LatticeSpec(2, 2, steps=0), StochasticPauliChannel.identity(2))
        fit = zne_estimate(circuit, [1.0, 4.0], 200, DiagonalObservable("sz_squared", 4), RngStream(0))
        assert fit.extrapolated == pytest.approx(1.0)
        assert [p.shots for p in fit.points] == [100, 100]
        assert fit.to_report().shots == 200
        serialized = fit.to_report().to_dict()["zne"]
        assert serialized["model"] == "exponential"
        assert [p["scale"] for p in serialized["points"]] == [1.0, 4.0]
        assert [p["mean"] for p in serialized["points"]] == [1.0, 1.0]

    def test_budget_split(self):
        circuit = build_identity_chain(1, x_flip(0.05))
        with pytest.raises(ShotBudgetError):
            zne_estimate(circuit, [1.0, 2.0, 3.0], 2, z_obs(), RngStream(0))

    def test_single_qubit_decay_is_recovered(self):
        # <Z> = (1 - 2 lambda p)^l is close to a pure exponential for small p
        circuit = build_identity_chain(3, x_flip(0.01))
        fit = zne_estimate(circuit, [1.0, 3.0], 20000, z_obs(), RngStream(31))
        assert abs(fit.extrapolated - 1.0) <= 4 * fit.std_error + 1e-3


class TestVarianceGap:
    def test_example(self):
        assert variance_gap([0.8, 0.2], [1, -1], [1.0, 0.5]) == pytest.approx(0.36)

    def test_equal_signed_means(self):
        assert variance_gap([0.5, 0.3, 0.2], [1, -1, 1], [0.4, -0.4, 0.4]) == pytest.approx(0.0, abs=1e-15)

    def test_single_order(self):
        assert variance_gap([1.3], [1], [0.6]) == 0.0

    def test_never_negative(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            size = int(rng.integers(1, 8))
            weights = rng.uniform(0, 2, size)
            delta = variance_gap(weights, rng.choice([-1, 1], size), rng.uniform(-1, 1, size))
            assert delta >= -1e-12

    def test_matches_categorical_sampling(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            size = int(rng.integers(2, 6))
            weights = rng.uniform(0.1, 2, size)
            signs = rng.choice([-1, 1], size)
            means = rng.uniform(-1, 1, size)
            gamma = weights.sum()
            draws = rng.choice(size, size=1_000_000, p=weights / gamma)
            empirical = np.var(gamma * signs[draws] * means[draws])
            assert empirical == pytest.approx(variance_gap(weights, signs, means), rel=0.05)

    def test_sampling_variance_delta(self):
        series = gamma_series(0.1, 0.1, 2)
        var_est, var_sampling, delta = sampling_variance_delta(series, 2, [0.8, 0.7, 0.6], [0.1, 0.2, 0.3])
        assert var_est == pytest.approx(0.24192)
        assert delta == pytest.approx(variance_gap([1.21, 0.22, 0.01], [1, -1, 1], [0.8, 0.7, 0.6]))
        assert var_sampling == pytest.approx(var_est + delta)
        assert delta > 0

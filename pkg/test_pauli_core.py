"""Tests for Pauli words, channels, PTM diagonals and channel inversion."""
import json
import math

import numpy as np
import pytest

from pauli_core import (
    GeneratorForm,
    NonInvertibleChannelError,
    PauliString,
    PreconditionError,
    StochasticPauliChannel,
    apply_channel_to_density_matrix,
    depolarizing_channel,
    global_depolarizing_channel,
    invert_channel,
    load_channel_file,
    pauli_sign_matrix,
    probabilities_from_ptm,
    ptm_diagonal,
    sign_transform,
)


def x_flip(p):
    return StochasticPauliChannel.from_probs({"X": p})


def random_channel(rng, n, max_eps=0.3):
    eps = rng.uniform(0.0, max_eps)
    errors = rng.dirichlet(np.ones(4 ** n - 1)) * eps
    return StochasticPauliChannel(n, np.concatenate(([1.0 - eps], errors)))


def random_density_matrix(rng, n):
    a = rng.normal(size=(2 ** n, 2 ** n)) + 1j * rng.normal(size=(2 ** n, 2 ** n))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


def brute_force_ptm(channel):
    """Pauli transfer matrix from the Kraus form, by explicit change of basis."""
    n = channel.n
    kraus = [math.sqrt(p) * word.matrix() for word, p in channel.items()]
    words = [PauliString.from_index(i, n).matrix() for i in range(4 ** n)]
    ptm = np.zeros((4 ** n, 4 ** n))
    for i, pi in enumerate(words):
        for j, pj in enumerate(words):
            out = sum(k @ pj @ k.conj().T for k in kraus)
            ptm[i, j] = np.real(np.trace(pi @ out)) / 2 ** n
    return ptm


class TestPauliString:
    def test_index_ordering(self):
        assert PauliString("I").index == 0
        assert PauliString("Z").index == 3
        assert PauliString("XI").index == 4
        assert PauliString("IZ").index == 3
        assert PauliString.from_index(6, 2).ops == "XY"

    def test_identity(self):
        assert PauliString.identity(3).is_identity
        assert not PauliString("IXI").is_identity

    @pytest.mark.parametrize("a, b, commute", [
        ("X", "X", True),
        ("X", "Z", False),
        ("XX", "ZZ", True),
        ("XI", "ZI", False),
        ("XY", "YX", True),
    ])
    def test_commutation(self, a, b, commute):
        assert PauliString(a).commutes_with(PauliString(b)) is commute
        pa, pb = PauliString(a).matrix(), PauliString(b).matrix()
        assert np.allclose(pa @ pb, pb @ pa) is commute

    def test_invalid_word(self):
        with pytest.raises(PreconditionError):
            PauliString("XQ")
        with pytest.raises(PreconditionError):
            PauliString("X").commutes_with(PauliString("XX"))

    def test_sign_transform_matches_dense_matrix(self):
        rng = np.random.default_rng(3)
        for n in (1, 2, 3):
            vec = rng.normal(size=4 ** n)
            assert np.allclose(sign_transform(vec, n), pauli_sign_matrix(n) @ vec)


class TestChannels:
    def test_from_probs_infers_identity(self):
        channel = StochasticPauliChannel.from_probs({"XI": 0.01, "ZZ": 0.02})
        assert channel.n == 2
        assert channel.probs[0] == pytest.approx(0.97)
        assert channel.error_rate == pytest.approx(0.03)

    @pytest.mark.parametrize("probs", [
        {"X": 0.6, "Z": 0.6},
        {"X": -0.1},
        {"X": 0.1, "XX": 0.1},
        {"I": 0.5, "X": 0.1},
    ])
    def test_from_probs_rejects_invalid(self, probs):
        with pytest.raises(PreconditionError):
            StochasticPauliChannel.from_probs(probs)

    def test_depolarizing_examples(self):
        assert np.array_equal(depolarizing_channel(1, 0.0).probs, [1.0, 0.0, 0.0, 0.0])
        channel = depolarizing_channel(2, 0.15)
        assert channel.probs[0] == pytest.approx(0.85)
        np.testing.assert_allclose(channel.probs[1:], 0.01)
        np.testing.assert_allclose(ptm_diagonal(depolarizing_channel(1, 0.1)).entries[1:], 13 / 15)

    def test_scaled(self):
        channel = depolarizing_channel(2, 6e-4).scaled(4)
        assert channel.error_rate == pytest.approx(2.4e-3)
        with pytest.raises(PreconditionError):
            x_flip(0.3).scaled(4)
        assert x_flip(0.3).scaled(0).is_identity

    def test_sample_follows_probabilities(self):
        channel = StochasticPauliChannel.from_probs({"X": 0.25, "Z": 0.25})
        draws = channel.sample(np.random.default_rng(0).random(40000))
        counts = np.bincount(draws, minlength=4) / len(draws)
        np.testing.assert_allclose(counts, [0.5, 0.25, 0.0, 0.25], atol=0.01)


class TestPtmDiagonal:
    def test_identity_channel(self):
        np.testing.assert_array_equal(ptm_diagonal(StochasticPauliChannel.identity(2)).entries, 1.0)

    def test_x_flip(self):
        np.testing.assert_allclose(ptm_diagonal(x_flip(0.1)).entries, [1.0, 1.0, 0.8, 0.8])

    @pytest.mark.parametrize("n", [1, 2])
    def test_matches_kraus_superoperator(self, n):
        channel = random_channel(np.random.default_rng(n), n)
        ptm = brute_force_ptm(channel)
        np.testing.assert_allclose(ptm, np.diag(np.diagonal(ptm)), atol=1e-12)
        np.testing.assert_allclose(ptm_diagonal(channel).entries, np.diagonal(ptm), atol=1e-12)

    def test_probabilities_round_trip(self):
        channel = random_channel(np.random.default_rng(11), 2)
        np.testing.assert_allclose(probabilities_from_ptm(ptm_diagonal(channel)), channel.probs, atol=1e-14)


class TestInvertChannel:
    def test_identity(self):
        quasi = invert_channel(StochasticPauliChannel.identity(1))
        assert quasi.eps1 == 0.0
        assert quasi.eps2 == 0.0
        assert quasi.terms == []

    def test_x_flip(self):
        quasi = invert_channel(x_flip(0.1))
        assert quasi.eps1 == pytest.approx(0.125, abs=1e-12)
        assert quasi.eps2 == pytest.approx(0.125, abs=1e-12)
        [(c, word)] = quasi.terms
        assert str(word) == "X"
        assert c == pytest.approx(1.0)

    def test_depolarizing(self):
        quasi = invert_channel(depolarizing_channel(1, 0.1))
        assert quasi.eps1 == pytest.approx(3 / 26, abs=1e-12)
        assert quasi.eps2 == pytest.approx(3 / 26, abs=1e-12)
        assert sorted(str(word) for _, word in quasi.terms) == ["X", "Y", "Z"]
        np.testing.assert_allclose([c for c, _ in quasi.terms], 1 / 3)
        np.testing.assert_allclose(quasi.ptm_diagonal().entries, [1.0] + [15 / 13] * 3)

    def test_random_channels_invert_exactly(self):
        rng = np.random.default_rng(2024)
        for trial in range(1000):
            channel = random_channel(rng, 1 + trial % 2)
            quasi = invert_channel(channel)
            product = quasi.ptm_diagonal().entries * ptm_diagonal(channel).entries
            np.testing.assert_allclose(product, 1.0, atol=1e-10)
            coefficients = np.array([c for c, _ in quasi.terms])
            assert math.fsum(np.abs(coefficients)) == pytest.approx(1.0, abs=1e-12)
            assert (1 + quasi.eps1) - quasi.eps2 * math.fsum(coefficients) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("n", [1, 2])
    @pytest.mark.parametrize("eps", [1e-4, 1e-3, 0.01, 0.05])
    def test_small_error_expansion(self, n, eps):
        quasi = invert_channel(depolarizing_channel(n, eps))
        assert abs(quasi.eps1 - eps) <= 5 * eps ** 2
        assert abs(quasi.eps2 - eps) <= 5 * eps ** 2

    def test_singular_channel(self):
        with pytest.raises(NonInvertibleChannelError):
            invert_channel(x_flip(0.5))

    def test_negative_identity_weight(self):
        # lambda = -0.2 on Y and Z: invertible, but q_I = -2
        with pytest.raises(NonInvertibleChannelError, match="not positive"):
            invert_channel(x_flip(0.6))

    def test_inverse_undoes_channel_on_density_matrix(self):
        rng = np.random.default_rng(5)
        channel = x_flip(0.1)
        quasi = invert_channel(channel)
        rho = random_density_matrix(rng, 1)
        out = apply_channel_to_density_matrix(quasi, apply_channel_to_density_matrix(channel, rho))
        np.testing.assert_allclose(out, rho, atol=1e-12)

    def test_sample_branches_distribution(self):
        quasi = invert_channel(x_flip(0.1))
        paulis, signs, injected = quasi.sample_branches(np.random.default_rng(1).random(50000))
        assert np.mean(injected) == pytest.approx(quasi.eps2 / quasi.gamma, abs=0.005)
        assert np.all(signs[injected] == -1.0)
        assert np.all(paulis[injected] == PauliString("X").index)
        assert np.all(signs[~injected] == 1.0)


class TestReplacementForm:
    def test_depolarizing_replacement_inverse(self):
        quasi = invert_channel(depolarizing_channel(1, 0.1), GeneratorForm.REPLACEMENT)
        assert quasi.eps1 == pytest.approx(2 / 13)
        assert quasi.eps2 == pytest.approx(2 / 13)
        assert len(quasi.terms) == 4
        np.testing.assert_allclose(quasi.ptm_diagonal().entries, [1.0] + [15 / 13] * 3)

    def test_generator_is_full_replacement(self):
        quasi = invert_channel(global_depolarizing_channel(2, 0.05), GeneratorForm.REPLACEMENT)
        rho = random_density_matrix(np.random.default_rng(8), 2)
        mixed = (quasi.generator_superoperator @ rho.reshape(-1)).reshape(4, 4)
        np.testing.assert_allclose(mixed, np.eye(4) / 4, atol=1e-12)

    def test_needs_depolarizing_channel(self):
        with pytest.raises(PreconditionError):
            invert_channel(x_flip(0.1), GeneratorForm.REPLACEMENT)


class TestDensityMatrices:
    def test_identity_channel_keeps_state(self):
        rho = random_density_matrix(np.random.default_rng(2), 2)
        out = apply_channel_to_density_matrix(StochasticPauliChannel.identity(2), rho)
        np.testing.assert_allclose(out, rho)

    def test_half_x_flip(self):
        out = apply_channel_to_density_matrix(x_flip(0.5), np.diag([1.0, 0.0]))
        np.testing.assert_allclose(out, np.diag([0.5, 0.5]))

    def test_embedded_support(self):
        rho = np.zeros((4, 4))
        rho[0, 0] = 1.0
        out = apply_channel_to_density_matrix(StochasticPauliChannel.from_probs({"X": 1.0}), rho, support=(1,))
        assert out[1, 1] == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(PreconditionError):
            apply_channel_to_density_matrix(depolarizing_channel(2, 0.1), np.eye(2) / 2)


class TestChannelFiles:
    def test_load(self, tmp_path):
        path = tmp_path / "channel.json"
        path.write_text(json.dumps({"arity": 2, "probs": [{"pauli": "XI", "p": 0.01}, {"pauli": "XX", "p": 0.02}]}))
        channel = load_channel_file(path)
        assert channel.n == 2
        assert channel.probs[PauliString("XX").index] == pytest.approx(0.02)
        assert channel.probs[0] == pytest.approx(0.97)

    @pytest.mark.parametrize("content", ["not json", json.dumps({"probs": []}), json.dumps({"arity": 1, "probs": [{"pauli": "XX", "p": 0.1}]})])
    def test_invalid_files(self, tmp_path, content):
        path = tmp_path / "bad.json"
        path.write_text(content)
        with pytest.raises(PreconditionError):
            load_channel_file(path)

    def test_duplicate_entries_rejected(self, tmp_path):
        path = tmp_path / "dup.json"
        entries = [{"pauli": "XI", "p": 0.01}, {"pauli": "XI", "p": 0.02}]
        path.write_text(json.dumps({"arity": 2, "probs": entries}))
        with pytest.raises(PreconditionError, match="Duplicate"):
            load_channel_file(path)

"""Pauli words, stochastic Pauli channels and their quasi-probability inverses.

Pauli words are indexed in base 4 with I=0, X=1, Y=2, Z=3 and qubit 0 as the most
significant digit. Every dense vector in this module (probabilities, PTM diagonals,
signed weights) uses that ordering.
"""
import json
import math
import logging
from enum import Enum
from functools import cached_property, lru_cache
from pathlib import Path
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

logger = logging.getLogger(__name__)

PAULI_LABELS = "IXYZ"
PROB_TOLERANCE = 1e-12
SINGULAR_THRESHOLD = 1e-10
TERM_CUTOFF = 1e-15

_SINGLE_QUBIT = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}

# s(P, Q) for single qubits: +1 when P and Q commute
_SIGN_1Q = np.array(
    [[1, 1, 1, 1],
     [1, 1, -1, -1],
     [1, -1, 1, -1],
     [1, -1, -1, 1]],
    dtype=float,
)


class PreconditionError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class NonInvertibleChannelError(ValueError):
    """Raised when a channel has a (numerically) vanishing PTM entry."""


# ===== Pauli strings =====

@dataclass(frozen=True)
class PauliString:
    ops: str

    def __post_init__(self):
        if not self.ops or any(ch not in PAULI_LABELS for ch in self.ops):
            raise PreconditionError(f"Invalid Pauli word: {self.ops!r}")

    @property
    def n(self) -> int:
        return len(self.ops)

    @property
    def index(self) -> int:
        idx = 0
        for ch in self.ops:
            idx = 4 * idx + PAULI_LABELS.index(ch)
        return idx

    @property
    def is_identity(self) -> bool:
        return set(self.ops) == {"I"}

    @classmethod
    def from_index(cls, index: int, n: int) -> "PauliString":
        if not 0 <= index < 4 ** n:
            raise PreconditionError(f"Pauli index {index} out of range for {n} qubits")
        return cls(_index_to_word(index, n))

    @classmethod
    def identity(cls, n: int) -> "PauliString":
        return cls("I" * n)

    def commutes_with(self, other: "PauliString") -> bool:
        if other.n != self.n:
            raise PreconditionError(f"Arity mismatch: {self.n} vs {other.n}")
        clashes = sum(
            1 for a, b in zip(self.ops, other.ops)
            if a != "I" and b != "I" and a != b
        )
        return clashes % 2 == 0

    def matrix(self) -> np.ndarray:
        return pauli_matrix(self.ops)

    def __str__(self) -> str:
        return self.ops


def _index_to_word(index: int, n: int) -> str:
    digits = []
    for _ in range(n):
        digits.append(PAULI_LABELS[index % 4])
        index //= 4
    return "".join(reversed(digits))


@lru_cache(maxsize=4096)
def pauli_matrix(word: str) -> np.ndarray:
    """Dense 2^n x 2^n matrix of a Pauli word (read-only, cached)."""
    mat = np.array([[1.0 + 0j]])
    for ch in word:
        mat = np.kron(mat, _SINGLE_QUBIT[ch])
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=8)
def pauli_sign_matrix(n: int) -> np.ndarray:
    """Full 4^n x 4^n commutation sign matrix s(P, Q)."""
    mat = np.ones((1, 1))
    for _ in range(n):
        mat = np.kron(mat, _SIGN_1Q)
    mat.setflags(write=False)
    return mat


def sign_transform(vec: np.ndarray, n: int) -> np.ndarray:
    """Apply the sign matrix to a length-4^n vector without forming it."""
    out = np.asarray(vec, dtype=float).reshape((4,) * n)
    for axis in range(n):
        out = np.moveaxis(np.tensordot(_SIGN_1Q, out, axes=([1], [axis])), 0, axis)
    return out.reshape(-1)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def _normalized(vec: np.ndarray) -> np.ndarray:
    if np.any(vec < -PROB_TOLERANCE) or np.any(vec > 1 + PROB_TOLERANCE):
        raise PreconditionError("Probabilities must lie in [0, 1]")
    vec = np.clip(vec, 0.0, None)
    total = math.fsum(vec)
    if abs(total - 1.0) > PROB_TOLERANCE:
        raise PreconditionError(f"Probabilities sum to {total!r}, expected 1")
    return vec / total


# ===== Channels =====

@dataclass(frozen=True, eq=False)
class StochasticPauliChannel:
    """P -> p_P mixture of Pauli conjugations on n qubits, stored densely."""

    n: int
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise PreconditionError("Channel arity must be at least 1")
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (4 ** self.n,):
            raise PreconditionError(
                f"Arity mismatch: {probs.shape[0]} entries for {self.n} qubits"
            )
        object.__setattr__(self, "probs", _freeze(_normalized(probs)))

    @classmethod
    def from_probs(cls, probs: Mapping, n: int | None = None) -> "StochasticPauliChannel":
        """Build from {word: p}; a missing identity entry is inferred as 1 - sum."""
        words = [k if isinstance(k, PauliString) else PauliString(str(k)) for k in probs]
        arities = {w.n for w in words}
        if n is not None:
            arities.add(n)
        if len(arities) != 1:
            raise PreconditionError(f"Arity mismatch between Pauli words: {sorted(arities)}")
        arity = arities.pop()
        vec = np.zeros(4 ** arity)
        for word, p in zip(words, probs.values()):
            if vec[word.index] != 0.0:
                raise PreconditionError(f"Duplicate Pauli word {word}")
            vec[word.index] = float(p)
        if PauliString.identity(arity) not in words:
            rest = math.fsum(vec[1:])
            if rest > 1 + PROB_TOLERANCE:
                raise PreconditionError(f"Error probabilities sum to {rest!r} > 1")
            vec[0] = max(0.0, 1.0 - rest)
        return cls(arity, vec)

    @classmethod
    def identity(cls, n: int) -> "StochasticPauliChannel":
        vec = np.zeros(4 ** n)
        vec[0] = 1.0
        return cls(n, vec)

    @property
    def error_rate(self) -> float:
        return math.fsum(self.probs[1:])

    @property
    def is_identity(self) -> bool:
        return self.error_rate == 0.0

    def items(self) -> list[tuple[PauliString, float]]:
        return [
            (PauliString.from_index(int(i), self.n), float(self.probs[i]))
            for i in np.flatnonzero(self.probs)
        ]

    def weights(self) -> np.ndarray:
        return self.probs

    def scaled(self, factor: float) -> "StochasticPauliChannel":
        """Multiply every error probability by factor, identity absorbs the rest."""
        if factor < 0:
            raise PreconditionError(f"Noise scale factor must be >= 0, got {factor}")
        if factor == 1.0:
            return self
        mass = factor * self.error_rate
        if mass >= 1.0:
            raise PreconditionError(
                f"Scaled error mass {mass!r} >= 1 (factor {factor}, rate {self.error_rate!r})"
            )
        vec = self.probs * factor
        vec[0] = 1.0 - mass
        return StochasticPauliChannel(self.n, vec)

    @cached_property
    def _sampling_table(self) -> tuple[np.ndarray, np.ndarray]:
        support = np.flatnonzero(self.probs)
        cdf = np.cumsum(self.probs[support])
        return support, cdf

    def sample(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms in [0, 1) to Pauli indices distributed as the channel."""
        support, cdf = self._sampling_table
        pos = np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right")
        return support[np.minimum(pos, len(support) - 1)]

    @cached_property
    def superoperator(self) -> np.ndarray:
        return pauli_superoperator(self.probs, self.n)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StochasticPauliChannel):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.probs, other.probs)

    def __hash__(self) -> int:
        return hash((self.n, self.probs.tobytes()))


@dataclass(frozen=True, eq=False)
class PtmDiagonal:
    n: int
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", _freeze(self.entries))

    def __mul__(self, other: "PtmDiagonal") -> "PtmDiagonal":
        if other.n != self.n:
            raise PreconditionError("Arity mismatch in PTM product")
        return PtmDiagonal(self.n, self.entries * other.entries)

    def entry(self, word: str | PauliString) -> float:
        word = word if isinstance(word, PauliString) else PauliString(word)
        return float(self.entries[word.index])


class GeneratorForm(str, Enum):
    PAULI = "pauli"              # E mixes non-identity words only
    REPLACEMENT = "replacement"  # E replaces the state by the maximally mixed one


@dataclass(frozen=True, eq=False)
class QuasiInverseChannel:
    """Inverse channel written as (1 + eps1) I - eps2 E with E = sum_i c_i V_i . V_i."""

    n: int
    eps1: float
    eps2: float
    term_indices: np.ndarray = field(repr=False)
    coefficients: np.ndarray = field(repr=False)
    form: GeneratorForm = GeneratorForm.PAULI

    def __post_init__(self):
        object.__setattr__(self, "term_indices", np.array(self.term_indices, dtype=np.int64))
        self.term_indices.setflags(write=False)
        object.__setattr__(self, "coefficients", _freeze(self.coefficients))
        if 1.0 + self.eps1 <= 0.0:
            raise PreconditionError(f"Identity weight 1 + eps1 = {1 + self.eps1!r} is not positive")

    @property
    def terms(self) -> list[tuple[float, PauliString]]:
        return [
            (float(c), PauliString.from_index(int(i), self.n))
            for c, i in zip(self.coefficients, self.term_indices)
        ]

    @property
    def gamma(self) -> float:
        """Per-site quasi-probability norm 1 + eps1 + eps2."""
        return 1.0 + self.eps1 + self.eps2

    def generator_weights(self) -> np.ndarray:
        vec = np.zeros(4 ** self.n)
        np.add.at(vec, self.term_indices, self.coefficients)
        return vec

    def weights(self) -> np.ndarray:
        """Signed Pauli-conjugation weights of the full inverse channel."""
        vec = -self.eps2 * self.generator_weights()
        vec[0] += 1.0 + self.eps1
        return vec

    def ptm_diagonal(self) -> PtmDiagonal:
        return PtmDiagonal(self.n, sign_transform(self.weights(), self.n))

    @cached_property
    def superoperator(self) -> np.ndarray:
        return pauli_superoperator(self.weights(), self.n)

    @cached_property
    def generator_superoperator(self) -> np.ndarray:
        return pauli_superoperator(self.generator_weights(), self.n)

    @cached_property
    def _term_table(self) -> tuple[np.ndarray, np.ndarray]:
        cdf = np.cumsum(np.abs(self.coefficients))
        return cdf, np.sign(self.coefficients)

    def sample_terms(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Draw terms with probability |c_i|; returns (Pauli indices, signs of c_i)."""
        if len(self.coefficients) == 0:
            raise PreconditionError("Inverse channel has no generator terms to sample")
        cdf, signs = self._term_table
        pos = np.minimum(
            np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right"),
            len(cdf) - 1,
        )
        return self.term_indices[pos], signs[pos]

    @cached_property
    def _branch_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # branch 0 is "do nothing"; branch i+1 injects term i
        probs = np.concatenate(([1.0 + self.eps1], self.eps2 * np.abs(self.coefficients)))
        cdf = np.cumsum(probs / self.gamma)
        paulis = np.concatenate(([0], self.term_indices))
        signs = np.concatenate(([1.0], -np.sign(self.coefficients)))
        return cdf, paulis, signs

    def sample_branches(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-gate quasi-sampling: (Pauli index, sign, injected flag) per uniform."""
        cdf, paulis, signs = self._branch_table
        pos = np.minimum(np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right"), len(cdf) - 1)
        return paulis[pos], signs[pos], pos > 0

    def to_dict(self) -> dict:
        return {
            "arity": self.n,
            "form": self.form.value,
            "eps1": self.eps1,
            "eps2": self.eps2,
            "gamma": self.gamma,
            "terms": [{"pauli": str(p), "c": c} for c, p in self.terms],
        }


# ===== Channel algebra =====

def ptm_diagonal(channel: StochasticPauliChannel) -> PtmDiagonal:
    """lambda_Q = sum_P p_P s(P, Q)."""
    if channel.probs.shape != (4 ** channel.n,):
        raise PreconditionError("Arity mismatch between channel entries and n")
    entries = sign_transform(channel.probs, channel.n)
    entries[0] = 1.0
    return PtmDiagonal(channel.n, entries)


def probabilities_from_ptm(ptm: PtmDiagonal) -> np.ndarray:
    """Inverse of ptm_diagonal: p = S lambda / 4^n."""
    return sign_transform(ptm.entries, ptm.n) / 4 ** ptm.n


def is_depolarizing(channel: StochasticPauliChannel, rtol: float = 1e-12) -> bool:
    errors = channel.probs[1:]
    return bool(np.allclose(errors, errors[0], rtol=rtol, atol=PROB_TOLERANCE))


def invert_channel(
    channel: StochasticPauliChannel,
    form: GeneratorForm = GeneratorForm.PAULI,
) -> QuasiInverseChannel:
    """Write the exact inverse of channel as (1 + eps1) I - eps2 E."""
    form = GeneratorForm(form)
    n = channel.n
    if form is GeneratorForm.REPLACEMENT:
        return _replacement_inverse(channel)

    lam = ptm_diagonal(channel).entries
    worst = float(np.min(np.abs(lam)))
    if worst < SINGULAR_THRESHOLD:
        raise NonInvertibleChannelError(
            f"PTM entry {worst:.3e} below {SINGULAR_THRESHOLD:g}; channel is not invertible"
        )
    q = sign_transform(1.0 / lam, n) / 4 ** n
    rest = q[1:]
    keep = np.flatnonzero(np.abs(rest) > TERM_CUTOFF)
    eps2 = math.fsum(np.abs(rest[keep]))
    if eps2 == 0.0:
        return QuasiInverseChannel(n, 0.0, 0.0, np.zeros(0, dtype=np.int64), np.zeros(0), form)
    if q[0] <= 0.0:
        raise NonInvertibleChannelError(
            f"Identity weight 1 + eps1 = {float(q[0])!r} is not positive; "
            "the inverse has no (1 + eps1) I - eps2 E form"
        )
    eps1 = float(q[0]) - 1.0
    coefficients = -rest[keep] / eps2
    logger.debug(f"Inverted {n}-qubit channel: eps1={eps1:.3e} eps2={eps2:.3e} terms={len(keep)}")
    return QuasiInverseChannel(n, eps1, eps2, keep + 1, coefficients, form)


def _replacement_inverse(channel: StochasticPauliChannel) -> QuasiInverseChannel:
    n = channel.n
    if not is_depolarizing(channel):
        raise PreconditionError("Replacement generator form needs a depolarizing channel")
    dim2 = 4 ** n
    replace = channel.error_rate * dim2 / (dim2 - 1)
    if replace >= 1.0:
        raise NonInvertibleChannelError(f"Replacement probability {replace!r} >= 1")
    eps = replace / (1.0 - replace)
    indices = np.arange(dim2, dtype=np.int64)
    coefficients = np.full(dim2, 1.0 / dim2)
    if eps == 0.0:
        indices, coefficients = indices[:0], coefficients[:0]
    return QuasiInverseChannel(n, eps, eps, indices, coefficients, GeneratorForm.REPLACEMENT)


def depolarizing_channel(n: int, eps: float) -> StochasticPauliChannel:
    """Uniform n-qubit depolarizing channel with total error probability eps."""
    if not 0.0 <= eps < 1.0:
        raise PreconditionError(f"Depolarizing error probability must be in [0, 1), got {eps}")
    vec = np.full(4 ** n, eps / (4 ** n - 1))
    vec[0] = 1.0 - eps
    return StochasticPauliChannel(n, vec)


def global_depolarizing_channel(n: int, replace_prob: float) -> StochasticPauliChannel:
    """Replace the n-qubit state by the maximally mixed state with probability replace_prob."""
    if not 0.0 <= replace_prob < 1.0:
        raise PreconditionError(f"Replacement probability must be in [0, 1), got {replace_prob}")
    dim2 = 4 ** n
    return depolarizing_channel(n, replace_prob * (dim2 - 1) / dim2)


def pauli_superoperator(weights: np.ndarray, n: int) -> np.ndarray:
    """Row-major Liouville matrix of sum_P w_P P . P."""
    dim = 2 ** n
    superop = np.zeros((dim * dim, dim * dim), dtype=complex)
    for idx in np.flatnonzero(weights):
        mat = pauli_matrix(_index_to_word(int(idx), n))
        superop += weights[idx] * np.kron(mat, mat.conj())
    return superop


def apply_local_superoperator(
    rho: np.ndarray, superop: np.ndarray, support: tuple[int, ...], n: int
) -> np.ndarray:
    """Apply a Liouville matrix acting on `support` to an n-qubit density matrix."""
    k = len(support)
    tensor = np.asarray(rho).reshape((2,) * (2 * n))
    local = np.asarray(superop).reshape((2,) * (4 * k))
    axes = list(support) + [n + q for q in support]
    out = np.tensordot(local, tensor, axes=(list(range(2 * k, 4 * k)), axes))
    out = np.moveaxis(out, list(range(2 * k)), axes)
    return out.reshape(2 ** n, 2 ** n)


def apply_channel_to_density_matrix(
    channel: StochasticPauliChannel | QuasiInverseChannel,
    dm: np.ndarray,
    support: tuple[int, ...] | None = None,
) -> np.ndarray:
    """sum_P w_P P dm P with the channel embedded on `support` (whole register by default)."""
    dm = np.asarray(dm, dtype=complex)
    if dm.ndim != 2 or dm.shape[0] != dm.shape[1] or dm.shape[0] & (dm.shape[0] - 1):
        raise PreconditionError(f"Density matrix has invalid shape {dm.shape}")
    n = dm.shape[0].bit_length() - 1
    support = tuple(range(n)) if support is None else tuple(support)
    if len(support) != channel.n or any(q < 0 or q >= n for q in support):
        raise PreconditionError(
            f"Dimension mismatch: {channel.n}-qubit channel on support {support} of {n} qubits"
        )
    return apply_local_superoperator(dm, channel.superoperator, support, n)


# ===== Channel files =====

def load_channel_file(path: str | Path) -> StochasticPauliChannel:
    """Read {"arity": n, "probs": [{"pauli": "XI", "p": 0.01}, ...]}."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
        arity = int(data["arity"])
        probs = {}
        for entry in data["probs"]:
            word = entry["pauli"]
            if word in probs:
                raise PreconditionError(f"Duplicate Pauli word {word}")
            probs[word] = float(entry["p"])
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise PreconditionError(f"Cannot read channel file {path}: {e}") from e
    channel = StochasticPauliChannel.from_probs(probs, n=arity)
    logger.info(f"📂 Loaded {arity}-qubit channel from {path} (error rate {channel.error_rate:.3e})")
    return channel

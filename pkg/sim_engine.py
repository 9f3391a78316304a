"""Trajectory simulator, diagonal observables, seeded shot streams and exact oracles.

Trajectories are evolved in batches: the register is a tensor of shape
(2,)*n + (B,), one column per shot. Gates are shared by all columns, sampled
Pauli errors and injections are applied column-wise. Pauli words are applied up
to a global phase, which never changes Z-basis statistics.
"""
import math
import logging
from enum import Enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Sequence

import numpy as np

import config
from circuit_model import Circuit, Gate
from pauli_core import (
    PauliString,
    PreconditionError,
    QuasiInverseChannel,
    apply_local_superoperator,
    pauli_matrix,
)
from utils import split_range

logger = logging.getLogger(__name__)

SHOT_CHUNK = 256
BATCH_AMPLITUDES = 2 ** 22
NORM_TOLERANCE = 1e-10


class OracleLimitError(ValueError):
    """Raised when an exact computation is requested beyond the configured size limits."""


# ===== Observables =====

class ObservableKind(str, Enum):
    SZ_SQUARED = "sz_squared"
    Z_PREFIX_AVERAGE = "z_prefix_average"
    PAULI_Z = "pauli_z"


@dataclass(frozen=True)
class DiagonalObservable:
    kind: ObservableKind
    n: int
    qubits: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", ObservableKind(self.kind))
        if self.kind is ObservableKind.PAULI_Z:
            qubits = tuple(self.qubits) or tuple(range(self.n))
            if any(q < 0 or q >= self.n for q in qubits):
                raise PreconditionError(f"Z word on {qubits} out of range for {self.n} qubits")
            object.__setattr__(self, "qubits", qubits)

    @property
    def norm(self) -> float:
        return 1.0

    def values(self, outcomes: np.ndarray) -> np.ndarray:
        """Evaluate on integer outcomes (qubit 0 is the most significant bit)."""
        outcomes = np.asarray(outcomes, dtype=np.int64)
        shifts = np.arange(self.n - 1, -1, -1)
        spins = 1 - 2 * ((outcomes[:, None] >> shifts) & 1)
        if self.kind is ObservableKind.SZ_SQUARED:
            return (spins.sum(axis=1) / self.n) ** 2
        if self.kind is ObservableKind.Z_PREFIX_AVERAGE:
            return np.cumprod(spins, axis=1).sum(axis=1) / self.n
        return np.prod(spins[:, list(self.qubits)], axis=1).astype(float)

    def diagonal(self) -> np.ndarray:
        return self.values(np.arange(2 ** self.n))


def evaluate_observable(obs: DiagonalObservable, bitstring: str | Sequence[int]) -> float:
    bits = [int(b) for b in bitstring]
    if len(bits) != obs.n or any(b not in (0, 1) for b in bits):
        raise PreconditionError(f"Bitstring of length {len(bits)} for a {obs.n}-qubit observable")
    outcome = int("".join(map(str, bits)), 2)
    return float(obs.values(np.array([outcome]))[0])


# ===== Seeded streams =====

@dataclass(frozen=True)
class RngStream:
    """Counter-addressed random stream: (seed, key path, stream id) fixes every draw."""

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0 or any(k < 0 for k in self.path):
            raise PreconditionError("Seeds and stream keys must be non-negative integers")

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, 0, self.path + (self.stream_id,) + tuple(int(k) for k in keys))

    def shot(self, i: int) -> "RngStream":
        return RngStream(self.seed, int(i), self.path)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path + (self.stream_id,))
        return np.random.Generator(np.random.Philox(seq))


# ===== State vectors =====

def _apply_local(psi: np.ndarray, mat: np.ndarray, support: tuple[int, ...]) -> np.ndarray:
    k = len(support)
    local = np.asarray(mat).reshape((2,) * (2 * k))
    out = np.tensordot(local, psi, axes=(list(range(k, 2 * k)), list(support)))
    return np.moveaxis(out, list(range(k)), list(support))


def _apply_pauli_columns(psi: np.ndarray, paulis: np.ndarray, support: tuple[int, ...]) -> np.ndarray:
    """Apply a (possibly different) Pauli word on `support` to every column."""
    k = len(support)
    for j, q in enumerate(support):
        op = (paulis >> (2 * (k - 1 - j))) & 3
        z_mask = (op == 2) | (op == 3)
        if z_mask.any():
            psi[(slice(None),) * q + (1,)] *= np.where(z_mask, -1.0, 1.0)
        x_mask = (op == 1) | (op == 2)
        if x_mask.any():
            psi = np.where(x_mask, np.flip(psi, axis=q), psi)
    return psi


def product_state(angles: Sequence[float]) -> np.ndarray:
    """Amplitudes of the product of Ry(angle)|0> over qubits."""
    factors = [np.array([math.cos(a / 2), math.sin(a / 2)], dtype=complex) for a in angles]
    return reduce(np.kron, factors, np.ones(1, dtype=complex))


@dataclass(frozen=True, eq=False)
class StateVector:
    n: int
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amps.shape != (2 ** self.n,):
            raise PreconditionError(f"{amps.shape[0]} amplitudes for {self.n} qubits")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def zero(cls, n: int) -> "StateVector":
        return cls.product([0.0] * n)

    @classmethod
    def product(cls, angles: Sequence[float]) -> "StateVector":
        return cls(len(angles), product_state(angles))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    """Exact unitary action of one gate (Pauli words keep their phases here)."""
    if max(gate.qubits) >= state.n:
        raise PreconditionError(f"Gate on {gate.qubits} out of range for {state.n} qubits")
    psi = state.amplitudes.reshape((2,) * state.n)
    out = _apply_local(psi, gate.matrix(), gate.qubits).reshape(-1)
    result = StateVector(state.n, out)
    if abs(result.norm - 1.0) > NORM_TOLERANCE:
        raise FloatingPointError(f"Norm drifted to {result.norm!r} after {gate.kind}")
    return result


# ===== Batched trajectories =====

def simulate_batch(
    circuit: Circuit,
    noise_u: np.ndarray,
    u_measure: np.ndarray,
    injected: np.ndarray | None = None,
) -> np.ndarray:
    """Run B trajectories and return measured outcomes as integers.

    noise_u has shape (B, l): one uniform per shot and noise site. injected, if
    given, holds the local Pauli index injected at each site (0 = nothing).
    """
    n = circuit.n
    batch = len(u_measure)
    psi = np.repeat(product_state(circuit.initial_angles)[:, None], batch, axis=1)
    psi = psi.reshape((2,) * n + (batch,))
    channels = circuit.site_channels
    for g, gate in enumerate(circuit.gates):
        if gate.kind != "id":
            psi = _apply_local(psi, gate.matrix(), gate.qubits)
        for s in circuit.sites_by_gate.get(g, ()):
            support = circuit.noise_sites[s].support
            if not channels[s].is_identity:
                psi = _apply_pauli_columns(psi, channels[s].sample(noise_u[:, s]), support)
            if injected is not None and injected[:, s].any():
                psi = _apply_pauli_columns(psi, injected[:, s], support)
    probs = np.abs(psi.reshape(2 ** n, batch)) ** 2
    cdf = np.cumsum(probs, axis=0)
    if np.any(np.abs(cdf[-1] - 1.0) > NORM_TOLERANCE):
        raise FloatingPointError("Trajectory norm drifted beyond tolerance")
    outcomes = (cdf < u_measure[None, :] * cdf[-1]).sum(axis=0)
    return np.minimum(outcomes, 2 ** n - 1)


Injector = Callable[[np.random.Generator], tuple[np.ndarray, float]]


def sample_shot_values(
    circuit: Circuit,
    obs: DiagonalObservable,
    stream: RngStream,
    start: int,
    stop: int,
    injector: Injector | None = None,
) -> np.ndarray:
    """Signed observable values for shots [start, stop).

    Each shot draws, from its own stream and in this order: l noise uniforms,
    one measurement uniform, then whatever the injector needs.
    """
    batch = stop - start
    l = circuit.l
    noise_u = np.empty((batch, l))
    u_measure = np.empty(batch)
    injected = np.zeros((batch, l), dtype=np.int64) if injector is not None else None
    signs = np.ones(batch)
    for row, i in enumerate(range(start, stop)):
        gen = stream.shot(i).generator()
        noise_u[row] = gen.random(l)
        u_measure[row] = gen.random()
        if injector is not None:
            injected[row], signs[row] = injector(gen)
    outcomes = simulate_batch(circuit, noise_u, u_measure, injected)
    return signs * obs.values(outcomes)


def run_trajectory(
    circuit: Circuit,
    injections: Sequence[tuple[int, PauliString]],
    rng: RngStream,
) -> str:
    """One noisy shot with Paulis injected after the listed sites; returns the bitstring."""
    inject = np.zeros((1, circuit.l), dtype=np.int64)
    for site, word in injections:
        if not 0 <= site < circuit.l:
            raise PreconditionError(f"Invalid noise site {site} (l={circuit.l})")
        if word.n != len(circuit.noise_sites[site].support):
            raise PreconditionError(f"Injection {word} does not match site {site} arity")
        if inject[0, site]:
            raise PreconditionError(f"Site {site} listed twice")
        inject[0, site] = word.index
    gen = rng.generator()
    noise_u = gen.random((1, circuit.l))
    u_measure = np.array([gen.random()])
    outcome = int(simulate_batch(circuit, noise_u, u_measure, inject)[0])
    return format(outcome, f"0{circuit.n}b")


def shot_chunk(n: int) -> int:
    """Shots per trajectory batch on n qubits; a batch holds at most BATCH_AMPLITUDES amplitudes."""
    return max(1, min(SHOT_CHUNK, BATCH_AMPLITUDES >> n))


def run_shots(
    fn: Callable[[int, int], np.ndarray], m: int, threads: int = 1, chunk: int = SHOT_CHUNK
) -> np.ndarray:
    """Evaluate fn over fixed shot chunks; the result never depends on `threads` or `chunk`."""
    chunks = split_range(m, chunk)
    if threads <= 1 or len(chunks) == 1:
        parts = [fn(a, b) for a, b in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), chunks))
    return np.concatenate(parts) if parts else np.zeros(0)


# ===== Exact oracles =====

def _gate_superoperator(gate: Gate) -> np.ndarray:
    mat = gate.matrix()
    return np.kron(mat, mat.conj())


def _check_oracle_size(circuit: Circuit):
    if circuit.n > config.ORACLE_MAX_QUBITS:
        raise OracleLimitError(
            f"Exact evaluation limited to {config.ORACLE_MAX_QUBITS} qubits, circuit has {circuit.n}"
        )


def _initial_density(circuit: Circuit) -> np.ndarray:
    psi = product_state(circuit.initial_angles)
    return np.outer(psi, psi.conj())


def _injection_map(circuit: Circuit, injections) -> dict[int, list[np.ndarray]]:
    maps: dict[int, list[np.ndarray]] = {}
    for site, word in injections:
        if not 0 <= site < circuit.l:
            raise PreconditionError(f"Invalid noise site {site} (l={circuit.l})")
        mat = pauli_matrix(str(word))
        maps.setdefault(site, []).append(np.kron(mat, mat.conj()))
    return maps


def _evolve_density(
    circuit: Circuit,
    site_maps: dict[int, list[np.ndarray]],
    inverse: QuasiInverseChannel | None = None,
) -> np.ndarray:
    n = circuit.n
    rho = _initial_density(circuit)
    channels = circuit.site_channels
    for g, gate in enumerate(circuit.gates):
        rho = apply_local_superoperator(rho, _gate_superoperator(gate), gate.qubits, n)
        for s in circuit.sites_by_gate.get(g, ()):
            support = circuit.noise_sites[s].support
            if not channels[s].is_identity:
                rho = apply_local_superoperator(rho, channels[s].superoperator, support, n)
            if inverse is not None:
                rho = apply_local_superoperator(rho, inverse.superoperator, support, n)
            for superop in site_maps.get(s, ()):
                rho = apply_local_superoperator(rho, superop, support, n)
    return rho


def _evolve_pure(circuit: Circuit, injections) -> np.ndarray:
    psi = product_state(circuit.initial_angles).reshape((2,) * circuit.n)
    by_site: dict[int, list[PauliString]] = {}
    for site, word in injections:
        by_site.setdefault(site, []).append(word)
    for g, gate in enumerate(circuit.gates):
        psi = _apply_local(psi, gate.matrix(), gate.qubits)
        for s in circuit.sites_by_gate.get(g, ()):
            for word in by_site.get(s, ()):
                psi = _apply_local(psi, word.matrix(), circuit.noise_sites[s].support)
    return np.abs(psi.reshape(-1)) ** 2


def circuit_superoperator(
    circuit: Circuit,
    site_maps: dict[int, list[np.ndarray]] | None = None,
) -> np.ndarray:
    """Full 4^n x 4^n row-major Liouville matrix of the noisy circuit."""
    n = circuit.n
    if n > config.SUPEROP_MAX_QUBITS or circuit.l > config.SUPEROP_MAX_SITES:
        raise OracleLimitError(
            f"Superoperator mode limited to {config.SUPEROP_MAX_QUBITS} qubits and "
            f"{config.SUPEROP_MAX_SITES} sites (got n={n}, l={circuit.l})"
        )
    dim = 2 ** n
    site_maps = site_maps or {}
    columns = []
    for idx in range(dim * dim):
        basis = np.zeros(dim * dim, dtype=complex)
        basis[idx] = 1.0
        rho = basis.reshape(dim, dim)
        channels = circuit.site_channels
        for g, gate in enumerate(circuit.gates):
            rho = apply_local_superoperator(rho, _gate_superoperator(gate), gate.qubits, n)
            for s in circuit.sites_by_gate.get(g, ()):
                support = circuit.noise_sites[s].support
                rho = apply_local_superoperator(rho, channels[s].superoperator, support, n)
                for superop in site_maps.get(s, ()):
                    rho = apply_local_superoperator(rho, superop, support, n)
        columns.append(rho.reshape(-1))
    return np.stack(columns, axis=1)


def exact_expectation(
    circuit: Circuit,
    injections: Sequence[tuple[int, PauliString]],
    obs: DiagonalObservable,
    mode: str = "auto",
    inverse: QuasiInverseChannel | None = None,
) -> float:
    """Tr[O C(rho)] with every channel applied exactly.

    mode is "auto", "density" or "superoperator". When `inverse` is given it is
    applied after every noise site, which yields the exact standard-PEC value.
    """
    if obs.n != circuit.n:
        raise PreconditionError(f"{obs.n}-qubit observable on a {circuit.n}-qubit circuit")
    _check_oracle_size(circuit)
    diag = obs.diagonal()
    if mode == "superoperator":
        if inverse is not None:
            raise PreconditionError("Superoperator mode does not take an inverse channel")
        superop = circuit_superoperator(circuit, _injection_map(circuit, injections))
        rho = (superop @ _initial_density(circuit).reshape(-1)).reshape(2 ** circuit.n, -1)
        return float(np.real(np.diagonal(rho)) @ diag)
    if mode not in ("auto", "density"):
        raise PreconditionError(f"Unknown oracle mode {mode!r}")
    if mode == "auto" and inverse is None and circuit.is_noiseless:
        return float(_evolve_pure(circuit, injections) @ diag)
    rho = _evolve_density(circuit, _injection_map(circuit, injections), inverse)
    return float(np.real(np.diagonal(rho)) @ diag)


def exact_order_expectations(
    circuit: Circuit,
    quasi: QuasiInverseChannel,
    K: int,
    obs: DiagonalObservable,
) -> np.ndarray:
    """Exact <O>_k for k = 0..K: the mean over all k-subsets of sites carrying E.

    Tracks one unnormalized density matrix per order; at each site the order-j
    state becomes Lambda(rho_j) + E(Lambda(rho_{j-1})).
    """
    _check_oracle_size(circuit)
    l = circuit.l
    if not 0 <= K <= l:
        raise PreconditionError(f"Order {K} outside 0..{l}")
    n = circuit.n
    rhos = [_initial_density(circuit)] + [None] * K
    channels = circuit.site_channels
    generator = quasi.generator_superoperator
    for g, gate in enumerate(circuit.gates):
        gate_superop = _gate_superoperator(gate)
        rhos = [None if r is None else apply_local_superoperator(r, gate_superop, gate.qubits, n) for r in rhos]
        for s in circuit.sites_by_gate.get(g, ()):
            support = circuit.noise_sites[s].support
            if len(support) != quasi.n:
                raise PreconditionError(f"{quasi.n}-qubit inverse at site {s} with support {support}")
            if not channels[s].is_identity:
                rhos = [
                    None if r is None else apply_local_superoperator(r, channels[s].superoperator, support, n)
                    for r in rhos
                ]
            for j in range(K, 0, -1):
                if rhos[j - 1] is None:
                    continue
                lifted = apply_local_superoperator(rhos[j - 1], generator, support, n)
                rhos[j] = lifted if rhos[j] is None else rhos[j] + lifted
    diag = obs.diagonal()
    values = np.zeros(K + 1)
    for k, rho in enumerate(rhos):
        if rho is not None:
            values[k] = float(np.real(np.diagonal(rho)) @ diag) / math.comb(l, k)
    return values

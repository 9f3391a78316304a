"""Circuit representation with noise sites, TFIM Trotter builder and noise scaling."""
import math
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache

import numpy as np

from pauli_core import (
    PreconditionError,
    StochasticPauliChannel,
    depolarizing_channel,
    pauli_matrix,
)

logger = logging.getLogger(__name__)

GATE_KINDS = ("rx", "ry", "rzz", "id", "pauli")


@lru_cache(maxsize=1024)
def _rotation(kind: str, theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    if kind == "rx":
        mat = np.array([[c, -1j * s], [-1j * s, c]])
    elif kind == "ry":
        mat = np.array([[c, -s], [s, c]], dtype=complex)
    else:
        # e^{-i theta Z Z}
        phase = np.exp(-1j * theta)
        mat = np.diag([phase, phase.conjugate(), phase.conjugate(), phase])
    mat.setflags(write=False)
    return mat


@dataclass(frozen=True)
class Gate:
    kind: str
    qubits: tuple[int, ...]
    theta: float = 0.0
    word: str = ""

    def __post_init__(self):
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        if self.kind not in GATE_KINDS:
            raise PreconditionError(f"Unknown gate kind {self.kind!r}")
        arity = {"rx": 1, "ry": 1, "rzz": 2}.get(self.kind)
        if arity is not None and len(self.qubits) != arity:
            raise PreconditionError(f"{self.kind} acts on {arity} qubit(s), got {self.qubits}")
        if not self.qubits or len(set(self.qubits)) != len(self.qubits) or min(self.qubits) < 0:
            raise PreconditionError(f"Invalid gate support {self.qubits}")
        if self.kind == "pauli" and len(self.word) != len(self.qubits):
            raise PreconditionError(f"Pauli word {self.word!r} does not match support {self.qubits}")

    @classmethod
    def rx(cls, theta: float, q: int) -> "Gate":
        return cls("rx", (q,), theta)

    @classmethod
    def ry(cls, theta: float, q: int) -> "Gate":
        return cls("ry", (q,), theta)

    @classmethod
    def rzz(cls, theta: float, q1: int, q2: int) -> "Gate":
        return cls("rzz", (q1, q2), theta)

    @classmethod
    def pauli(cls, word: str, qubits: tuple[int, ...]) -> "Gate":
        return cls("pauli", tuple(qubits), word=word)

    def matrix(self) -> np.ndarray:
        if self.kind == "id":
            return np.eye(2 ** len(self.qubits), dtype=complex)
        if self.kind == "pauli":
            return pauli_matrix(self.word)
        return _rotation(self.kind, float(self.theta))


@dataclass(frozen=True)
class NoiseSite:
    """Channel applied right after gate `gate_index`, on `support` (gate qubits by default)."""

    gate_index: int
    channel: StochasticPauliChannel
    support: tuple[int, ...] = ()


@dataclass(frozen=True)
class Circuit:
    n: int
    gates: tuple[Gate, ...]
    noise_sites: tuple[NoiseSite, ...] = ()
    initial_angles: tuple[float, ...] = ()
    noise_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        angles = tuple(self.initial_angles) or (0.0,) * self.n
        if len(angles) != self.n:
            raise PreconditionError(f"{len(angles)} initial angles for {self.n} qubits")
        object.__setattr__(self, "initial_angles", tuple(float(a) for a in angles))
        for gate in self.gates:
            if max(gate.qubits) >= self.n or min(gate.qubits) < 0:
                raise PreconditionError(f"Gate {gate.kind} on {gate.qubits} out of range for {self.n} qubits")
        sites = []
        last = -1
        for site in self.noise_sites:
            if not 0 <= site.gate_index < len(self.gates):
                raise PreconditionError(f"Noise site references missing gate {site.gate_index}")
            if site.gate_index < last:
                raise PreconditionError("Noise sites must follow execution order")
            last = site.gate_index
            support = tuple(site.support) or self.gates[site.gate_index].qubits
            if len(support) != site.channel.n:
                raise PreconditionError(
                    f"Arity mismatch: {site.channel.n}-qubit channel on support {support}"
                )
            if max(support) >= self.n or min(support) < 0:
                raise PreconditionError(f"Noise support {support} out of range")
            sites.append(replace(site, support=support))
        object.__setattr__(self, "noise_sites", tuple(sites))

    @property
    def l(self) -> int:
        return len(self.noise_sites)

    @cached_property
    def site_channels(self) -> tuple[StochasticPauliChannel, ...]:
        """Channels with the circuit's noise scale applied."""
        scaled = {}
        out = []
        for site in self.noise_sites:
            key = id(site.channel)
            if key not in scaled:
                scaled[key] = site.channel.scaled(self.noise_scale)
            out.append(scaled[key])
        return tuple(out)

    @cached_property
    def sites_by_gate(self) -> dict[int, list[int]]:
        grouped: dict[int, list[int]] = {}
        for i, site in enumerate(self.noise_sites):
            grouped.setdefault(site.gate_index, []).append(i)
        return grouped

    @property
    def is_homogeneous(self) -> bool:
        channels = self.site_channels
        return all(ch == channels[0] for ch in channels[1:])

    @property
    def is_noiseless(self) -> bool:
        return all(ch.is_identity for ch in self.site_channels)

    def noiseless(self) -> "Circuit":
        return replace(self, noise_scale=0.0)


# ===== TFIM lattice =====

@dataclass(frozen=True)
class LatticeSpec:
    rows: int
    cols: int
    J: float = 1.0
    h: float = 2.0
    tau: float = 0.2
    steps: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise PreconditionError(f"Lattice dimensions must be >= 1, got {self.rows}x{self.cols}")
        if self.steps < 0:
            raise PreconditionError(f"Trotter steps must be >= 0, got {self.steps}")

    @property
    def n(self) -> int:
        return self.rows * self.cols


def torus_edges(rows: int, cols: int) -> list[tuple[int, int]]:
    """Nearest-neighbour pairs on a rows x cols torus, horizontal edges first."""
    edges = []
    seen = set()

    def add(a: int, b: int):
        key = frozenset((a, b))
        if a != b and key not in seen:
            seen.add(key)
            edges.append((a, b))

    for r in range(rows):
        for c in range(cols):
            add(r * cols + c, r * cols + (c + 1) % cols)
    for r in range(rows):
        for c in range(cols):
            add(r * cols + c, ((r + 1) % rows) * cols + c)
    return edges


def build_tfim_trotter(
    spec: LatticeSpec,
    channel: StochasticPauliChannel,
    initial_angle: float = 0.0,
) -> Circuit:
    """Second-order Trotter circuit, one noise site after every Rzz gate."""
    if channel.n != 2:
        raise PreconditionError(f"TFIM noise must be a 2-qubit channel, got arity {channel.n}")
    n = spec.n
    edges = torus_edges(spec.rows, spec.cols)
    gates: list[Gate] = []
    sites: list[NoiseSite] = []
    half_x = spec.h * spec.tau
    for _ in range(spec.steps):
        gates.extend(Gate.rx(half_x, q) for q in range(n))
        for a, b in edges:
            gates.append(Gate.rzz(spec.J * spec.tau, a, b))
            sites.append(NoiseSite(len(gates) - 1, channel))
        gates.extend(Gate.rx(half_x, q) for q in range(n))
    logger.debug(f"Built {spec.rows}x{spec.cols} TFIM: {spec.steps} steps, {len(gates)} gates, l={len(sites)}")
    return Circuit(n, tuple(gates), tuple(sites), (initial_angle,) * n)


def build_identity_chain(
    length: int,
    channel: StochasticPauliChannel,
    initial_angle: float = 0.0,
) -> Circuit:
    """`length` noisy identity gates on a register the size of the channel."""
    n = channel.n
    support = tuple(range(n))
    gates = tuple(Gate("id", support) for _ in range(length))
    sites = tuple(NoiseSite(i, channel) for i in range(length))
    return Circuit(n, gates, sites, (initial_angle,) * n)


def scale_noise(circuit: Circuit, factor: float) -> Circuit:
    """Multiply every error probability by factor; factors compose multiplicatively."""
    if factor < 1.0:
        raise PreconditionError(f"Noise scale factor must be >= 1, got {factor}")
    if factor == 1.0:
        return circuit
    new_scale = circuit.noise_scale * factor
    for site in circuit.noise_sites:
        mass = site.channel.error_rate * new_scale
        if mass >= 1.0:
            raise PreconditionError(f"Scaled error mass {mass!r} >= 1 at gate {site.gate_index}")
    return replace(circuit, noise_scale=new_scale)


def infidelity_to_depolarizing(avg_infidelity: float, arity: int) -> StochasticPauliChannel:
    """Depolarizing channel whose average gate infidelity is avg_infidelity."""
    if avg_infidelity < 0:
        raise PreconditionError(f"Average infidelity must be >= 0, got {avg_infidelity}")
    d = 2 ** arity
    eps = avg_infidelity * (d + 1) / d
    return depolarizing_channel(arity, eps)


def average_infidelity(channel: StochasticPauliChannel) -> float:
    """1 - F_avg from the process fidelity p_I."""
    d = 2 ** channel.n
    return 1.0 - (d * float(channel.probs[0]) + 1.0) / (d + 1.0)

"""Binomial-expansion error cancellation.

The ideal circuit is a signed combination of noisy circuit classes C_k that
carry the inverse generator E at k of the l noise sites:

    C_ideal = sum_k gamma_k C_k,  gamma_k = C(l, k) (1 + eps1)^(l - k) (-eps2)^k

Orders are truncated (by shot resolvability or a bias tolerance), shots are
allocated proportionally to |gamma_k|, and every <O>_k is estimated by sampling
k distinct sites uniformly and one generator term per site.
"""
import math
import logging
import itertools
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import logsumexp

from circuit_model import Circuit
from pauli_core import PreconditionError, QuasiInverseChannel
from sim_engine import (
    DiagonalObservable,
    RngStream,
    circuit_superoperator,
    exact_order_expectations,
    run_shots,
    sample_shot_values,
    shot_chunk,
)
from utils import mean_and_variance

logger = logging.getLogger(__name__)

GAMMA_CUTOFF = 1e-30


class ShotBudgetError(ValueError):
    """Raised when a shot budget cannot resolve the requested orders."""


# ===== Coefficients =====

@dataclass(frozen=True, eq=False)
class GammaSeries:
    l: int
    eps1: float
    eps2: float
    log_abs: np.ndarray = field(repr=False)  # log|gamma_k| for every k = 0..l
    k_max: int = 0

    @property
    def gammas(self) -> np.ndarray:
        k = np.arange(self.k_max + 1)
        return np.where(k % 2 == 0, 1.0, -1.0) * np.exp(self.log_abs[: self.k_max + 1])

    @property
    def abs_gammas(self) -> np.ndarray:
        return np.exp(self.log_abs[: self.k_max + 1])

    @property
    def log_total_norm(self) -> float:
        return self.l * math.log1p(self.eps1 + self.eps2)

    @property
    def total_norm(self) -> float:
        """(1 + eps1 + eps2)^l, the norm of the untruncated expansion."""
        return math.exp(self.log_total_norm)

    def coefficient(self, k: int) -> float:
        """gamma_k for any 0 <= k <= l, including orders beyond k_max."""
        if not 0 <= k <= self.l:
            raise PreconditionError(f"Order {k} outside 0..{self.l}")
        return (-1.0) ** k * math.exp(self.log_abs[k])

    def log_head(self, K: int) -> float:
        return float(logsumexp(self.log_abs[: K + 1]))

    def head_norm(self, K: int) -> float:
        """sum_{k <= K} |gamma_k|."""
        return math.exp(self.log_head(K))

    def tail_norm(self, K: int) -> float:
        """sum_{k > K} |gamma_k| over all orders up to l."""
        tail = self.log_abs[K + 1:]
        if len(tail) == 0 or np.all(np.isneginf(tail)):
            return 0.0
        return math.exp(float(logsumexp(tail)))


def gamma_series(eps1: float, eps2: float, l: int) -> GammaSeries:
    if 1.0 + eps1 <= 0.0:
        raise PreconditionError(f"1 + eps1 must be positive, got {1 + eps1!r}")
    if eps2 < 0 or l < 0:
        raise PreconditionError(f"Need eps2 >= 0 and l >= 0 (got {eps2}, {l})")
    j = np.arange(l)
    log_binom = np.concatenate(([0.0], np.cumsum(np.log(l - j) - np.log(j + 1))))
    k = np.arange(l + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_eps2 = math.log(eps2) if eps2 > 0 else -np.inf
        log_abs = log_binom + (l - k) * math.log1p(eps1) + np.where(k > 0, k * log_eps2, 0.0)
    kept = np.flatnonzero(log_abs - log_abs[0] > math.log(GAMMA_CUTOFF))
    log_abs.setflags(write=False)
    return GammaSeries(l, eps1, eps2, log_abs, int(kept[-1]))


# ===== Truncation and allocation =====

@dataclass(frozen=True)
class ShotLimited:
    """Keep every order that receives at least one shot out of M."""


@dataclass(frozen=True)
class BiasTolerance:
    delta: float


@dataclass(frozen=True)
class FixedOrder:
    order: int


TruncationPolicy = Union[ShotLimited, BiasTolerance, FixedOrder]


@dataclass(frozen=True)
class ShotPlan:
    K: int
    shots: tuple[int, ...]
    M: int
    policy: TruncationPolicy


def truncate_by_shots(series: GammaSeries, M: int) -> int:
    """Largest K such that every order k <= K gets M |gamma_k| / gamma >= 1 shots."""
    if M < 1:
        raise PreconditionError(f"Shot budget must be >= 1, got {M}")
    log_share = math.log(M) + series.log_abs - series.log_total_norm
    if log_share[0] < 0:
        raise ShotBudgetError(
            f"{M} shots cannot resolve order 0 (needs {series.total_norm / math.exp(series.log_abs[0]):.3g})"
        )
    failing = np.flatnonzero(log_share < 0)
    return series.l if len(failing) == 0 else int(failing[0]) - 1


def truncate_by_bias(series: GammaSeries, delta: float, obs_norm: float) -> int:
    """Smallest K with obs_norm * sum_{k > K} |gamma_k| <= delta."""
    if delta <= 0:
        raise PreconditionError(f"Bias tolerance must be positive, got {delta}")
    log_tails = np.logaddexp.accumulate(series.log_abs[::-1])[::-1]
    for K in range(series.l):
        if obs_norm * math.exp(log_tails[K + 1]) <= delta:
            return K
    return series.l


def truncate(series: GammaSeries, policy: TruncationPolicy, M: int, obs_norm: float) -> int:
    if isinstance(policy, ShotLimited):
        return truncate_by_shots(series, M)
    if isinstance(policy, BiasTolerance):
        return truncate_by_bias(series, policy.delta, obs_norm)
    if not 0 <= policy.order <= series.l:
        raise PreconditionError(f"Fixed order {policy.order} outside 0..{series.l}")
    return policy.order


def allocate_shots(
    series: GammaSeries, K: int, M: int, policy: TruncationPolicy = ShotLimited()
) -> ShotPlan:
    """m_k proportional to |gamma_k| over k <= K, largest remainder, floor of one."""
    if M < K + 1:
        raise ShotBudgetError(f"{M} shots cannot cover {K + 1} orders")
    log_head = series.log_head(K)
    raw = M * np.exp(series.log_abs[: K + 1] - log_head)
    shots = np.maximum(np.floor(raw).astype(np.int64), 1)
    remainders = raw - np.floor(raw)
    deficit = M - int(shots.sum())
    if deficit > 0:
        order = sorted(range(K + 1), key=lambda k: (-remainders[k], k))
        for k in order[:deficit]:
            shots[k] += 1
    while deficit < 0:
        k = int(np.argmax(shots))
        shots[k] -= 1
        deficit += 1
    return ShotPlan(K, tuple(int(m) for m in shots), M, policy)


# ===== Estimation =====

@dataclass(frozen=True)
class OrderEstimate:
    k: int
    gamma: float
    shots: int
    mean: float
    var: float

    def to_dict(self) -> dict:
        return {"k": self.k, "gamma": self.gamma, "shots": self.shots, "mean": self.mean, "var": self.var}


@dataclass(frozen=True)
class EstimatorReport:
    method: str
    mean: float
    std_error: float | None
    shots: int
    K: int | None = None
    bias_bound: float | None = None
    per_k: tuple[OrderEstimate, ...] = ()
    var_per_shot: float | None = None
    overhead: float = 1.0
    zne: dict | None = None  # per-scale points and model of a ZNE fit

    def to_dict(self) -> dict:
        data = {
            "method": self.method,
            "mean": self.mean,
            "std_error": self.std_error,
            "K": self.K,
            "bias_bound": self.bias_bound,
            "per_k": [est.to_dict() for est in self.per_k],
            "shots": self.shots,
            "var_per_shot": self.var_per_shot,
            "overhead": self.overhead,
        }
        if self.zne is not None:
            data["zne"] = self.zne
        return data


def sample_locations(gen: np.random.Generator, l: int, k: int) -> list[int]:
    """k distinct sites out of l by a sparse partial Fisher-Yates shuffle."""
    swapped: dict[int, int] = {}
    picks = []
    for j, u in enumerate(gen.random(k)):
        r = j + min(int(u * (l - j)), l - j - 1)
        picks.append(swapped.get(r, r))
        swapped[r] = swapped.get(j, j)
    return picks


def order_injector(quasi: QuasiInverseChannel, l: int, k: int):
    """Injector drawing k sites and one generator term per site."""
    def inject(gen: np.random.Generator) -> tuple[np.ndarray, float]:
        row = np.zeros(l, dtype=np.int64)
        if k == 0:
            return row, 1.0
        sites = sample_locations(gen, l, k)
        paulis, signs = quasi.sample_terms(gen.random(k))
        row[sites] = paulis
        return row, float(np.prod(signs))
    return inject


def _check_arity(circuit: Circuit, quasi: QuasiInverseChannel):
    for s, site in enumerate(circuit.noise_sites):
        if len(site.support) != quasi.n:
            raise PreconditionError(f"{quasi.n}-qubit inverse at site {s} with support {site.support}")


def estimate_order_k(
    circuit: Circuit,
    quasi: QuasiInverseChannel,
    k: int,
    m_k: int,
    obs: DiagonalObservable,
    rng: RngStream,
    threads: int = 1,
) -> tuple[float, float]:
    """Sampled (mean_k, var_k) of the signed order-k circuit class."""
    if not 0 <= k <= circuit.l:
        raise PreconditionError(f"Order {k} exceeds the {circuit.l} noise sites")
    if m_k < 1:
        raise PreconditionError(f"Need at least one shot for order {k}")
    _check_arity(circuit, quasi)
    inject = order_injector(quasi, circuit.l, k) if k > 0 else None
    values = run_shots(
        lambda a, b: sample_shot_values(circuit, obs, rng, a, b, inject), m_k, threads, shot_chunk(circuit.n)
    )
    mean, var = mean_and_variance(values)
    return mean, 0.0 if var is None else var


def estimator_variance(series: GammaSeries, K: int, var_list) -> float:
    """(sum_{k<=K} |gamma_k|) * sum_{k<=K} |gamma_k| var_k, per shot."""
    if len(var_list) != K + 1:
        raise PreconditionError(f"Expected {K + 1} per-order variances, got {len(var_list)}")
    abs_gammas = np.exp(series.log_abs[: K + 1])
    return series.head_norm(K) * math.fsum(abs_gammas * np.asarray(var_list, dtype=float))


def fpec_estimate(
    circuit: Circuit,
    quasi: QuasiInverseChannel,
    M: int,
    policy: TruncationPolicy,
    obs: DiagonalObservable,
    rng: RngStream,
    threads: int = 1,
) -> EstimatorReport:
    """Truncate, allocate and combine the per-order estimates."""
    if not circuit.is_homogeneous:
        raise PreconditionError("Binomial expansion needs the same channel at every noise site")
    _check_arity(circuit, quasi)
    series = gamma_series(quasi.eps1, quasi.eps2, circuit.l)
    K = truncate(series, policy, M, obs.norm)
    plan = allocate_shots(series, K, M, policy)
    logger.debug(f"FPEC plan: l={circuit.l} K={K} shots={plan.shots}")

    per_k = []
    for k, m_k in enumerate(plan.shots):
        mean_k, var_k = estimate_order_k(circuit, quasi, k, m_k, obs, rng.substream(k), threads)
        per_k.append(OrderEstimate(k, series.coefficient(k), m_k, mean_k, var_k))

    mean = math.fsum(est.gamma * est.mean for est in per_k)
    std_error = math.sqrt(math.fsum(est.gamma ** 2 * est.var / est.shots for est in per_k))
    return EstimatorReport(
        method="fpec",
        mean=mean,
        std_error=std_error,
        shots=M,
        K=K,
        bias_bound=obs.norm * series.tail_norm(K),
        per_k=tuple(per_k),
        var_per_shot=estimator_variance(series, K, [est.var for est in per_k]),
        overhead=series.head_norm(K),
    )


# ===== Oracle mode =====

def exact_order_values(
    circuit: Circuit, quasi: QuasiInverseChannel, K: int, obs: DiagonalObservable
) -> np.ndarray:
    """Exact <O>_k for k = 0..K."""
    _check_arity(circuit, quasi)
    return exact_order_expectations(circuit, quasi, K, obs)


def exact_fpec_value(
    circuit: Circuit, quasi: QuasiInverseChannel, K: int, obs: DiagonalObservable
) -> float:
    """sum_{k<=K} gamma_k <O>_k with exact per-order values."""
    series = gamma_series(quasi.eps1, quasi.eps2, circuit.l)
    values = exact_order_values(circuit, quasi, K, obs)
    return math.fsum(series.coefficient(k) * v for k, v in enumerate(values))


def binomial_superoperator(circuit: Circuit, quasi: QuasiInverseChannel) -> np.ndarray:
    """sum_k gamma_k C_k with C_k averaged over every k-subset of sites."""
    _check_arity(circuit, quasi)
    l = circuit.l
    series = gamma_series(quasi.eps1, quasi.eps2, l)
    generator = quasi.generator_superoperator
    total = None
    for k in range(l + 1):
        class_sum = None
        for subset in itertools.combinations(range(l), k):
            superop = circuit_superoperator(circuit, {s: [generator] for s in subset})
            class_sum = superop if class_sum is None else class_sum + superop
        term = series.coefficient(k) * class_sum / math.comb(l, k)
        total = term if total is None else total + term
    return total

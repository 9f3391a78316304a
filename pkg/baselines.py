"""Reference estimators: raw sampling, per-gate quasi-probability PEC and ZNE."""
import math
import logging
import itertools
from enum import Enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from circuit_model import Circuit, scale_noise
from fpec_estimator import EstimatorReport, GammaSeries, ShotBudgetError, estimator_variance
from pauli_core import PreconditionError, QuasiInverseChannel
from sim_engine import (
    DiagonalObservable,
    OracleLimitError,
    RngStream,
    exact_expectation,
    run_shots,
    sample_shot_values,
    shot_chunk,
)
from utils import mean_and_variance

logger = logging.getLogger(__name__)

ZNE_MIN_MAGNITUDE = 1e-6
MAX_PEC_BRANCHES = 4096


# ===== Raw =====

def raw_estimate(
    circuit: Circuit, M: int, obs: DiagonalObservable, rng: RngStream, threads: int = 1
) -> EstimatorReport:
    """Plain noisy mean; std_error is None when M = 1."""
    if M < 1:
        raise PreconditionError(f"Shot budget must be >= 1, got {M}")
    stream = rng.substream(0)
    values = run_shots(
        lambda a, b: sample_shot_values(circuit, obs, stream, a, b), M, threads, shot_chunk(circuit.n)
    )
    mean, var = mean_and_variance(values)
    return EstimatorReport(
        method="raw",
        mean=mean,
        std_error=None if var is None else math.sqrt(var / M),
        shots=M,
        var_per_shot=var,
    )


# ===== Standard PEC =====

@dataclass(frozen=True)
class PecShotRecord:
    sign: float
    value: float
    ops_injected: int


def pec_injector(quasi: QuasiInverseChannel, l: int):
    """Per site: nothing with probability (1 + eps1)/gamma, else V_i with sign -sign(c_i)."""
    def inject(gen: np.random.Generator) -> tuple[np.ndarray, float]:
        paulis, signs, injected = quasi.sample_branches(gen.random(l))
        return np.where(injected, paulis, 0), float(np.prod(signs))
    return inject


def _pec_shot_columns(circuit, quasi, obs, stream, start, stop) -> np.ndarray:
    records = []
    inject = pec_injector(quasi, circuit.l)

    def tracking(gen):
        row, sign = inject(gen)
        records.append((sign, int(np.count_nonzero(row))))
        return row, sign

    signed = sample_shot_values(circuit, obs, stream, start, stop, tracking)
    meta = np.array(records, dtype=float).reshape(-1, 2)
    return np.column_stack([meta[:, 0], signed * meta[:, 0], meta[:, 1]])


def pec_shot_records(
    circuit: Circuit,
    quasi: QuasiInverseChannel,
    M: int,
    obs: DiagonalObservable,
    rng: RngStream,
    threads: int = 1,
) -> list[PecShotRecord]:
    stream = rng.substream(0)
    columns = run_shots(
        lambda a, b: _pec_shot_columns(circuit, quasi, obs, stream, a, b), M, threads, shot_chunk(circuit.n)
    ).reshape(-1, 3)
    return [PecShotRecord(float(s), float(v), int(n)) for s, v, n in columns]


def pec_estimate(
    circuit: Circuit,
    quasi: QuasiInverseChannel,
    M: int,
    obs: DiagonalObservable,
    rng: RngStream,
    threads: int = 1,
) -> EstimatorReport:
    """gamma_g^l times the mean of sign * O over quasi-sampled circuits."""
    if M < 1:
        raise PreconditionError(f"Shot budget must be >= 1, got {M}")
    for s, site in enumerate(circuit.noise_sites):
        if len(site.support) != quasi.n:
            raise PreconditionError(f"{quasi.n}-qubit inverse at site {s} with support {site.support}")
    try:
        scale = math.exp(circuit.l * math.log(quasi.gamma))
    except OverflowError as e:
        raise FloatingPointError(f"PEC overhead gamma^l overflows (gamma={quasi.gamma!r}, l={circuit.l})") from e
    records = pec_shot_records(circuit, quasi, M, obs, rng, threads)
    signed = np.array([r.sign * r.value for r in records])
    mean, var = mean_and_variance(signed)
    logger.debug(f"PEC: l={circuit.l} gamma^l={scale:.4f} injected/shot={np.mean([r.ops_injected for r in records]):.3f}")
    return EstimatorReport(
        method="pec",
        mean=scale * mean,
        std_error=None if var is None else scale * math.sqrt(var / M),
        shots=M,
        var_per_shot=None if var is None else scale ** 2 * var,
        overhead=scale,
    )


def exact_pec_value(circuit: Circuit, quasi: QuasiInverseChannel, obs: DiagonalObservable) -> float:
    """Exact PEC mean by enumerating every quasi-sampling branch."""
    branches = [(1.0 + quasi.eps1, 1.0, None)] + [
        (quasi.eps2 * abs(c), -math.copysign(1.0, c), word) for c, word in quasi.terms
    ]
    if len(branches) ** circuit.l > MAX_PEC_BRANCHES:
        raise OracleLimitError(f"{len(branches)}^{circuit.l} PEC branches exceed {MAX_PEC_BRANCHES}")
    total = []
    for choice in itertools.product(branches, repeat=circuit.l):
        weight = math.prod(b[0] for b in choice)
        sign = math.prod(b[1] for b in choice)
        injections = [(s, b[2]) for s, b in enumerate(choice) if b[2] is not None]
        total.append(weight * sign * exact_expectation(circuit, injections, obs))
    return math.fsum(total)


# ===== ZNE =====

class ZneModel(str, Enum):
    EXPONENTIAL = "exponential"
    LINEAR_FALLBACK = "linear_fallback"


@dataclass(frozen=True)
class ZnePoint:
    scale: float
    mean: float
    std_error: float | None
    shots: int = 0


@dataclass(frozen=True)
class ZneFit:
    points: tuple[ZnePoint, ...]
    model: ZneModel
    extrapolated: float
    std_error: float | None

    def to_report(self) -> EstimatorReport:
        shots = sum(p.shots for p in self.points)
        var = None if self.std_error is None else self.std_error ** 2 * shots
        return EstimatorReport(
            method="zne", mean=self.extrapolated, std_error=self.std_error, shots=shots, var_per_shot=var,
            zne=self.to_dict(),
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model.value,
            "extrapolated": self.extrapolated,
            "std_error": self.std_error,
            "points": [
                {"scale": p.scale, "mean": p.mean, "std_error": p.std_error, "shots": p.shots}
                for p in self.points
            ],
        }


def _choose_model(ys: np.ndarray) -> ZneModel:
    if np.any(np.abs(ys) < ZNE_MIN_MAGNITUDE) or not (np.all(ys > 0) or np.all(ys < 0)):
        return ZneModel.LINEAR_FALLBACK
    return ZneModel.EXPONENTIAL


def _extrapolate(scales: np.ndarray, ys: np.ndarray, model: ZneModel) -> float:
    if model is ZneModel.EXPONENTIAL:
        if len(scales) == 2:
            (l1, l2), (y1, y2) = scales, ys
            return float(y1 * (y1 / y2) ** (l1 / (l2 - l1)))
        slope, intercept = np.polyfit(scales, np.log(np.abs(ys)), 1)
        return float(np.sign(ys[0]) * np.exp(intercept))
    if len(scales) == 2:
        (l1, l2), (y1, y2) = scales, ys
        return float(y1 - l1 * (y2 - y1) / (l2 - l1))
    slope, intercept = np.polyfit(scales, ys, 1)
    return float(intercept)


def zne_extrapolate(points: Sequence[ZnePoint]) -> ZneFit:
    """Exponential ansatz A e^{-b lambda} at lambda = 0, linear when it does not apply."""
    if len(points) < 2:
        raise PreconditionError("ZNE needs at least two noise scales")
    scales = np.array([p.scale for p in points], dtype=float)
    if scales[0] < 1.0 or np.any(np.diff(scales) <= 0):
        raise PreconditionError(f"ZNE scales must be strictly increasing from >= 1, got {scales.tolist()}")
    ys = np.array([p.mean for p in points], dtype=float)
    model = _choose_model(ys)
    if model is ZneModel.LINEAR_FALLBACK:
        logger.warning(f"⚠️ ZNE falling back to linear extrapolation for means {ys.tolist()}")
    value = _extrapolate(scales, ys, model)

    std_error = None
    if all(p.std_error is not None for p in points):
        # central differences, model held fixed
        terms = []
        for i, p in enumerate(points):
            h = 1e-7 * max(abs(ys[i]), ZNE_MIN_MAGNITUDE)
            up, down = ys.copy(), ys.copy()
            up[i] += h
            down[i] -= h
            grad = (_extrapolate(scales, up, model) - _extrapolate(scales, down, model)) / (2 * h)
            terms.append((grad * p.std_error) ** 2)
        std_error = math.sqrt(math.fsum(terms))
    return ZneFit(tuple(points), model, value, std_error)


def zne_estimate(
    circuit: Circuit,
    scales: Sequence[float],
    M: int,
    obs: DiagonalObservable,
    rng: RngStream,
    threads: int = 1,
) -> ZneFit:
    """Raw estimates at every noise scale with an even shot split, then extrapolate."""
    if len(scales) < 2:
        raise PreconditionError("ZNE needs at least two noise scales")
    per_scale = M // len(scales)
    if per_scale < 1:
        raise ShotBudgetError(f"{M} shots cannot cover {len(scales)} noise scales")
    points = []
    for j, factor in enumerate(scales):
        report = raw_estimate(scale_noise(circuit, factor), per_scale, obs, rng.substream(j), threads)
        points.append(ZnePoint(float(factor), report.mean, report.std_error, per_scale))
    return zne_extrapolate(points)


# ===== Variance gap =====

def variance_gap(weights, signs, means) -> float:
    """gamma^2 [sum p <O>^2 - (sum p sign <O>)^2] with p = weights / gamma."""
    weights = np.asarray(weights, dtype=float)
    gamma = math.fsum(weights)
    if gamma <= 0:
        raise PreconditionError("Weights must have a positive sum")
    p = weights / gamma
    x = np.asarray(signs, dtype=float) * np.asarray(means, dtype=float)
    centre = math.fsum(p * x)
    return gamma ** 2 * math.fsum(p * (x - centre) ** 2)


def sampling_variance_delta(
    series: GammaSeries, K: int, per_k_means, per_k_vars
) -> tuple[float, float, float]:
    """(var_est, var_sampling, delta) for deterministic vs categorical order sampling."""
    if len(per_k_means) != K + 1:
        raise PreconditionError(f"Expected {K + 1} per-order means, got {len(per_k_means)}")
    var_est = estimator_variance(series, K, per_k_vars)
    k = np.arange(K + 1)
    delta = variance_gap(np.exp(series.log_abs[: K + 1]), np.where(k % 2 == 0, 1.0, -1.0), per_k_means)
    return var_est, var_est + delta, delta


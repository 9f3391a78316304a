import io
import csv
import json
import math
import asyncio
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from config import ORACLE_MAX_QUBITS, ConfigError, ExperimentConfig
from circuit_model import Circuit, LatticeSpec, build_tfim_trotter, scale_noise
from baselines import pec_estimate, raw_estimate, zne_estimate, zne_extrapolate, ZnePoint
from fpec_estimator import (
    BiasTolerance,
    EstimatorReport,
    FixedOrder,
    OrderEstimate,
    ShotLimited,
    exact_order_values,
    fpec_estimate,
    gamma_series,
    truncate,
)
from pauli_core import PreconditionError, QuasiInverseChannel, StochasticPauliChannel, invert_channel
from sim_engine import DiagonalObservable, OracleLimitError, RngStream, exact_expectation
from utils import format_float

logger = logging.getLogger(__name__)

# ===== Report Layout =====
METHOD_ORDER = {"raw": 0, "fpec": 1, "pec": 2, "zne": 3}
ZNE_STREAM = 2 ** 32
CSV_COLUMNS = [
    "steps", "method", "mean", "std_error", "exact_value",
    "bias", "var_per_shot", "K", "bias_bound",
]
INT_COLUMNS = {"steps", "K"}


@dataclass(frozen=True)
class SweepRow:
    steps: int
    method: str
    mean: float
    std_error: float | None
    exact_value: float | None = None
    bias: float | None = None
    var_per_shot: float | None = None
    K: int | None = None
    bias_bound: float | None = None

    @classmethod
    def from_report(cls, steps: int, report: EstimatorReport, exact_value: float | None):
        bias = None if exact_value is None else abs(report.mean - exact_value)
        return cls(
            steps, report.method, report.mean, report.std_error, exact_value,
            bias, report.var_per_shot, report.K, report.bias_bound,
        )


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...] = ()
    complete: bool = True

    def to_dict(self) -> dict:
        return {"complete": self.complete, "rows": [asdict(row) for row in self.rows]}

    @classmethod
    def from_dict(cls, data: dict) -> "SweepResult":
        return cls(tuple(SweepRow(**row) for row in data["rows"]), bool(data.get("complete", True)))


class SweepAbortedError(RuntimeError):
    """A sweep point failed; `partial` holds every row finished before the abort."""

    def __init__(self, message: str, partial: SweepResult):
        super().__init__(message)
        self.partial = partial


# ===== Experiment Setup =====

@dataclass
class Experiment:
    config: ExperimentConfig
    channel: StochasticPauliChannel
    quasi: QuasiInverseChannel
    obs: DiagonalObservable
    exact_enabled: bool
    rng: RngStream = field(init=False)

    def __post_init__(self):
        self.rng = RngStream(self.config.seed)

    @property
    def n(self) -> int:
        return self.config.lattice.rows * self.config.lattice.cols

    def circuit(self, steps: int) -> Circuit:
        lat = self.config.lattice
        spec = LatticeSpec(lat.rows, lat.cols, lat.J, lat.h, lat.tau, steps)
        return build_tfim_trotter(spec, self.channel, lat.initial_angle)

    @property
    def policy(self):
        trunc = self.config.truncation
        if trunc.policy == "shots":
            return ShotLimited()
        if trunc.policy == "fixed":
            return FixedOrder(trunc.order)
        return BiasTolerance(trunc.delta)


def prepare_experiment(config: ExperimentConfig) -> Experiment:
    """Build channels, the inverse and the observable once per run."""
    n = config.lattice.rows * config.lattice.cols
    try:
        channel = config.channel.build()
        assumed_cfg = config.assumed_channel or config.channel
        assumed = assumed_cfg.build() if config.assumed_channel else channel
        quasi = invert_channel(assumed, assumed_cfg.generator)
        obs = DiagonalObservable(config.observable, n, tuple(config.observable_qubits))
    except PreconditionError as e:
        raise ConfigError(str(e)) from e
    if channel.n != 2 or quasi.n != 2:
        raise ConfigError("TFIM noise channels must act on two qubits")

    if config.exact is False:
        exact_enabled = False
    elif n <= ORACLE_MAX_QUBITS:
        exact_enabled = True
    elif config.exact:
        raise OracleLimitError(f"Exact values requested for {n} qubits (limit {ORACLE_MAX_QUBITS})")
    else:
        logger.warning(f"⚠️ {n} qubits exceed the oracle limit; exact_value will be null")
        exact_enabled = False
    if config.estimation == "oracle" and n > ORACLE_MAX_QUBITS:
        raise OracleLimitError(f"Oracle estimation limited to {ORACLE_MAX_QUBITS} qubits, lattice has {n}")
    return Experiment(config, channel, quasi, obs, exact_enabled)


# ===== Point Execution =====

def _sampled_report(exp: Experiment, circuit: Circuit, method: str, stream: RngStream, threads: int):
    M = exp.config.shots
    if method == "raw":
        return raw_estimate(circuit, M, exp.obs, stream, threads)
    if method == "fpec":
        return fpec_estimate(circuit, exp.quasi, M, exp.policy, exp.obs, stream, threads)
    if method == "pec":
        return pec_estimate(circuit, exp.quasi, M, exp.obs, stream, threads)
    fit = zne_estimate(circuit, exp.config.zne_scales, M, exp.obs, stream.substream(ZNE_STREAM), threads)
    return fit.to_report()


def _oracle_report(exp: Experiment, circuit: Circuit, method: str) -> EstimatorReport:
    """Exact value of what each estimator converges to."""
    obs, M = exp.obs, exp.config.shots
    if method == "raw":
        return EstimatorReport("raw", exact_expectation(circuit, [], obs, mode="density"), 0.0, M)
    if method == "pec":
        mean = exact_expectation(circuit, [], obs, mode="density", inverse=exp.quasi)
        return EstimatorReport("pec", mean, 0.0, M, overhead=exp.quasi.gamma ** circuit.l)
    if method == "zne":
        points = [
            ZnePoint(float(s), exact_expectation(scale_noise(circuit, s), [], obs, mode="density"), 0.0, M)
            for s in exp.config.zne_scales
        ]
        return zne_extrapolate(points).to_report()
    series = gamma_series(exp.quasi.eps1, exp.quasi.eps2, circuit.l)
    K = truncate(series, exp.policy, M, obs.norm)
    values = exact_order_values(circuit, exp.quasi, K, obs)
    per_k = tuple(OrderEstimate(k, series.coefficient(k), 0, float(v), 0.0) for k, v in enumerate(values))
    return EstimatorReport(
        method="fpec",
        mean=math.fsum(est.gamma * est.mean for est in per_k),
        std_error=0.0,
        shots=M,
        K=K,
        bias_bound=obs.norm * series.tail_norm(K),
        per_k=per_k,
        overhead=series.head_norm(K),
    )


def evaluate_point(
    exp: Experiment, steps: int, method: str, threads: int = 1
) -> tuple[EstimatorReport, float | None]:
    """Report and exact noiseless value of one (depth, method) point.

    The random stream depends only on the seed and the depth.
    """
    if method not in METHOD_ORDER:
        raise PreconditionError(f"Unknown method {method!r}")
    circuit = exp.circuit(steps)
    if exp.config.estimation == "oracle":
        report = _oracle_report(exp, circuit, method)
    else:
        report = _sampled_report(exp, circuit, method, exp.rng.substream(steps), threads)
    exact = exact_expectation(circuit.noiseless(), [], exp.obs) if exp.exact_enabled else None
    return report, exact


def run_point(exp: Experiment, steps: int, method: str, threads: int = 1) -> SweepRow:
    report, exact = evaluate_point(exp, steps, method, threads)
    row = SweepRow.from_report(steps, report, exact)
    logger.info(f"📊 steps={steps} {method}: mean={row.mean:.6f} std_error={format_float(row.std_error) or '-'}")
    return row


# ===== Sweep Queue =====

class SweepQueue:
    def __init__(self, workers: int = 1):
        self.queue = asyncio.Queue()
        self.workers = max(1, workers)
        self.rows: list[SweepRow] = []
        self.error: Exception | None = None
        self.stats = {'processed': 0, 'failed': 0, 'in_queue': 0}

    async def add_point(self, steps: int, method: str):
        """Add a sweep point to the queue."""
        await self.queue.put({'steps': steps, 'method': method})
        self.stats['in_queue'] = self.queue.qsize()

    async def process_queue(self, runner):
        """Worker: run points until the queue is empty; skip the rest after a failure."""
        while True:
            try:
                task = self.queue.get_nowait()
            except asyncio.QueueEmpty:
                return
            self.stats['in_queue'] = self.queue.qsize()
            try:
                if self.error is None:
                    row = await asyncio.to_thread(runner, task['steps'], task['method'])
                    self.rows.append(row)
                    self.stats['processed'] += 1
            except Exception as e:
                logger.error(f"❌ Sweep point steps={task['steps']} {task['method']} failed: {e}")
                self.stats['failed'] += 1
                if self.error is None:
                    self.error = e
            finally:
                self.queue.task_done()

    async def run(self, runner) -> list[SweepRow]:
        workers = [asyncio.create_task(self.process_queue(runner)) for _ in range(self.workers)]
        await asyncio.gather(*workers)
        return self.rows

    def get_stats(self):
        return {**self.stats, 'workers': self.workers}


def _sorted_rows(rows) -> tuple[SweepRow, ...]:
    return tuple(sorted(rows, key=lambda r: (r.steps, METHOD_ORDER.get(r.method, 99))))


def run_sweep(config: ExperimentConfig, threads: int = 1) -> SweepResult:
    """Every (depth, method) point of the config, run on `threads` workers."""
    exp = prepare_experiment(config)
    sweep = SweepQueue(threads)

    async def _run():
        for steps in config.step_list:
            for method in config.methods:
                await sweep.add_point(steps, method)
        return await sweep.run(lambda steps, method: run_point(exp, steps, method))

    rows = asyncio.run(_run())
    logger.info(f"✅ Sweep finished: {sweep.get_stats()}")
    if sweep.error is not None:
        partial = SweepResult(_sorted_rows(rows), complete=False)
        raise SweepAbortedError(f"Sweep aborted: {sweep.error}", partial) from sweep.error
    return SweepResult(_sorted_rows(rows))


def mischaracterization_study(config: ExperimentConfig, threads: int = 1) -> SweepResult:
    """Raw and FPEC rows where trajectories use the true channel and the inverse the assumed one."""
    if config.assumed_channel is None:
        raise ConfigError("Mischaracterization study needs an assumed_channel")
    study = config.model_copy(update={"methods": ["raw", "fpec"]})
    return run_sweep(study, threads)


def gamma_profile(l: int, eps1: float, eps2: float, output: str | Path) -> Path:
    """CSV of (k, |gamma_k|, log10|gamma_k|) up to the k_max cap."""
    if l < 1:
        raise PreconditionError(f"Profile needs l >= 1, got {l}")
    series = gamma_series(eps1, eps2, l)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "abs_gamma", "log10_abs_gamma"])
    for k in range(series.k_max + 1):
        log_abs = float(series.log_abs[k])
        writer.writerow([k, repr(math.exp(log_abs)), repr(log_abs / math.log(10))])
    return _write(Path(output), buf.getvalue())


# ===== Reports =====

def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise PreconditionError(f"Cannot write {path}: {e}") from e
    logger.info(f"💾 Wrote {path}")
    return path


def render_report(result: SweepResult, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(result.to_dict(), indent=2) + "\n"
    if fmt != "csv":
        raise PreconditionError(f"Unknown report format {fmt!r}")
    buf = io.StringIO()
    if not result.complete:
        buf.write("# complete=false\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in result.rows:
        cells = []
        for name in CSV_COLUMNS:
            value = getattr(row, name)
            if name in INT_COLUMNS or name == "method":
                cells.append("" if value is None else str(value))
            else:
                cells.append(format_float(value))
        writer.writerow(cells)
    return buf.getvalue()


def emit_report(result: SweepResult, fmt: str, path: str | Path) -> Path:
    """Write the sweep as CSV or JSON; identical results give identical bytes."""
    return _write(Path(path), render_report(result, fmt))


def load_report(path: str | Path) -> SweepResult:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return SweepResult.from_dict(json.loads(text))
    lines = text.splitlines()
    complete = not (lines and lines[0].startswith("# complete=false"))
    reader = csv.DictReader(line for line in lines if not line.startswith("#"))
    rows = []
    for record in reader:
        values = {}
        for name in CSV_COLUMNS:
            cell = record[name]
            if name == "method":
                values[name] = cell
            elif cell == "":
                values[name] = None
            else:
                values[name] = int(cell) if name in INT_COLUMNS else float(cell)
        rows.append(SweepRow(**values))
    return SweepResult(tuple(rows), complete)

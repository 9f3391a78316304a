import json
import asyncio
import logging
from pathlib import Path

import click
from rich import box
from rich.console import Console
from rich.table import Table

from config import OUTPUT_DIR, THREADS, DATABASE_PATH, load_experiment_config
from database import ResultStore
from fpec_estimator import gamma_series
from pauli_core import GeneratorForm, depolarizing_channel, invert_channel, load_channel_file
from services import (
    SweepAbortedError,
    emit_report,
    evaluate_point,
    gamma_profile,
    mischaracterization_study,
    prepare_experiment,
    run_sweep,
)

logger = logging.getLogger(__name__)
console = Console()

config_option = click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Experiment file (TOML or JSON).",
)
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the config seed.")
threads_option = click.option("--threads", type=click.IntRange(min=1), default=THREADS, show_default=True)
out_option = click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
format_option = click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default=None)
store_option = click.option("--store", is_flag=True, help=f"Also record the run in {DATABASE_PATH}.")


def _output_path(config, command, fmt, out):
    if out is not None:
        return out
    if config.output is not None:
        return config.output
    return OUTPUT_DIR / f"{config.name}_{command}.{fmt}"


async def _store(result, command, config):
    async with ResultStore() as store:
        return await store.store_sweep(result, command, config.seed, config.model_dump(mode="json"))


def _run_and_emit(command, runner, config_path, seed, threads, out, fmt, store):
    config = load_experiment_config(config_path, {"seed": seed})
    fmt = fmt or config.format
    path = _output_path(config, command, fmt, out)
    logger.info(f"🚀 {command}: {config.name} steps={config.step_list} methods={config.methods} threads={threads}")
    try:
        result = runner(config, threads)
    except SweepAbortedError as e:
        emit_report(e.partial, fmt, path)
        logger.error(f"❌ Partial results ({len(e.partial.rows)} rows) written to {path}")
        if store:
            asyncio.run(_store(e.partial, command, config))
        raise
    emit_report(result, fmt, path)
    if store:
        run_id = asyncio.run(_store(result, command, config))
        click.echo(f"Stored as run {run_id}")
    click.echo(f"{len(result.rows)} rows -> {path}")


@click.command()
@click.option("--l", "l", type=click.IntRange(min=1), required=True, help="Number of noise sites.")
@click.option("--eps", type=float, default=None, help="Depolarizing error probability per site.")
@click.option("--arity", type=click.IntRange(1, 4), default=2, show_default=True)
@click.option("--eps1", type=float, default=None)
@click.option("--eps2", type=float, default=None)
@out_option
def gamma(l, eps, arity, eps1, eps2, out):
    """|gamma_k| profile of the binomial expansion."""
    if eps is not None:
        quasi = invert_channel(depolarizing_channel(arity, eps))
        eps1, eps2 = quasi.eps1, quasi.eps2
    elif eps1 is None or eps2 is None:
        raise click.UsageError("Give --eps, or both --eps1 and --eps2")
    path = gamma_profile(l, eps1, eps2, out or OUTPUT_DIR / f"gamma_l{l}.csv")
    series = gamma_series(eps1, eps2, l)
    click.echo(f"eps1={eps1!r} eps2={eps2!r} k_max={series.k_max} norm={series.total_norm!r} -> {path}")


@click.command()
@config_option
@click.option("--steps", type=click.IntRange(min=0), required=True)
@click.option("--method", type=click.Choice(["raw", "fpec", "pec", "zne"]), default="fpec", show_default=True)
@seed_option
@threads_option
@out_option
def estimate(config_path, steps, method, seed, threads, out):
    """Run a single point and print its report as JSON."""
    config = load_experiment_config(config_path, {"seed": seed})
    exp = prepare_experiment(config)
    report, exact = evaluate_point(exp, steps, method, threads)
    payload = {"steps": steps, **report.to_dict(), "exact_value": exact}
    text = json.dumps(payload, indent=2)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    click.echo(text)


@click.command()
@config_option
@seed_option
@threads_option
@out_option
@format_option
@store_option
def sweep(config_path, seed, threads, out, fmt, store):
    """Depth sweep over every configured method."""
    _run_and_emit("sweep", run_sweep, config_path, seed, threads, out, fmt, store)


@click.command()
@config_option
@seed_option
@threads_option
@out_option
@format_option
@store_option
def mischar(config_path, seed, threads, out, fmt, store):
    """Mitigate with the assumed channel while simulating the true one."""
    _run_and_emit("mischar", mischaracterization_study, config_path, seed, threads, out, fmt, store)


@click.command()
@click.option("--channel", "channel_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--eps", type=float, default=None, help="Depolarizing channel instead of a file.")
@click.option("--arity", type=click.IntRange(1, 4), default=2, show_default=True)
@click.option("--form", type=click.Choice([f.value for f in GeneratorForm]), default="pauli", show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of a table.")
def invert(channel_path, eps, arity, form, as_json):
    """Print the quasi-probability inverse of a channel."""
    if (channel_path is None) == (eps is None):
        raise click.UsageError("Give exactly one of --channel or --eps")
    channel = load_channel_file(channel_path) if channel_path else depolarizing_channel(arity, eps)
    quasi = invert_channel(channel, GeneratorForm(form))
    if as_json:
        click.echo(json.dumps(quasi.to_dict(), indent=2))
        return
    console.rule(f"Inverse of {channel.n}-qubit channel (error rate {channel.error_rate:.4g})")
    console.print(f"eps1 = {quasi.eps1!r}   eps2 = {quasi.eps2!r}   gamma = {quasi.gamma!r}")
    table = Table(box=box.SIMPLE)
    table.add_column("V_i")
    table.add_column("c_i", justify="right")
    table.add_column("weight -eps2*c_i", justify="right")
    for c, word in quasi.terms:
        table.add_row(str(word), f"{c:.6g}", f"{-quasi.eps2 * c:.6g}")
    console.print(table)


@click.command()
@click.option("--limit", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--run", "run_id", type=int, default=None, help="Show the rows of one run.")
def history(limit, run_id):
    """List stored runs."""
    async def _fetch():
        async with ResultStore() as store:
            if run_id is not None:
                return await store.get_rows(run_id)
            return await store.list_runs(limit)

    try:
        data = asyncio.run(_fetch())
    except KeyError as e:
        raise click.BadParameter(str(e.args[0]), param_hint="--run") from e
    if run_id is not None:
        table = Table(box=box.SIMPLE, title=f"Run {run_id}" + ("" if data.complete else " (incomplete)"))
        for name in ("steps", "method", "mean", "std_error", "exact_value", "bias", "K"):
            table.add_column(name)
        for row in data.rows:
            table.add_row(*("" if getattr(row, n) is None else str(getattr(row, n))
                            for n in ("steps", "method", "mean", "std_error", "exact_value", "bias", "K")))
        console.print(table)
        return
    table = Table(box=box.SIMPLE, title="Stored runs")
    for name in ("id", "created_at", "command", "seed", "rows", "complete"):
        table.add_column(name)
    for run in data:
        table.add_row(*(str(run[n]) for n in ("id", "created_at", "command", "seed", "rows", "complete")))
    console.print(table)

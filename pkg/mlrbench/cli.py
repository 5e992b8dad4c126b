import logging
from pathlib import Path
from typing import List, Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from mlrbench.bench import PRESETS, SCALE_ALIASES, SCALES, TABLE_ALIASES, TABLES, SweepSpec, get_preset, reproduce, sweep
from mlrbench.checks import run_checks
from mlrbench.core import ExperimentConfig, load_config, prepare_data, run_experiment, solver_config_class
from mlrbench.models import AcceptanceError, ConfigError, MLRBenchError
from mlrbench.persistence import atomic_write_text, save_dataset, save_federated, write_json
from mlrbench.report import generate_report
from mlrbench.solvers import is_supported_algorithm

app = typer.Typer(
    help="mlrbench CLI - Wasserstein minimax, EM and Gradient-EM solvers for mixed linear regression.",
    rich_markup_mode="rich",
    no_args_is_help=True
)
console = Console()


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log per-iteration detail.")):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def _fail(e: MLRBenchError):
    console.print(f"[bold red]Error:[/bold red] {e}")
    raise typer.Exit(e.exit_code)


def resolve_config(config: Optional[Path], preset: Optional[str]) -> ExperimentConfig:
    """Config file, named preset, or the default experiment, in that order."""
    if config and preset:
        raise ConfigError("use either --config or --preset, not both")
    if config:
        return load_config(config)
    if preset:
        return get_preset(preset)
    return ExperimentConfig()


def apply_overrides(
    cfg: ExperimentConfig,
    algorithm: Optional[str] = None,
    seed: Optional[int] = None,
    snr: Optional[float] = None,
    n: Optional[int] = None,
    agents: Optional[int] = None,
    lam: Optional[float] = None,
    alpha: Optional[float] = None,
    iters: Optional[int] = None,
    out: Optional[str] = None,
) -> ExperimentConfig:
    """CLI flags replace config fields one-to-one; the result is re-validated."""
    raw = cfg.to_dict()
    if algorithm is not None and algorithm.lower() != cfg.algorithm:
        algorithm = algorithm.lower()
        federated = algorithm.startswith("f-")
        old_family = cfg.algorithm.replace("f-", "", 1)
        raw["algorithm"] = algorithm
        raw["scenario"] = None
        if old_family != algorithm.replace("f-", "", 1):
            if not is_supported_algorithm(algorithm):
                raise ConfigError(f"Unknown algorithm '{algorithm}'")
            raw["solver"] = solver_config_class(algorithm)(T=raw["solver"]["T"]).to_dict()
        if federated and raw["fed"] is None:
            raw["fed"] = {}
        if not federated:
            raw["fed"] = None
    if seed is not None:
        raw["seed"] = seed
    if snr is not None:
        raw["gen"]["snr"] = snr
    if n is not None:
        raw["gen"]["n"] = n
    if agents is not None:
        if raw["fed"] is None:
            raise ConfigError("--agents needs a federated algorithm")
        raw["fed"]["M"] = agents
    if lam is not None:
        if "lam" not in raw["solver"]:
            raise ConfigError(f"--lambda does not apply to '{raw['algorithm']}'")
        raw["solver"].update(lam=lam, alpha_max=None, alpha_min=None)
    if alpha is not None:
        if "alpha" in raw["solver"]:
            raw["solver"]["alpha"] = alpha
        elif raw["algorithm"] == "f-em":
            raw["fed"]["fem_alpha"] = alpha
        else:
            raise ConfigError(f"--alpha does not apply to '{raw['algorithm']}'")
    if iters is not None:
        raw["solver"]["T"] = iters
        if raw["fed"] is not None:
            raw["fed"]["rounds"] = iters
    if out is not None:
        raw["output_dir"] = out
    return ExperimentConfig.from_dict(raw)


def _print_summary(summary: dict):
    table = Table(title=f"{summary['algorithm']} (seed {summary['seed']})")
    table.add_column("metric")
    table.add_column("value", justify="right")
    for key in ("final_rel_err", "final_nll", "final_sigma2", "convergence_round", "did_not_converge",
                "iterations", "communication_rounds", "wall_ms"):
        value = summary[key]
        table.add_row(key, f"{value:.6g}" if isinstance(value, float) else str(value))
    console.print(table)


@app.command()
def generate(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Experiment config JSON."),
    preset: Optional[str] = typer.Option(None, "--preset", "-p", help=f"Named preset: {', '.join(PRESETS)}."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed."),
    snr: Optional[float] = typer.Option(None, "--snr", help="Norm of beta*."),
    n: Optional[int] = typer.Option(None, "--n", help="Sample count (centralized)."),
    agents: Optional[int] = typer.Option(None, "--agents", help="Agent count (federated)."),
    out: Path = typer.Option(Path("data"), "--out", "-o", help="Output directory."),
):
    """
    Generate a synthetic dataset ([bold]data.csv[/bold], plus [bold]data.agents.csv[/bold] when federated).
    """
    try:
        cfg = apply_overrides(resolve_config(config, preset), seed=seed, snr=snr, n=n, agents=agents).seeded()
        data, beta_star = prepare_data(cfg)
        path = out / "data.csv"
        if cfg.federated:
            save_federated(data, path)
        else:
            save_dataset(data, path)
        write_json({"beta_star": [float(v) for v in beta_star.ravel()], "gen": cfg.gen.to_dict()}, out / "beta_star.json")
        console.print(f"[bold green]Wrote dataset to {path}[/bold green]")
    except MLRBenchError as e:
        _fail(e)


@app.command()
def run(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Experiment config JSON."),
    preset: Optional[str] = typer.Option(None, "--preset", "-p", help=f"Named preset: {', '.join(PRESETS)}."),
    algorithm: Optional[str] = typer.Option(None, "--algorithm", "-a", help="wmlr, em, gem, f-wmlr, f-em or f-gem."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed."),
    snr: Optional[float] = typer.Option(None, "--snr", help="Norm of beta*."),
    n: Optional[int] = typer.Option(None, "--n", help="Sample count (centralized)."),
    agents: Optional[int] = typer.Option(None, "--agents", help="Agent count (federated)."),
    lam: Optional[float] = typer.Option(None, "--lambda", help="WMLR regularization weight."),
    alpha: Optional[float] = typer.Option(None, "--alpha", help="GEM / F-GEM / F-EM step size."),
    iters: Optional[int] = typer.Option(None, "--iters", help="Iterations (or communication rounds)."),
    out: Optional[str] = typer.Option(None, "--out", "-o", help="Output directory for CSV and summary JSON."),
):
    """
    Run one experiment and write its trace and [bold]summary.json[/bold].
    """
    try:
        cfg = apply_overrides(
            resolve_config(config, preset), algorithm, seed, snr, n, agents, lam, alpha, iters, out
        )
        _print_summary(run_experiment(cfg))
    except MLRBenchError as e:
        _fail(e)


@app.command("sweep")
def sweep_command(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Experiment config JSON."),
    preset: Optional[str] = typer.Option(None, "--preset", "-p", help="Named preset."),
    algorithm: Optional[str] = typer.Option(None, "--algorithm", "-a", help="Algorithm to tune."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed."),
    iters: Optional[int] = typer.Option(None, "--iters", help="Iterations (or communication rounds)."),
    parameter: str = typer.Option("lambda", "--parameter", help="'lambda' or 'alpha'."),
    count: int = typer.Option(10, "--count", help="Grid points."),
    lo: Optional[float] = typer.Option(None, "--lo", help="Grid start (default 0.1 for lambda, 1e-4 for alpha)."),
    hi: Optional[float] = typer.Option(None, "--hi", help="Grid end (default 2 for lambda, 10 for alpha)."),
    selection: str = typer.Option("min_final_nll", "--selection", help="'min_final_nll' or 'fastest_convergence'."),
    workers: int = typer.Option(1, "--workers", "-w", help="Grid points evaluated in parallel."),
    out: Optional[str] = typer.Option(None, "--out", "-o", help="Output directory for sweep.csv."),
):
    """
    Tune [bold]lambda[/bold] (WMLR) or [bold]alpha[/bold] (GEM, F-EM) over a log-spaced grid.
    """
    try:
        cfg = apply_overrides(resolve_config(config, preset), algorithm, seed, iters=iters, out=out)
        default_lo, default_hi = (0.1, 2.0) if parameter == "lambda" else (1e-4, 10.0)
        spec = SweepSpec(
            parameter=parameter,
            count=count,
            lo=default_lo if lo is None else lo,
            hi=default_hi if hi is None else hi,
            selection=selection,
        )
        best, points = sweep(cfg, spec, workers=workers)
        table = Table(title=f"{parameter} sweep ({selection})")
        for col in ("value", "final_rel_err", "final_nll", "convergence_round", "status"):
            table.add_column(col)
        for p in points:
            s = p.summary or {}
            table.add_row(
                f"{p.value:.4g}",
                str(s.get("final_rel_err", "")),
                str(s.get("final_nll", "")),
                str(s.get("convergence_round", "")),
                "failed" if p.error else "ok",
            )
        console.print(table)
        chosen = best.solver.lam if parameter == "lambda" else getattr(best.solver, "alpha", None)
        if chosen is None:
            chosen = best.fed.fem_alpha
        console.print(f"[bold green]Selected {parameter} = {chosen:.4g}[/bold green]")
    except MLRBenchError as e:
        _fail(e)


@app.command("reproduce")
def reproduce_command(
    table: str = typer.Argument(
        ..., help=f"{', '.join(TABLES)} or 'all' (aliases: {', '.join(TABLE_ALIASES)})."
    ),
    scale: str = typer.Option(
        "desk", "--scale", help=f"{' or '.join(SCALES)} (alias: {', '.join(SCALE_ALIASES)})."
    ),
    out: Path = typer.Option(Path("reproduce"), "--out", "-o", help="Directory for report.md and results.json."),
    workers: int = typer.Option(1, "--workers", "-w", help="Cells run in parallel."),
    no_cache: bool = typer.Option(False, "--no-cache", help="Ignore and do not update the result cache."),
):
    """
    Reproduce a results table and write a [bold]report.md[/bold] marking every cell PASS/FAIL.
    """
    try:
        tables: List[str] = list(TABLES) if table == "all" else [table]
        reports = [reproduce(t, scale, workers=workers, use_cache=not no_cache) for t in tables]
        atomic_write_text(out / "report.md", generate_report(reports))
        write_json(
            {
                r.table: {o.cell.name: {"values": o.values, "passed": o.passed, "errors": o.errors} for o in r.cells}
                for r in reports
            },
            out / "results.json",
        )
        for r in reports:
            colour = "green" if r.passed else "red"
            console.print(f"[bold {colour}]{r.table}: {'PASS' if r.passed else 'FAIL'}[/bold {colour}]")
        console.print(f"Report written to [bold]{out / 'report.md'}[/bold]")
        if not all(r.passed for r in reports):
            raise AcceptanceError("one or more cells are outside their acceptance band")
    except MLRBenchError as e:
        _fail(e)


@app.command()
def check(
    seed: int = typer.Option(0, "--seed", help="Seed for the random check instances."),
    only: Optional[List[str]] = typer.Option(None, "--only", help="Run only the named checks."),
):
    """
    Run the numerical invariant suite (gradients, federated exactness, M-step optimality, ...).
    """
    results = run_checks(seed=seed, only=only)
    table = Table(title="Invariant checks")
    table.add_column("check")
    table.add_column("status")
    table.add_column("detail")
    for r in results:
        table.add_row(r.name, "[green]ok[/green]" if r.passed else "[red]FAILED[/red]", r.detail)
    console.print(table)
    if not results or not all(r.passed for r in results):
        _fail(AcceptanceError(f"{sum(not r.passed for r in results)} check(s) failed"))


if __name__ == "__main__":
    app()

"""Command-line entry points.

Commands mirror the pipeline stages: synth -> kg -> ingest -> train ->
backtest -> report. Configuration errors exit 2, data errors 3, diverged
training 4.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, DataError, DivergenceError

log = logging.getLogger(__name__)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, DataError, DivergenceError) as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(err.exit_code)

    return wrapper


def _load(config_path: str, overrides: tuple[str, ...]) -> RunConfig:
    cfg = load_config(config_path)
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    return cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logging.")
def main(verbose: bool) -> None:
    """Temporal-graph stock ranking pipeline."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _parse_rule(spec: str):
    from .synth import PlantedRule

    parts = spec.split(":")
    if len(parts) != 3:
        raise ConfigError(f"rule {spec!r} must look like RELATION:effect:lag")
    name, effect, lag = parts
    try:
        return PlantedRule(relation=name, effect=float(effect), lag=int(lag))
    except ValueError:
        raise ConfigError(f"rule {spec!r} has a malformed effect or lag") from None


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--seed", default=0, show_default=True)
@click.option("--assets", default=20, show_default=True)
@click.option("--days", default=800, show_default=True)
@click.option("--sectors", default=10, show_default=True)
@click.option("--start", default="2015-01-05", show_default=True, help="First calendar date.")
@click.option("--drift", default=0.0002, show_default=True)
@click.option("--noise", default=0.001, show_default=True)
@click.option("--noise-events", default=0, show_default=True, help="Uninformative extra events.")
@click.option(
    "--rule", "rules", multiple=True,
    help="Planted rule RELATION:effect:lag (repeatable; default POSITIVE_CATALYST:0.01:5).",
)
@_guarded
def synth(out_dir, seed, assets, days, sectors, start, drift, noise, noise_events, rules):
    """Generate a synthetic market with graph-planted return signal."""
    from .synth import PlantedRule, SynthConfig, generate

    parsed = tuple(_parse_rule(r) for r in rules) if rules else (PlantedRule(),)
    cfg = SynthConfig(
        seed=seed, n_assets=assets, n_days=days, n_sectors=sectors, start=start,
        drift=drift, noise=noise, rules=parsed, n_noise_events=noise_events,
    )
    data = generate(cfg, out_dir)
    click.echo(
        f"wrote {len(data.tickers)} assets x {cfg.n_days} days, "
        f"{len(data.events)} planted events -> {out_dir}"
    )


# ---------------------------------------------------------------------------
# kg
# ---------------------------------------------------------------------------


@main.group()
def kg() -> None:
    """Temporal knowledge-graph utilities."""


@kg.command("build")
@click.option("--nodes", required=True, type=click.Path(exists=True))
@click.option("--relations", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@_guarded
def kg_build(nodes, relations, out_path):
    """Parse node/relation exports into a sorted graph archive."""
    from .kg_store import build_kg, save_archive

    graph = build_kg(nodes, relations)
    save_archive(graph, out_path)
    stats = graph.stats()
    click.echo(
        f"archived {stats['entities']} entities, {stats['relations']} relations -> {out_path}"
    )


@kg.command("filter")
@click.option("--archive", required=True, type=click.Path(exists=True))
@click.option("--remove", "removed", multiple=True, required=True, help="Relation type name.")
@click.option("--out", "out_path", required=True, type=click.Path())
@_guarded
def kg_filter(archive, removed, out_path):
    """Drop all instances of the named relation types."""
    from .kg_store import filter_relations, load_archive, save_archive

    graph = load_archive(archive)
    filtered = filter_relations(graph, removed)
    save_archive(filtered, out_path)
    click.echo(
        f"removed {len(graph.relations) - len(filtered.relations)} relation instances "
        f"({', '.join(removed)}) -> {out_path}"
    )


@kg.command("stats")
@click.option("--archive", required=True, type=click.Path(exists=True))
@click.option("--as-json", "as_json", is_flag=True)
@_guarded
def kg_stats(archive, as_json):
    """Entity/relation counts by arity and type."""
    from .kg_store import load_archive

    stats = load_archive(archive).stats()
    if as_json:
        click.echo(json.dumps(stats, indent=2, sort_keys=True))
        return
    for key in ("entities", "relations", "triples", "quadruples", "quintuples"):
        click.echo(f"{key:12} {stats[key]}")
    click.echo("entity types:")
    for name, count in sorted(stats["entity_types"].items()):
        click.echo(f"  {name:20} {count}")
    click.echo("relation types:")
    for name, count in sorted(stats["relation_types"].items()):
        click.echo(f"  {name:20} {count}")


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


_config_opt = click.option("--config", "config_path", required=True, type=click.Path(exists=True))
_set_opt = click.option(
    "--set", "overrides", multiple=True, metavar="KEY.PATH=VALUE",
    help="Override a config field (repeatable).",
)


@main.command()
@_config_opt
@_set_opt
@_guarded
def ingest(config_path, overrides):
    """Build aligned window/label tensors plus the graph archive."""
    from .pipeline import run_ingest

    out = run_ingest(_load(config_path, overrides))
    click.echo(f"dataset -> {out}")


@main.command()
@_config_opt
@_set_opt
@_guarded
def train(config_path, overrides):
    """Fit one ranking model per evaluation phase and horizon."""
    from .pipeline import run_training

    cfg = _load(config_path, overrides)
    summary = run_training(cfg)
    click.echo(
        f"trained {len(summary['cells'])} phase/horizon cells "
        f"({summary['variant']}) -> {Path(cfg.paths.out_dir) / 'checkpoints'}"
    )


@main.command()
@_config_opt
@_set_opt
@click.option(
    "--remove", "removed", multiple=True,
    help="Counterfactual: relation type to drop (repeatable; overrides config).",
)
@_guarded
def backtest(config_path, overrides, removed):
    """Simulate the trading protocol from saved checkpoints and write reports."""
    from .pipeline import run_backtest
    from .report import write_all

    cfg = _load(config_path, overrides)
    if removed:
        cfg.backtest.counterfactual_remove = tuple(removed)
    result = run_backtest(cfg)
    out = Path(cfg.paths.out_dir) / "backtest"
    paths = write_all(out, cfg, result)
    click.echo((out / "table.txt").read_text(encoding="utf-8").rstrip())
    click.echo(f"report -> {paths['report']}")


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@_guarded
def report(run_dir):
    """Re-render the table and figures from an existing backtest directory."""
    from .backtest import AggregateRow, PhaseRow, SimulationResult
    from .report import render_figures, render_table

    run = Path(run_dir)
    bt = run / "backtest"
    report_path = bt / "report.json"
    if not report_path.exists():
        raise DataError(f"no backtest report under {run} (run backtest first)")
    payload = json.loads(report_path.read_text(encoding="utf-8"))
    cfg_data = payload["config"]
    from .config import from_dict

    cfg = from_dict(cfg_data)

    def to_row(d):
        return PhaseRow(**d)

    rows = [to_row(d) for d in payload["rows"]]
    aggregates = [AggregateRow(**d) for d in payload["aggregates"]]
    cf = payload.get("counterfactual", {})
    rows_cf = [to_row(d) for d in cf.get("rows", [])]
    aggregates_cf = [AggregateRow(**d) for d in cf.get("aggregates", [])]

    sims = []
    values_path = bt / "values.csv"
    if values_path.exists():
        groups: dict[tuple, SimulationResult] = {}
        with values_path.open(encoding="utf-8") as fh:
            import csv as _csv

            reader = _csv.reader(line for line in fh if not line.startswith("#"))
            next(reader)  # header
            for phase, delta, k, execution, day, value in reader:
                key = (int(phase), int(delta), int(k), execution)
                sim = groups.get(key)
                if sim is None:
                    sim = groups[key] = SimulationResult(
                        execution=execution, delta=int(delta), k=int(k)
                    )
                sim.value_days.append(int(day))
                sim.values.append(float(value))
        sims = [(phase, sim) for (phase, _, _, _), sim in sorted(groups.items())]

    class _Shim:
        pass

    shim = _Shim()
    shim.rows, shim.aggregates = rows, aggregates
    shim.rows_cf, shim.aggregates_cf = rows_cf, aggregates_cf
    shim.sims = sims
    shim.removed = tuple(cf.get("removed", []))

    table = render_table(rows, aggregates, title=f"variant {cfg.variant}")
    if rows_cf:
        table += "\n" + render_table(
            rows_cf, aggregates_cf,
            title=f"counterfactual (removed: {', '.join(shim.removed)})",
        )
    (bt / "table.txt").write_text(table, encoding="utf-8")
    figures = render_figures(bt / "figures", cfg, shim)
    click.echo(table.rstrip())
    click.echo(f"re-rendered {len(figures)} figures -> {bt / 'figures'}")


if __name__ == "__main__":
    main()

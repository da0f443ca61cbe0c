"""Backtest artifacts: delimited metrics, attention table, figures, summary.

Everything written here is deterministic for a given run: fixed column
orders, fixed float formatting, sorted keys, and Agg-rendered figures, so
re-running a backtest reproduces the files byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .backtest import AggregateRow, PhaseRow
from .config import RunConfig

METRICS = ("irr", "airr", "sharpe", "ndcg", "acc", "irr_best", "irr_worst")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _config_stamp(cfg: RunConfig) -> str:
    digest = hashlib.sha256(cfg.to_json().encode("utf-8")).hexdigest()[:16]
    return f"# variant={cfg.variant} seed={cfg.seed} config_sha256={digest}"


def write_metrics_csv(
    path: Path,
    cfg: RunConfig,
    rows: list[PhaseRow],
    aggregates: list[AggregateRow],
    rows_cf: list[PhaseRow] = (),
    aggregates_cf: list[AggregateRow] = (),
) -> Path:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(_config_stamp(cfg) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["scenario", "phase", "delta", "k", "metric", "value"])

        def emit(scenario: str, rs: list[PhaseRow], ags: list[AggregateRow]):
            for r in rs:
                for phase, delta, k, metric, value in r.as_records():
                    writer.writerow([scenario, phase, delta, k, metric, _fmt(value)])
                writer.writerow([scenario, r.phase, r.delta, r.k, "n_intervals", r.n_intervals])
                writer.writerow([scenario, r.phase, r.delta, r.k, "n_skips", r.n_skips])
            for a in ags:
                for metric in METRICS:
                    writer.writerow([scenario, "mean", a.delta, a.k, metric, _fmt(a.mean[metric])])
                for metric in METRICS:
                    writer.writerow([scenario, "std", a.delta, a.k, metric, _fmt(a.std[metric])])

        emit("base", rows, aggregates)
        if rows_cf:
            emit("counterfactual", rows_cf, aggregates_cf)
    return path


def write_values_csv(path: Path, cfg: RunConfig, sims) -> Path:
    """Per-day portfolio value paths, one row per (phase, delta, k, execution, day)."""
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(_config_stamp(cfg) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["phase", "delta", "k", "execution", "day", "value"])
        for phase, sim in sims:
            for day, value in zip(sim.value_days, sim.values):
                writer.writerow([phase, sim.delta, sim.k, sim.execution, day, _fmt(value)])
    return path


def write_attention_csv(path: Path, cfg: RunConfig, attention_rows) -> Path:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(_config_stamp(cfg) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["asset", "relation_type", "time_bucket", "layer", "mean_attention"])
        for ticker, rel, bucket, layer, weight in attention_rows:
            writer.writerow([ticker, rel, bucket, layer, _fmt(weight)])
    return path


def render_table(rows: list[PhaseRow], aggregates: list[AggregateRow], title: str = "") -> str:
    """Fixed-width per-(delta, k) summary with a mean +/- std footer."""
    lines = []
    if title:
        lines.append(title)
    cells = sorted({(r.delta, r.k) for r in rows})
    header = f"{'phase':>6} {'irr%':>10} {'airr%':>10} {'sharpe':>8} {'ndcg':>7} {'acc%':>7} {'best%':>10} {'worst%':>10}"
    for delta, k in cells:
        lines.append(f"[delta={delta} k={k}]")
        lines.append(header)
        for r in sorted((r for r in rows if (r.delta, r.k) == (delta, k)), key=lambda r: r.phase):
            sharpe = f"{r.sharpe:8.3f}" if r.sharpe is not None else f"{'--':>8}"
            lines.append(
                f"{r.phase:>6} {r.irr:10.3f} {r.airr:10.3f} {sharpe} "
                f"{r.ndcg:7.4f} {r.acc:7.2f} {r.irr_best:10.3f} {r.irr_worst:10.3f}"
            )
        agg = next(a for a in aggregates if (a.delta, a.k) == (delta, k))

        def cell(metric, fmt, width):
            m, s = agg.mean[metric], agg.std[metric]
            if m is None:
                return f"{'--':>{width}}"
            return f"{m:{width}{fmt}}"

        lines.append(
            f"{'mean':>6} {cell('irr', '.3f', 10)} {cell('airr', '.3f', 10)} "
            f"{cell('sharpe', '.3f', 8)} {cell('ndcg', '.4f', 7)} {cell('acc', '.2f', 7)} "
            f"{cell('irr_best', '.3f', 10)} {cell('irr_worst', '.3f', 10)}"
        )
        std = agg.std
        std_cells = []
        for metric, width, fmt in (
            ("irr", 10, ".3f"), ("airr", 10, ".3f"), ("sharpe", 8, ".3f"),
            ("ndcg", 7, ".4f"), ("acc", 7, ".2f"),
            ("irr_best", 10, ".3f"), ("irr_worst", 10, ".3f"),
        ):
            v = std[metric]
            std_cells.append(f"{'--':>{width}}" if v is None else f"{v:{width}{fmt}}")
        lines.append(f"{'std':>6} " + " ".join(std_cells))
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def render_figures(out_dir: Path, cfg: RunConfig, result) -> list[Path]:
    """Portfolio-value curves per (delta, k) and an aggregate AIRR bar chart."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    cells = sorted({(sim.delta, sim.k) for _, sim in result.sims})
    for delta, k in cells:
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for phase, sim in result.sims:
            if (sim.delta, sim.k, sim.execution) != (delta, k, "close"):
                continue
            ax.plot(sim.value_days, sim.values, lw=1.2, label=f"phase {phase}")
        ax.set_xlabel("trading day")
        ax.set_ylabel("portfolio value")
        ax.set_title(f"top-{k} portfolio, rebalanced every {delta}d ({cfg.variant})")
        if len({p for p, s in result.sims if (s.delta, s.k) == (delta, k)}) <= 8:
            ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
        path = out_dir / f"values_d{delta}_k{k}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    labels, means, stds = [], [], []
    for a in result.aggregates:
        labels.append(f"d={a.delta}\nk={a.k}")
        means.append(a.mean["airr"] if a.mean["airr"] is not None else 0.0)
        stds.append(a.std["airr"] if a.std["airr"] is not None else 0.0)
    x = range(len(labels))
    ax.bar(x, means, yerr=stds, capsize=4, color="#4878cf", label="base")
    if result.aggregates_cf:
        cf = {(a.delta, a.k): a for a in result.aggregates_cf}
        cf_means = [
            (cf[(a.delta, a.k)].mean["airr"] or 0.0) if (a.delta, a.k) in cf else 0.0
            for a in result.aggregates
        ]
        ax.bar(
            [i + 0.35 for i in x], cf_means, width=0.3,
            color="#d65f5f", label="counterfactual",
        )
        ax.legend(fontsize=8)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("AIRR %")
    ax.set_title(f"annualized return by horizon ({cfg.variant})")
    ax.grid(True, axis="y", alpha=0.3)
    path = out_dir / "summary_airr.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)
    return paths


def _row_dict(r: PhaseRow) -> dict:
    return {
        "phase": r.phase, "delta": r.delta, "k": r.k, "irr": r.irr, "airr": r.airr,
        "sharpe": r.sharpe, "ndcg": r.ndcg, "acc": r.acc,
        "irr_best": r.irr_best, "irr_worst": r.irr_worst,
        "n_intervals": r.n_intervals, "n_skips": r.n_skips,
    }


def _agg_dict(a: AggregateRow) -> dict:
    return {"delta": a.delta, "k": a.k, "mean": a.mean, "std": a.std, "n_phases": a.n_phases}


def write_all(out_dir: str | Path, cfg: RunConfig, result) -> dict[str, Path]:
    """Write the full artifact set for one backtest; returns path map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": write_metrics_csv(
            out / "metrics.csv", cfg, result.rows, result.aggregates,
            result.rows_cf, result.aggregates_cf,
        ),
        "values": write_values_csv(out / "values.csv", cfg, result.sims),
        "attention": write_attention_csv(out / "attention.csv", cfg, result.attention),
    }
    table = render_table(result.rows, result.aggregates, title=f"variant {cfg.variant}")
    if result.rows_cf:
        table += "\n" + render_table(
            result.rows_cf, result.aggregates_cf,
            title=f"counterfactual (removed: {', '.join(result.removed)})",
        )
    (out / "table.txt").write_text(table, encoding="utf-8")
    paths["table"] = out / "table.txt"
    figures = render_figures(out / "figures", cfg, result)
    report = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "rows": [_row_dict(r) for r in result.rows],
        "aggregates": [_agg_dict(a) for a in result.aggregates],
        "counterfactual": {
            "removed": list(result.removed),
            "rows": [_row_dict(r) for r in result.rows_cf],
            "aggregates": [_agg_dict(a) for a in result.aggregates_cf],
        },
        "attention_rows": len(result.attention),
        "figures": [p.name for p in figures],
    }
    (out / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    paths["report"] = out / "report.json"
    paths["figures"] = figures
    return paths

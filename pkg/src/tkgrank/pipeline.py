"""End-to-end drivers: ingest, event-embedding pretraining, phase training, backtest.

The dataset produced by ingest is the single input to both training and the
backtest: per-anchor-day normalized feature windows and forward returns for
every configured horizon, plus the graph archive the snapshots come from.
Every artifact directory written here embeds the resolved run config.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
import torch

from .backtest import (
    AggregateRow,
    PhaseRow,
    SimulationResult,
    aggregate,
    evaluate_ranking,
    phase_row,
    simulate,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, DataError, DivergenceError, IntegrityError
from .hawkes_embed import (
    EventHistoryIndex,
    HawkesEmbedding,
    HawkesTrainConfig,
    HawkesTrainResult,
    train_hawkes,
)
from .kg_store import TemporalKG, build_kg, expand_monthly, filter_relations, load_archive, save_archive
from .market_data import PhaseSpec, PriceSeries, load_price_dir, make_phases, make_window
from .ranker import LossConfig, ModelDims, RankingModel, TrainConfig, train_phase
from .relational_encoder import SELF_LOOP_NAME, GraphContext

log = logging.getLogger(__name__)

DATASET_FILE = "dataset.npz"
GRAPH_FILE = "graph.tkg"


# ---------------------------------------------------------------------------
# Ingested dataset
# ---------------------------------------------------------------------------


@dataclass
class IngestDataset:
    """Aligned window/label tensors over (anchor day, asset).

    ``features`` is (n_anchors, n_assets, window, 5) float32; ``returns`` and
    ``directions`` are (n_anchors, n_assets, n_deltas), with NaN / -1 marking
    horizons that run past the calendar. Raw close/low/high are kept for the
    trading simulation.
    """

    tickers: tuple[str, ...]
    names: tuple[str, ...]
    dates: tuple[date, ...]
    window: int
    deltas: tuple[int, ...]
    normalizer: str
    anchors: np.ndarray
    features: np.ndarray
    returns: np.ndarray
    directions: np.ndarray
    close: np.ndarray
    low: np.ndarray
    high: np.ndarray
    kg: TemporalKG | None = None

    def __post_init__(self):
        self._pos = {int(t): i for i, t in enumerate(self.anchors)}

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def delta_index(self, delta: int) -> int:
        try:
            return self.deltas.index(delta)
        except ValueError:
            raise ConfigError(
                f"horizon {delta} is not in the ingested set {self.deltas}"
            ) from None

    def anchors_in(self, start: int, stop: int) -> np.ndarray:
        """Anchor days in [start, stop) usable at every configured horizon."""
        horizon = max(self.deltas)
        t = self.anchors
        return t[(t >= start) & (t < stop) & (t + horizon < self.n_days)]

    def day_inputs(self, t: int, delta: int, ctx: GraphContext | None):
        """Tensors for one trading day: (windows, returns, directions, batch)."""
        if t not in self._pos:
            raise ValueError(f"day {t} is not an ingested anchor")
        if t + delta >= self.n_days:
            raise ValueError(f"day {t} has no {delta}-day forward return")
        pos = self._pos[t]
        j = self.delta_index(delta)
        windows = torch.from_numpy(self.features[pos])
        returns = torch.as_tensor(self.returns[pos, :, j], dtype=torch.float32)
        directions = torch.as_tensor(self.directions[pos, :, j], dtype=torch.float32)
        batch = ctx.batch_at(self.dates[t]) if ctx is not None else None
        return windows, returns, directions, batch


def build_ingest(
    series: list[PriceSeries],
    kg: TemporalKG | None,
    window: int,
    deltas: tuple[int, ...],
    normalizer: str = "pre_window",
) -> IngestDataset:
    if not series:
        raise DataError("no price series to ingest")
    calendar = series[0].dates
    for s in series[1:]:
        if s.dates != calendar:
            raise IntegrityError(
                f"price calendars are not aligned: {s.ticker} differs from {series[0].ticker}"
            )
    n_days = len(calendar)
    if n_days < window + 2:
        raise DataError(
            f"calendar has {n_days} days; need at least window+2 = {window + 2}"
        )
    anchors = np.arange(window, n_days - 1, dtype=np.int64)
    n_assets, n_anchors, n_deltas = len(series), len(anchors), len(deltas)
    features = np.empty((n_anchors, n_assets, window, 5), dtype=np.float32)
    returns = np.full((n_anchors, n_assets, n_deltas), np.nan)
    directions = np.full((n_anchors, n_assets, n_deltas), -1, dtype=np.int8)
    for i, s in enumerate(series):
        for a, t in enumerate(anchors):
            valid = tuple(d for d in deltas if t + d < n_days)
            win = make_window(s, int(t), window, valid, normalizer)
            features[a, i] = win.features
            for j, d in enumerate(deltas):
                if d in win.returns:
                    returns[a, i, j] = win.returns[d]
                    directions[a, i, j] = win.directions[d]
    stack = lambda attr: np.stack([getattr(s, attr) for s in series])
    return IngestDataset(
        tickers=tuple(s.ticker for s in series),
        names=tuple(s.name for s in series),
        dates=calendar,
        window=window,
        deltas=tuple(deltas),
        normalizer=normalizer,
        anchors=anchors,
        features=features,
        returns=returns,
        directions=directions,
        close=stack("close"),
        low=stack("low"),
        high=stack("high"),
        kg=kg,
    )


def save_ingest(ds: IngestDataset, out_dir: str | Path, config: RunConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {
        "anchors": ds.anchors,
        "features": ds.features,
        "returns": ds.returns,
        "directions": ds.directions,
        "close": ds.close,
        "low": ds.low,
        "high": ds.high,
    }
    meta = {
        "kind": "dataset",
        "tickers": list(ds.tickers),
        "names": list(ds.names),
        "dates": [d.isoformat() for d in ds.dates],
        "window": ds.window,
        "deltas": list(ds.deltas),
        "normalizer": ds.normalizer,
        "config": config.to_dict() if config is not None else None,
        "seed": config.seed if config is not None else None,
    }
    save_checkpoint(out / DATASET_FILE, arrays, meta)
    if ds.kg is not None:
        save_archive(ds.kg, out / GRAPH_FILE)
    return out


def load_ingest(dataset_dir: str | Path) -> IngestDataset:
    out = Path(dataset_dir)
    path = out / DATASET_FILE
    if not path.exists():
        raise DataError(f"no ingested dataset at {path} (run ingest first)")
    arrays, meta = load_checkpoint(path)
    graph = out / GRAPH_FILE
    kg = load_archive(graph) if graph.exists() else None
    return IngestDataset(
        tickers=tuple(meta["tickers"]),
        names=tuple(meta["names"]),
        dates=tuple(date.fromisoformat(d) for d in meta["dates"]),
        window=int(meta["window"]),
        deltas=tuple(int(d) for d in meta["deltas"]),
        normalizer=meta["normalizer"],
        anchors=arrays["anchors"],
        features=arrays["features"],
        returns=arrays["returns"],
        directions=arrays["directions"],
        close=arrays["close"],
        low=arrays["low"],
        high=arrays["high"],
        kg=kg,
    )


# ---------------------------------------------------------------------------
# Event-embedding pretraining over dense graph rows
# ---------------------------------------------------------------------------


def dense_type_pools(ctx: GraphContext) -> dict[str, np.ndarray]:
    pools: dict[str, list[int]] = {}
    for eid in ctx.entity_ids:
        pools.setdefault(ctx.kg.entities[eid].entity_type, []).append(ctx.row_of[eid])
    return {t: np.array(sorted(rows), dtype=np.int64) for t, rows in pools.items()}


def fit_hawkes(
    kg: TemporalKG,
    ctx: GraphContext,
    dim: int,
    cfg: HawkesTrainConfig,
    max_history: int = 32,
) -> tuple[HawkesEmbedding, EventHistoryIndex, HawkesTrainResult]:
    """Expand the graph into monthly events (remapped to dense rows) and fit."""
    events = [
        dataclasses.replace(ev, head=ctx.row_of[ev.head], tail=ctx.row_of[ev.tail])
        for ev in expand_monthly(kg)
    ]
    model = HawkesEmbedding(
        n_entities=ctx.n_nodes,
        n_relations=ctx.n_relations,
        dim=dim,
        max_history=max_history,
        seed=cfg.seed,
    )
    index = EventHistoryIndex(events, ctx.n_nodes)
    result = train_hawkes(model, events, dense_type_pools(ctx), cfg, index)
    return model, index, result


# ---------------------------------------------------------------------------
# Model construction and checkpoints
# ---------------------------------------------------------------------------


def model_dims(cfg: RunConfig) -> ModelDims:
    d = cfg.dims
    return ModelDims(
        d_s=d.d_s, d_tpp=d.d_tpp, d_r=d.d_r,
        seq_heads=d.seq_heads, seq_layers=d.seq_layers,
        rel_heads=d.rel_heads, rel_layers=d.rel_layers,
    )


def build_model(
    cfg: RunConfig,
    n_assets: int,
    ctx: GraphContext | None,
    node_tpp: np.ndarray | None = None,
    rel_tpp: np.ndarray | None = None,
) -> RankingModel:
    if cfg.variant == "FULL" and node_tpp is None:
        # Placeholder buffers; a checkpoint load will overwrite them.
        node_tpp = np.zeros((ctx.n_nodes, cfg.dims.d_tpp), dtype=np.float32)
        rel_tpp = np.zeros((ctx.n_relations, cfg.dims.d_tpp), dtype=np.float32)
    return RankingModel(
        cfg.variant,
        n_assets,
        model_dims(cfg),
        ctx=ctx if cfg.variant != "TRANSF" else None,
        hawkes_node_emb=node_tpp,
        hawkes_rel_emb=rel_tpp,
        pooling=cfg.training.pooling,
        seed=cfg.seed,
    )


def checkpoint_name(phase_index: int, delta: int) -> str:
    return f"p{phase_index:02d}_d{delta}.npz"


def save_model_checkpoint(path: Path, state: dict, meta: dict) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in state.items()}
    save_checkpoint(path, arrays, meta)


def load_model_checkpoint(path: Path, model: RankingModel) -> dict:
    if not path.exists():
        raise DataError(f"missing checkpoint {path} (run train first)")
    arrays, meta = load_checkpoint(path)
    state = {k: torch.as_tensor(v) for k, v in arrays.items()}
    model.load_state_dict(state)
    return meta


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def run_ingest(cfg: RunConfig) -> Path:
    if not cfg.paths.prices_dir:
        raise ConfigError("paths.prices_dir is required for ingest")
    series = load_price_dir(cfg.paths.prices_dir, min_rows=cfg.data.min_rows)
    if not series:
        raise DataError(f"no usable price files in {cfg.paths.prices_dir}")
    kg = None
    if cfg.paths.nodes or cfg.paths.relations:
        if not (cfg.paths.nodes and cfg.paths.relations):
            raise ConfigError("paths.nodes and paths.relations must be set together")
        kg = build_kg(cfg.paths.nodes, cfg.paths.relations)
    ds = build_ingest(series, kg, cfg.data.window, cfg.data.deltas, cfg.data.normalizer)
    out = save_ingest(ds, Path(cfg.paths.out_dir) / "dataset", config=cfg)
    log.info(
        "ingested %d assets x %d days -> %s", ds.n_assets, ds.n_days, out
    )
    return out


def _context_for(cfg: RunConfig, ds: IngestDataset) -> GraphContext | None:
    if cfg.variant == "TRANSF":
        return None
    if ds.kg is None:
        raise DataError(
            f"variant {cfg.variant} needs a graph; re-run ingest with paths.nodes/relations set"
        )
    return GraphContext(ds.kg, list(ds.tickers))


def _run_phases(cfg: RunConfig, n_days: int) -> list[PhaseSpec]:
    p = cfg.phases
    return make_phases(
        n_days, p.n_phases,
        train=p.train, val=p.val, test=p.test,
        stride=p.stride, first_train=p.first_train,
    )


def run_training(cfg: RunConfig) -> dict:
    """Fit one model per (phase, horizon); returns a summary dict.

    Writes ``checkpoints/`` plus a JSONL training log under the run's out
    directory. On divergence the last finite state is checkpointed before
    the error propagates.
    """
    out = Path(cfg.paths.out_dir)
    ds = load_ingest(out / "dataset")
    phases = _run_phases(cfg, ds.n_days)
    ctx = _context_for(cfg, ds)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")

    node_tpp = rel_tpp = None
    if cfg.variant == "FULL":
        h = cfg.hawkes
        hawkes_cfg = HawkesTrainConfig(
            lr=h.lr, epochs=h.epochs, negatives=h.negatives,
            margin=h.margin, batch_size=h.batch_size, seed=cfg.seed,
        )
        model_h, _, result_h = fit_hawkes(
            ds.kg, ctx, cfg.dims.d_tpp, hawkes_cfg, max_history=h.max_history
        )
        fitted = model_h.export_arrays()
        node_tpp, rel_tpp = fitted["node_emb"], fitted["rel_emb"]
        save_checkpoint(
            ckpt_dir / "hawkes.npz",
            fitted,
            {"kind": "hawkes", "epoch_losses": result_h.epoch_losses,
             "config": cfg.to_dict(), "seed": cfg.seed},
        )
        log.info("event embeddings fitted: %s epochs", len(result_h.epoch_losses))

    loss_cfg = LossConfig(
        alpha1=cfg.training.alpha1, alpha2=cfg.training.alpha2,
        alpha3=cfg.training.alpha3, alpha4=cfg.training.alpha4,
        temperature=cfg.training.temperature, k=cfg.training.k,
        rescale_bce=cfg.training.rescale_bce,
    )
    train_cfg = TrainConfig(
        lr=cfg.training.lr, epochs=cfg.training.epochs,
        momentum=cfg.training.momentum, seed=cfg.seed, val_k=cfg.training.val_k,
    )
    log_path = out / "train_log.jsonl"
    summary = {"variant": cfg.variant, "phases": len(phases), "cells": []}
    with log_path.open("w", encoding="utf-8") as log_file:
        for phase in phases:
            for delta in cfg.data.deltas:
                model = build_model(cfg, ds.n_assets, ctx, node_tpp, rel_tpp)
                meta = {
                    "kind": "model", "variant": cfg.variant,
                    "phase": phase.index, "delta": delta,
                    "config": cfg.to_dict(), "seed": cfg.seed,
                }
                try:
                    res = train_phase(model, ds, phase, delta, loss_cfg, train_cfg)
                except DivergenceError as err:
                    state = getattr(err, "last_state", None)
                    if state is not None:
                        meta["diverged"] = True
                        save_model_checkpoint(
                            ckpt_dir / ("DIVERGED_" + checkpoint_name(phase.index, delta)),
                            state, meta,
                        )
                    raise
                meta.update(best_epoch=res.best_epoch, best_val_ndcg=res.best_val_ndcg)
                save_model_checkpoint(
                    ckpt_dir / checkpoint_name(phase.index, delta),
                    model.state_dict(), meta,
                )
                row = {
                    "phase": phase.index, "delta": delta,
                    "best_epoch": res.best_epoch, "best_val_ndcg": res.best_val_ndcg,
                    "epoch_losses": res.epoch_losses, "val_ndcgs": res.val_ndcgs,
                }
                log_file.write(json.dumps(row, sort_keys=True) + "\n")
                summary["cells"].append(row)
                log.info(
                    "phase %d delta %d: best val NDCG %.4f at epoch %d",
                    phase.index, delta, res.best_val_ndcg, res.best_epoch,
                )
    return summary


# ---------------------------------------------------------------------------
# Backtest
# ---------------------------------------------------------------------------


@dataclass
class AttentionStats:
    """Mean attention per (asset, relation type, time bucket, layer)."""

    sums: dict[tuple, float] = field(default_factory=dict)
    counts: dict[tuple, int] = field(default_factory=dict)

    def add(self, key: tuple, weight: float) -> None:
        self.sums[key] = self.sums.get(key, 0.0) + weight
        self.counts[key] = self.counts.get(key, 0) + 1

    def rows(self) -> list[tuple]:
        out = []
        for key in sorted(self.sums):
            ticker, rel, bucket, layer = key
            out.append((ticker, rel, bucket, layer, self.sums[key] / self.counts[key]))
        return out


def _accumulate_attention(
    stats: AttentionStats,
    report,
    batch,
    ctx: GraphContext,
    tickers: tuple[str, ...],
) -> None:
    row_ticker = {int(r): t for r, t in zip(ctx.asset_rows, tickers)}
    dst = batch.dst.numpy()
    rel = batch.rel.numpy()
    real = batch.real.numpy()
    names = ctx.kg.relation_types
    for layer, alpha in enumerate(report.layers):
        weight = alpha.mean(axis=1)  # average heads
        for e in range(len(dst)):
            ticker = row_ticker.get(int(dst[e]))
            if ticker is None:
                continue
            rel_name = names[int(rel[e])] if real[e] else SELF_LOOP_NAME
            stats.add((ticker, rel_name, batch.time_bucket[e], layer), float(weight[e]))


@dataclass
class BacktestResult:
    rows: list[PhaseRow]
    aggregates: list[AggregateRow]
    sims: list[tuple[int, SimulationResult]]  # (phase, sim)
    attention: list[tuple]
    rows_cf: list[PhaseRow] = field(default_factory=list)
    aggregates_cf: list[AggregateRow] = field(default_factory=list)
    removed: tuple[str, ...] = ()


def _risk_free_interval(cfg: RunConfig, phase_index: int, delta: int) -> float:
    rf = cfg.backtest.risk_free
    annual = rf[phase_index] if isinstance(rf, tuple) else rf
    return (1.0 + annual / 100.0) ** (delta / 252.0) - 1.0


def _phase_predictions(
    model: RankingModel,
    ds: IngestDataset,
    ctx: GraphContext | None,
    phase: PhaseSpec,
    delta: int,
    stats: AttentionStats | None,
    tickers: tuple[str, ...],
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    predictions: dict[int, np.ndarray] = {}
    realized: dict[int, np.ndarray] = {}
    start, end = phase.test
    j = ds.delta_index(delta)
    with torch.no_grad():
        for t in range(start, end, delta):
            if t + delta >= ds.n_days:
                break
            windows, returns, _, batch = ds.day_inputs(t, delta, ctx)
            probs, report = model.forward(windows, batch)
            predictions[t] = probs.numpy().copy()
            realized[t] = returns.numpy().copy()
            if stats is not None and report is not None:
                _accumulate_attention(stats, report, batch, ctx, tickers)
    return predictions, realized


def _collect_rows(
    cfg: RunConfig,
    ds: IngestDataset,
    ctx: GraphContext | None,
    phases: list[PhaseSpec],
    ckpt_dir: Path,
    stats: AttentionStats | None,
) -> tuple[list[PhaseRow], list[tuple[int, SimulationResult]]]:
    rows: list[PhaseRow] = []
    sims: list[tuple[int, SimulationResult]] = []
    for phase in phases:
        for delta in cfg.data.deltas:
            model = build_model(cfg, ds.n_assets, ctx)
            load_model_checkpoint(ckpt_dir / checkpoint_name(phase.index, delta), model)
            model.eval()
            predictions, realized = _phase_predictions(
                model, ds, ctx, phase, delta, stats, ds.tickers
            )
            start, end = phase.test
            rf = _risk_free_interval(cfg, phase.index, delta)
            for k in cfg.backtest.ks:
                by_exec = {
                    ex: simulate(
                        predictions, ds.close, ds.low, ds.high,
                        start, end, delta, k, execution=ex,
                    )
                    for ex in ("close", "best", "worst")
                }
                quality = evaluate_ranking(
                    predictions, realized, start, end, delta, k,
                    graded=cfg.backtest.graded_relevance,
                )
                rows.append(
                    phase_row(
                        phase.index, by_exec["close"], by_exec["best"],
                        by_exec["worst"], quality, risk_free_per_interval=rf,
                    )
                )
                for sim in by_exec.values():
                    sims.append((phase.index, sim))
    return rows, sims


def run_backtest(cfg: RunConfig) -> BacktestResult:
    """Score every (phase, horizon, k) cell from saved checkpoints.

    When counterfactual relation types are configured the whole sweep runs a
    second time on the filtered graph with the same checkpoints, so the two
    scenarios differ only in which graph facts the model sees.
    """
    out = Path(cfg.paths.out_dir)
    ds = load_ingest(out / "dataset")
    if cfg.backtest.counterfactual_remove:
        if cfg.variant == "TRANSF":
            raise ConfigError("counterfactual removal has no effect on the graph-free variant")
        if ds.kg is None:
            raise DataError("counterfactual removal needs a graph in the dataset")
    phases = _run_phases(cfg, ds.n_days)
    ctx = _context_for(cfg, ds)
    ckpt_dir = out / "checkpoints"
    stats = AttentionStats() if ctx is not None else None
    rows, sims = _collect_rows(cfg, ds, ctx, phases, ckpt_dir, stats)
    result = BacktestResult(
        rows=rows,
        aggregates=aggregate(rows),
        sims=sims,
        attention=stats.rows() if stats is not None else [],
        removed=tuple(cfg.backtest.counterfactual_remove),
    )
    if cfg.backtest.counterfactual_remove:
        kg_cf = filter_relations(ds.kg, cfg.backtest.counterfactual_remove)
        ctx_cf = GraphContext(kg_cf, list(ds.tickers))
        rows_cf, _ = _collect_rows(cfg, ds_with_kg(ds, kg_cf), ctx_cf, phases, ckpt_dir, None)
        result.rows_cf = rows_cf
        result.aggregates_cf = aggregate(rows_cf)
    return result


def ds_with_kg(ds: IngestDataset, kg: TemporalKG) -> IngestDataset:
    return dataclasses.replace(ds, kg=kg)

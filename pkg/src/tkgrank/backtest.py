"""Backtest metrics and the walk-forward portfolio simulation.

Per phase and horizon the portfolio rebalances on a stride-``delta`` grid of
test days into the k top-scored assets, equally weighted, and compounds
interval returns. Three execution assumptions bound the result: "close"
(buy/sell at closes), "best" (buy the low, sell the high), and "worst" (buy
the high, sell the low). Ranking quality is scored on the same grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

EXECUTIONS = ("close", "best", "worst")
TRADING_DAYS_PER_YEAR = 252


def irr(initial: float, final: float) -> float:
    """Cumulative return of a value path, in percent."""
    if initial <= 0:
        raise ValueError(f"initial value must be positive, got {initial}")
    return (final - initial) / initial * 100.0


def airr(irr_pct: float, delta: int, periods_per_year: float = TRADING_DAYS_PER_YEAR) -> float:
    """Annualized IRR: compounds a per-delta-days return to a year, in percent."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    roi = irr_pct / 100.0
    if 1.0 + roi <= 0:
        raise ValueError(f"IRR {irr_pct}% implies a non-positive value ratio")
    return ((1.0 + roi) ** (periods_per_year / delta) - 1.0) * 100.0


def sharpe(returns, risk_free: float = 0.0) -> float | None:
    """(mean - risk_free) / sample std of per-interval returns.

    Returns None (reported as missing, never 0) when the deviation is zero
    or fewer than two intervals exist.
    """
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        return None
    sd = float(r.std(ddof=1))
    if sd == 0.0:
        return None
    return (float(r.mean()) - risk_free) / sd


def dcg_at_k(relevance_in_rank_order: np.ndarray, k: int) -> float:
    rel = np.asarray(relevance_in_rank_order, dtype=float)[:k]
    return float((rel / np.log2(np.arange(len(rel)) + 2.0)).sum())


def ndcg_at_k(order: np.ndarray, relevance: np.ndarray, k: int) -> float:
    """NDCG of ``order`` (asset indices, best first) against per-asset relevance.

    Linear gains. Returns 0 when the ideal DCG is zero.
    """
    relevance = np.asarray(relevance, dtype=float)
    order = np.asarray(order, dtype=int)
    if len(order) != len(relevance):
        raise ValueError("order and relevance must have equal length")
    ideal = dcg_at_k(np.sort(relevance)[::-1], k)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(relevance[order], k) / ideal


def acc_at_k(predicted_topk, true_topk) -> float:
    """Overlap of predicted and true top-k sets, in percent of k."""
    pred, true = set(predicted_topk), set(true_topk)
    if len(pred) != len(true):
        raise ValueError(f"set sizes differ: {len(pred)} vs {len(true)}")
    if not true:
        raise ValueError("k must be at least 1")
    return len(pred & true) / len(true) * 100.0


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties toward the lower index."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(len(scores)), -scores))


@dataclass
class SimulationResult:
    execution: str
    delta: int
    k: int
    interval_returns: list[float] = field(default_factory=list)
    value_days: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    skips: list[tuple[int, int]] = field(default_factory=list)

    @property
    def final_value(self) -> float:
        return self.values[-1] if self.values else 1.0

    @property
    def irr(self) -> float:
        return irr(1.0, self.final_value)


def simulate(
    predictions: dict[int, np.ndarray],
    close: np.ndarray,
    low: np.ndarray,
    high: np.ndarray,
    start: int,
    end: int,
    delta: int,
    k: int,
    execution: str = "close",
) -> SimulationResult:
    """Compound an equal-weight top-k portfolio over one test span.

    ``predictions`` maps rebalance day -> per-asset scores; price arrays are
    (n_assets, n_days). Rebalance days run from ``start`` in steps of
    ``delta`` while inside [start, end) with the sell day in bounds. An
    asset with a non-finite buy or sell price is skipped with its weight
    renormalized over the remaining picks (logged); an interval with no
    tradable pick contributes zero return.
    """
    if execution not in EXECUTIONS:
        raise ValueError(f"unknown execution {execution!r}; expected one of {EXECUTIONS}")
    if delta < 1 or k < 1:
        raise ValueError("delta and k must be >= 1")
    n_days = close.shape[1]
    result = SimulationResult(execution=execution, delta=delta, k=k)
    value = 1.0
    result.value_days.append(start)
    result.values.append(value)
    for t in range(start, end, delta):
        if t + delta >= n_days:
            break
        if t not in predictions:
            raise KeyError(f"no predictions for rebalance day {t}")
        picks = rank_order(predictions[t])[:k]
        if execution == "close":
            buy, sell = close[picks, t], close[picks, t + delta]
        elif execution == "best":
            buy, sell = low[picks, t], high[picks, t + delta]
        else:
            buy, sell = high[picks, t], low[picks, t + delta]
        ok = np.isfinite(buy) & np.isfinite(sell) & (buy > 0)
        for asset in picks[~ok]:
            result.skips.append((t, int(asset)))
            log.warning("day %d: skipping asset %d (missing price)", t, asset)
        if ok.any():
            r = float(((sell[ok] - buy[ok]) / buy[ok]).mean())
        else:
            r = 0.0
        value *= 1.0 + r
        result.interval_returns.append(r)
        result.value_days.append(t + delta)
        result.values.append(value)
    return result


@dataclass
class RankingQuality:
    delta: int
    k: int
    ndcg: float
    acc: float
    n_days: int


def evaluate_ranking(
    predictions: dict[int, np.ndarray],
    realized: dict[int, np.ndarray],
    start: int,
    end: int,
    delta: int,
    k: int,
    graded: bool = False,
) -> RankingQuality:
    """Average NDCG@k and ACC@k over the rebalance grid.

    Relevance is binary top-k membership by realized return; ``graded=True``
    uses max(return, 0) as relevance instead.
    """
    from .market_data import make_topk_labels

    ndcgs, accs = [], []
    for t in range(start, end, delta):
        if t not in realized:
            break
        scores, rets = predictions[t], realized[t]
        order = rank_order(scores)
        true_top = set(np.flatnonzero(make_topk_labels(rets, k)).tolist())
        if graded:
            relevance = np.maximum(rets, 0.0)
        else:
            relevance = make_topk_labels(rets, k).astype(float)
        ndcgs.append(ndcg_at_k(order, relevance, k))
        accs.append(acc_at_k(order[:k].tolist(), true_top))
    return RankingQuality(
        delta=delta, k=k,
        ndcg=float(np.mean(ndcgs)) if ndcgs else float("nan"),
        acc=float(np.mean(accs)) if accs else float("nan"),
        n_days=len(ndcgs),
    )


@dataclass
class PhaseRow:
    """All reported numbers for one (phase, delta, k) cell."""

    phase: int
    delta: int
    k: int
    irr: float
    airr: float
    sharpe: float | None
    ndcg: float
    acc: float
    irr_best: float
    irr_worst: float
    n_intervals: int
    n_skips: int

    def as_records(self) -> list[tuple]:
        out = []
        for metric in ("irr", "airr", "sharpe", "ndcg", "acc", "irr_best", "irr_worst"):
            out.append((str(self.phase), self.delta, self.k, metric, getattr(self, metric)))
        return out


def phase_row(
    phase_index: int,
    sim_close: SimulationResult,
    sim_best: SimulationResult,
    sim_worst: SimulationResult,
    quality: RankingQuality,
    risk_free_per_interval: float = 0.0,
) -> PhaseRow:
    return PhaseRow(
        phase=phase_index,
        delta=sim_close.delta,
        k=sim_close.k,
        irr=sim_close.irr,
        airr=airr(sim_close.irr, sim_close.delta),
        sharpe=sharpe(sim_close.interval_returns, risk_free_per_interval),
        ndcg=quality.ndcg,
        acc=quality.acc,
        irr_best=sim_best.irr,
        irr_worst=sim_worst.irr,
        n_intervals=len(sim_close.interval_returns),
        n_skips=len(sim_close.skips),
    )


@dataclass
class AggregateRow:
    delta: int
    k: int
    mean: dict[str, float | None]
    std: dict[str, float | None]
    n_phases: int


def aggregate(rows: list[PhaseRow]) -> list[AggregateRow]:
    """Mean and sample std across phases per (delta, k) cell.

    The mean AIRR is the annualization of the mean IRR so every reported row
    stays internally consistent; the std is taken over per-phase AIRRs.
    Sharpe cells with missing values are averaged over the present ones, and
    a single phase yields missing stds.
    """
    out = []
    cells = sorted({(r.delta, r.k) for r in rows})
    for delta, k in cells:
        group = [r for r in rows if (r.delta, r.k) == (delta, k)]
        mean: dict[str, float | None] = {}
        std: dict[str, float | None] = {}
        for metric in ("irr", "airr", "sharpe", "ndcg", "acc", "irr_best", "irr_worst"):
            vals = [getattr(r, metric) for r in group]
            vals = [v for v in vals if v is not None and not math.isnan(v)]
            if not vals:
                mean[metric], std[metric] = None, None
                continue
            mean[metric] = float(np.mean(vals))
            std[metric] = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
        if mean["irr"] is not None:
            mean["airr"] = airr(mean["irr"], delta)
        out.append(AggregateRow(delta=delta, k=k, mean=mean, std=std, n_phases=len(group)))
    return out

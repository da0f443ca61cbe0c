"""Synthetic market + graph generator with planted, dated event effects.

Prices follow seeded log-return random walks. A planted rule ties a relation
type to a return effect: while an event of that type is valid for an asset,
the asset's expected log-return over the following days is shifted by the
rule's effect size. Events are scheduled in back-to-back slots, one asset at
a time in seeded rotation, so each day has exactly one active planted event
(until rules are exhausted by the calendar). The graph also carries static
sector membership facts; corrupting an event's tail therefore usually lands
outside the head sector, which is what event-embedding training must learn
to separate.

Every output directory embeds the generating config and seed in a manifest.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError

SECTOR_RELATION = "SECTOR_OF"
NOISE_RELATION = "NEWS_MENTION"


@dataclass(frozen=True)
class PlantedRule:
    """Relation type -> future-return effect: while an event of this type is
    active on an asset, the asset's next ``lag`` daily log-returns shift by
    ``effect`` each."""

    relation: str = "POSITIVE_CATALYST"
    effect: float = 0.01
    lag: int = 5


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_assets: int = 20
    n_days: int = 800
    n_sectors: int = 10
    start: str = "2015-01-05"
    drift: float = 0.0002
    noise: float = 0.001
    base_price: float = 100.0
    rules: tuple[PlantedRule, ...] = (PlantedRule(),)
    n_noise_events: int = 0

    def validate(self) -> None:
        if self.n_assets < 2:
            raise ConfigError("n_assets must be >= 2")
        if self.n_days < 10:
            raise ConfigError("n_days must be >= 10")
        if not 1 <= self.n_sectors <= self.n_assets:
            raise ConfigError("n_sectors must be in [1, n_assets]")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        for rule in self.rules:
            if rule.lag < 1:
                raise ConfigError(f"rule {rule.relation}: lag must be >= 1")


@dataclass(frozen=True)
class PlantedEvent:
    rule: PlantedRule
    asset: int
    start_day: int  # first day the relation is valid (day index)

    @property
    def end_day(self) -> int:  # exclusive
        return self.start_day + self.rule.lag


@dataclass
class SynthData:
    config: SynthConfig
    tickers: list[str]
    sectors: list[int]
    dates: list[date]
    prices: np.ndarray  # (n_assets, n_days, 5) OHLCV
    events: list[PlantedEvent] = field(default_factory=list)


def ticker_of(i: int) -> str:
    return f"SYN{i:03d}"


def schedule_events(config: SynthConfig, rng: np.random.Generator) -> list[PlantedEvent]:
    """Back-to-back slots; the active asset rotates in seeded shuffles."""
    if not config.rules:
        return []
    events = []
    t = 1  # day 0 has no prior close, start effects after it
    slot = 0
    order: list[int] = []
    while True:
        rule = config.rules[slot % len(config.rules)]
        if t + rule.lag > config.n_days:
            break
        if not order:
            order = [int(a) for a in rng.permutation(config.n_assets)]
        events.append(PlantedEvent(rule=rule, asset=order.pop(), start_day=t))
        t += rule.lag
        slot += 1
    return events


def build(config: SynthConfig) -> SynthData:
    """Generate prices and the event schedule (no files written)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, d = config.n_assets, config.n_days
    dates = [ts.date() for ts in pd.bdate_range(config.start, periods=d)]
    sectors = [i % config.n_sectors for i in range(n)]
    events = schedule_events(config, rng)

    log_returns = config.drift + config.noise * rng.standard_normal((n, d))
    for ev in events:
        # Validity on days [start_day, end_day) boosts the returns realized
        # on days (start_day, end_day], keeping the signal strictly forward.
        for day in range(ev.start_day + 1, min(ev.end_day + 1, d)):
            log_returns[ev.asset, day] += ev.rule.effect
    log_returns[:, 0] = 0.0
    close = config.base_price * np.exp(np.cumsum(log_returns, axis=1)) \
        * (1.0 + 0.01 * np.arange(n))[:, None]

    open_ = np.empty_like(close)
    open_[:, 0] = close[:, 0]
    open_[:, 1:] = close[:, :-1]
    spread = np.abs(rng.standard_normal((n, d))) * config.noise
    high = np.maximum(open_, close) * (1.0 + spread)
    low = np.minimum(open_, close) / (1.0 + spread)
    volume = np.round(np.exp(rng.normal(12.0, 0.1, size=(n, d))))

    prices = np.stack([open_, high, low, close, volume], axis=-1)
    return SynthData(
        config=config,
        tickers=[ticker_of(i) for i in range(n)],
        sectors=sectors,
        dates=dates,
        prices=prices,
        events=events,
    )


def _json_default(o):
    if isinstance(o, (PlantedRule,)):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serializable: {o!r}")


def write_dataset(data: SynthData, out_dir: str | Path) -> dict[str, str]:
    """Write price CSVs, node/relation JSON, and the config manifest.

    Byte-identical across runs for the same config (fixed float formats).
    """
    out = Path(out_dir)
    prices_dir = out / "prices"
    prices_dir.mkdir(parents=True, exist_ok=True)
    cfg = data.config
    n, d = cfg.n_assets, cfg.n_days

    for i, ticker in enumerate(data.tickers):
        path = prices_dir / f"{ticker}-Synthetic Asset {i:03d}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("Date,Open,High,Low,Close,Volume\n")
            for t in range(d):
                o, h, l, c, v = data.prices[i, t]
                fh.write(
                    f"{data.dates[t].isoformat()},{o:.6f},{h:.6f},{l:.6f},{c:.6f},{int(v)}\n"
                )

    nodes_path = out / "nodes.json"
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for i, ticker in enumerate(data.tickers):
            rec = {"n": {"identity": i, "labels": ["Company"],
                         "properties": {"name": ticker, "id": i},
                         "elementId": str(i)}}
            fh.write(json.dumps(rec) + "\n")
        for s in range(cfg.n_sectors):
            rec = {"n": {"identity": n + s, "labels": ["Sector"],
                         "properties": {"name": f"Sector {s:02d}", "id": n + s},
                         "elementId": str(n + s)}}
            fh.write(json.dumps(rec) + "\n")

    relations_path = out / "relations.json"
    rng = np.random.default_rng(cfg.seed + 1)
    with open(relations_path, "w", encoding="utf-8") as fh:
        rid = 0

        def emit(start: int, end: int, rtype: str, props: dict) -> None:
            nonlocal rid
            rec = {"r": {"identity": rid, "start": start, "end": end,
                         "type": rtype, "properties": props,
                         "elementId": str(rid),
                         "startNodeElementId": str(start),
                         "endNodeElementId": str(end)}}
            fh.write(json.dumps(rec) + "\n")
            rid += 1

        for i in range(n):
            emit(n + data.sectors[i], i, SECTOR_RELATION, {"id": f"S{data.sectors[i]:02d}"})
        for ev in data.events:
            valid_from = data.dates[ev.start_day]
            valid_to = data.dates[min(ev.end_day - 1, d - 1)] + timedelta(days=1)
            emit(
                n + data.sectors[ev.asset], ev.asset, ev.rule.relation,
                {"id": f"E{ev.start_day}", "timestamp": valid_from.isoformat(),
                 "expiry": valid_to.isoformat()},
            )
        for _ in range(cfg.n_noise_events):
            a, b = rng.choice(n, size=2, replace=False)
            day = int(rng.integers(1, d))
            emit(int(a), int(b), NOISE_RELATION,
                 {"id": f"N{day}", "timestamp": data.dates[day].isoformat()})

    manifest_path = out / "manifest.json"
    manifest = {
        "generator": "tkgrank.synth",
        "seed": cfg.seed,
        "config": json.loads(json.dumps(dataclasses.asdict(cfg), default=_json_default)),
        "events": [
            {"relation": ev.rule.relation, "asset": ev.asset,
             "start_day": ev.start_day, "end_day": ev.end_day}
            for ev in data.events
        ],
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {
        "prices_dir": str(prices_dir),
        "nodes": str(nodes_path),
        "relations": str(relations_path),
        "manifest": str(manifest_path),
    }


def generate(config: SynthConfig, out_dir: str | Path) -> SynthData:
    data = build(config)
    write_dataset(data, out_dir)
    return data

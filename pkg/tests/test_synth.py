"""Synthetic dataset generator tests.

The generator's contract: seeded byte-identical output, an event schedule
with exactly one active planted event per day, return boosts strictly after
the event becomes valid, and files that round-trip through the graph and
price loaders.
"""

from __future__ import annotations

import json
from datetime import timedelta
from pathlib import Path

import numpy as np
import pytest

from tkgrank.errors import ConfigError
from tkgrank.kg_store import build_kg
from tkgrank.market_data import load_price_dir
from tkgrank.synth import (
    NOISE_RELATION,
    SECTOR_RELATION,
    PlantedRule,
    SynthConfig,
    build,
    generate,
    schedule_events,
    ticker_of,
    write_dataset,
)

SMALL = SynthConfig(seed=7, n_assets=6, n_days=40, n_sectors=3)


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs, message",
        [
            ({"n_assets": 1}, "n_assets"),
            ({"n_days": 9}, "n_days"),
            ({"n_sectors": 0}, "n_sectors"),
            ({"n_sectors": 7, "n_assets": 6}, "n_sectors"),
            ({"noise": -0.1}, "noise"),
            ({"rules": (PlantedRule(lag=0),)}, "lag"),
        ],
    )
    def test_rejections(self, kwargs, message):
        with pytest.raises(ConfigError, match=message):
            SynthConfig(**{**{"n_assets": 6, "n_sectors": 3}, **kwargs}).validate()

    def test_defaults_valid(self):
        SynthConfig().validate()


class TestSchedule:
    def test_back_to_back_slots(self):
        events = schedule_events(SMALL, np.random.default_rng(0))
        assert events[0].start_day == 1
        for prev, nxt in zip(events, events[1:]):
            assert nxt.start_day == prev.end_day
        assert events[-1].end_day <= SMALL.n_days
        # One more slot would not have fit.
        assert events[-1].end_day + events[-1].rule.lag > SMALL.n_days

    def test_rotation_covers_all_assets(self):
        config = SynthConfig(seed=7, n_assets=6, n_days=40, n_sectors=3,
                             rules=(PlantedRule(lag=1),))
        events = schedule_events(config, np.random.default_rng(0))
        n = config.n_assets
        assert len(events) == 39  # one per day from day 1
        for block in range(2):
            chunk = [ev.asset for ev in events[block * n : (block + 1) * n]]
            assert sorted(chunk) == list(range(n))

    def test_rules_alternate(self):
        rules = (PlantedRule("A", 0.01, 2), PlantedRule("B", 0.02, 3))
        config = SynthConfig(seed=7, n_assets=6, n_days=40, n_sectors=3, rules=rules)
        events = schedule_events(config, np.random.default_rng(0))
        assert [ev.rule.relation for ev in events[:4]] == ["A", "B", "A", "B"]
        assert [ev.start_day for ev in events[:4]] == [1, 3, 6, 8]

    def test_no_rules(self):
        config = SynthConfig(seed=7, n_assets=6, n_days=40, n_sectors=3, rules=())
        assert schedule_events(config, np.random.default_rng(0)) == []


class TestBuild:
    def test_shapes_and_calendar(self):
        data = build(SMALL)
        assert data.prices.shape == (6, 40, 5)
        assert len(data.dates) == 40
        assert data.tickers == [ticker_of(i) for i in range(6)]
        assert data.sectors == [i % 3 for i in range(6)]
        # Business-day calendar: strictly increasing, never a weekend.
        assert all(b > a for a, b in zip(data.dates, data.dates[1:]))
        assert all(day.weekday() < 5 for day in data.dates)

    def test_base_prices_on_day_zero(self):
        data = build(SMALL)
        want = SMALL.base_price * (1.0 + 0.01 * np.arange(6))
        np.testing.assert_allclose(data.prices[:, 0, 3], want, rtol=1e-12)

    def test_planted_effect_is_strictly_forward(self):
        # With zero drift and noise the only return movement is the planted
        # boost, realized on the lag days *after* the event becomes valid.
        config = SynthConfig(
            seed=3, n_assets=4, n_days=30, n_sectors=2, drift=0.0, noise=0.0,
            rules=(PlantedRule("CAT", effect=0.01, lag=3),),
        )
        data = build(config)
        close = data.prices[:, :, 3]
        ratios = close[:, 1:] / close[:, :-1]
        boosted = np.zeros((4, 30), dtype=bool)
        for ev in data.events:
            for day in range(ev.start_day + 1, min(ev.end_day + 1, 30)):
                boosted[ev.asset, day] = True
            # No movement on the validity start day itself.
            assert not boosted[ev.asset, ev.start_day]
        np.testing.assert_allclose(
            ratios[boosted[:, 1:]], np.exp(0.01), rtol=1e-12
        )
        np.testing.assert_allclose(ratios[~boosted[:, 1:]], 1.0, rtol=1e-12)

    def test_ohlc_consistency(self):
        data = build(SMALL)
        o, h, l, c, v = (data.prices[:, :, j] for j in range(5))
        assert np.all(h >= np.maximum(o, c) - 1e-12)
        assert np.all(l <= np.minimum(o, c) + 1e-12)
        assert np.all(l > 0)
        np.testing.assert_allclose(o[:, 1:], c[:, :-1], rtol=1e-12)
        assert np.all(v >= 1)
        np.testing.assert_allclose(v, np.round(v))

    def test_seed_controls_prices(self):
        a = build(SMALL)
        b = build(SMALL)
        c = build(SynthConfig(seed=8, n_assets=6, n_days=40, n_sectors=3))
        np.testing.assert_array_equal(a.prices, b.prices)
        assert not np.array_equal(a.prices, c.prices)


@pytest.fixture(scope="module")
def out(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    config = SynthConfig(seed=7, n_assets=6, n_days=40, n_sectors=3,
                         n_noise_events=5)
    data = generate(config, root)
    return config, data, root


class TestWriteDataset:
    def test_byte_identical_rerun(self, out, tmp_path):
        config, _, root = out
        generate(config, tmp_path)
        files_a = sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (root / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel

    def test_prices_roundtrip_through_loader(self, out):
        config, data, root = out
        series = load_price_dir(root / "prices", min_rows=10)
        assert [s.ticker for s in series] == data.tickers
        for i, s in enumerate(series):
            assert s.name == f"Synthetic Asset {i:03d}"
            assert list(s.dates) == data.dates
            # CSVs carry 6 decimals.
            np.testing.assert_allclose(
                s.values[:, 3], data.prices[i, :, 3], atol=5e-7
            )

    def test_graph_roundtrip_through_loader(self, out):
        config, data, root = out
        kg = build_kg(root / "nodes.json", root / "relations.json")
        labels = [kg.entities[i].labels for i in sorted(kg.entities)]
        assert labels == [("Company",)] * 6 + [("Sector",)] * 3
        names = {SECTOR_RELATION, config.rules[0].relation, NOISE_RELATION}
        assert set(kg.relation_types.values()) == names

        type_ids = kg.relation_type_ids
        sector_rels = [r for r in kg.relations
                       if r.relation_type == type_ids[SECTOR_RELATION]]
        assert len(sector_rels) == 6
        for rel in sector_rels:
            # Sector -> company, static validity sentinels.
            assert kg.entities[rel.head].labels == ("Sector",)
            assert rel.head == 6 + data.sectors[rel.tail]
            assert rel.valid_from.year == 1970 and rel.valid_to.year == 9999

    def test_planted_event_intervals(self, out):
        config, data, root = out
        kg = build_kg(root / "nodes.json", root / "relations.json")
        rid = kg.relation_type_ids[config.rules[0].relation]
        planted = [r for r in kg.relations if r.relation_type == rid]
        assert len(planted) == len(data.events)
        for rel, ev in zip(planted, data.events):
            assert rel.tail == ev.asset
            assert rel.head == 6 + data.sectors[ev.asset]
            assert rel.valid_from == data.dates[ev.start_day]
            last_valid = data.dates[min(ev.end_day - 1, config.n_days - 1)]
            assert rel.valid_to == last_valid + timedelta(days=1)

    def test_noise_events(self, out):
        config, data, root = out
        kg = build_kg(root / "nodes.json", root / "relations.json")
        rid = kg.relation_type_ids[NOISE_RELATION]
        noise = [r for r in kg.relations if r.relation_type == rid]
        assert len(noise) == 5
        for rel in noise:
            assert rel.head < 6 and rel.tail < 6 and rel.head != rel.tail
            # Timestamp-only records get one-day validity.
            assert rel.valid_to == rel.valid_from + timedelta(days=1)

    def test_manifest_contents(self, out):
        config, data, root = out
        manifest = json.loads((root / "manifest.json").read_text())
        assert manifest["seed"] == 7
        assert manifest["config"]["n_assets"] == 6
        assert manifest["config"]["rules"][0]["relation"] == config.rules[0].relation
        assert len(manifest["events"]) == len(data.events)
        first = manifest["events"][0]
        assert first == {
            "relation": data.events[0].rule.relation,
            "asset": data.events[0].asset,
            "start_day": data.events[0].start_day,
            "end_day": data.events[0].end_day,
        }

    def test_write_returns_paths(self, out, tmp_path):
        config, data, _ = out
        paths = write_dataset(data, tmp_path / "w")
        assert set(paths) == {"prices_dir", "nodes", "relations", "manifest"}
        for p in paths.values():
            assert Path(p).exists()

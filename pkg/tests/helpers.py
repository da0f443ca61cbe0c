"""Shared fixtures-in-code: builders, writers, and the numeric grad checker."""

from __future__ import annotations

import json
import math
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import torch

from tkgrank.kg_store import Entity, RelationInstance, TemporalKG

DAY = timedelta(days=1)


# ---------------------------------------------------------------------------
# Graph builders
# ---------------------------------------------------------------------------


def ent(i: int, label: str = "Company", name: str = "") -> Entity:
    return Entity(id=i, labels=(label,), name=name or f"E{i}")


def toy_kg(relations=None, n_entities: int = 4, types=("KNOWS",)) -> TemporalKG:
    entities = {i: ent(i) for i in range(n_entities)}
    return TemporalKG(
        entities=entities,
        relations=tuple(relations or ()),
        relation_types={i: t for i, t in enumerate(types)},
    )


def rel(head, tail, rtype, valid_from, valid_to) -> RelationInstance:
    return RelationInstance(
        head=head, tail=tail, relation_type=rtype,
        valid_from=valid_from, valid_to=valid_to,
    )


def write_jsonl(path: Path, records: list[dict]) -> Path:
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Price-file writers
# ---------------------------------------------------------------------------


def trading_dates(n: int, start: date = date(2015, 1, 5)) -> list[date]:
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += DAY
    return out


def write_price_csv(path: Path, closes, dates=None, volume=1000) -> Path:
    closes = list(closes)
    if dates is None:
        dates = trading_dates(len(closes))
    lines = ["Date,Open,High,Low,Close,Volume"]
    prev = closes[0]
    for d, c in zip(dates, closes):
        o = prev
        hi, lo = max(o, c) * 1.01, min(o, c) * 0.99
        lines.append(f"{d.isoformat()},{o:.6f},{hi:.6f},{lo:.6f},{c:.6f},{volume}")
        prev = c
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Ranking oracles
# ---------------------------------------------------------------------------


def hard_dcg(gains_in_rank_order) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains_in_rank_order))


def hard_ndcg(scores, y_true) -> float:
    """Exact NDCG with exponential gains: sort by score, normalize by ideal."""
    scores = list(map(float, scores))
    y_true = list(map(float, y_true))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    gains = [2.0 ** y_true[i] - 1.0 for i in order]
    ideal = sorted((2.0 ** y - 1.0 for y in y_true), reverse=True)
    denom = hard_dcg(ideal)
    if abs(denom) < 1e-10:
        denom = 1e-10
    return hard_dcg(gains) / denom


# ---------------------------------------------------------------------------
# Numeric gradient checking (float64, central differences)
# ---------------------------------------------------------------------------


def numeric_gradient(loss_fn, param: torch.Tensor, h: float = 1e-6) -> np.ndarray:
    flat = param.detach().reshape(-1)
    grad = np.zeros(flat.numel())
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            f_plus = float(loss_fn())
            flat[i] = orig - h
            f_minus = float(loss_fn())
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(tuple(param.shape))


def assert_grads_close(
    loss_fn, params, h: float = 1e-6, tol: float = 1e-4, atol: float = 1e-6
) -> float:
    """Compare autograd against central differences, norm-relative.

    Everything must already be float64; returns the worst relative error.
    When both routes report a gradient below ``atol`` the parameter is
    treated as having a true zero gradient (central differences bottom out
    at roundoff noise around 1e-9, so ratios of noise are meaningless).
    """
    params = list(params)
    for p in params:
        assert p.dtype == torch.float64, "gradient checks must run in float64"
    loss = loss_fn()
    autos = torch.autograd.grad(loss, params)
    worst = 0.0
    for p, auto in zip(params, autos):
        num = numeric_gradient(loss_fn, p, h)
        auto = auto.detach().cpu().numpy()
        scale = max(np.linalg.norm(num), np.linalg.norm(auto))
        if scale <= atol:
            continue
        relerr = float(np.linalg.norm(num - auto) / scale)
        worst = max(worst, relerr)
        assert relerr <= tol, (
            f"gradient mismatch on {tuple(p.shape)}: rel err {relerr:.3e} > {tol}"
        )
    return worst

"""Temporal point-process node embeddings over monthly graph events.

Every dated relation contributes one event per calendar month of validity
(see :func:`tkgrank.kg_store.expand_monthly`). A node's history is the
time-ordered list of events it participates in, truncated to the most recent
``max_history`` entries strictly before the query time. Event plausibility
combines a translation-style base distance with decayed excitation from both
endpoints' histories; larger values mean more plausible. Training minimizes a
margin objective against corrupted tails drawn from the same entity type.

Time is measured in whole months (the event expansion resolution).
"""

from __future__ import annotations

import logging
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DivergenceError
from .kg_store import EventTuple, TemporalKG
from .seq_encoder import seeded_generator

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


class EventHistoryIndex:
    """Per-node, time-ordered event participation lists.

    Entries are (month, relation_type, partner) sorted by that triple, so the
    index depends only on the event multiset, not on input order.
    """

    def __init__(self, events: list[EventTuple], n_entities: int):
        per_node: list[list[tuple[int, int, int]]] = [[] for _ in range(n_entities)]
        for ev in events:
            per_node[ev.head].append((ev.month_index, ev.relation_type, ev.tail))
            if ev.tail != ev.head:
                per_node[ev.tail].append((ev.month_index, ev.relation_type, ev.head))
        self.months: list[np.ndarray] = []
        self.rels: list[np.ndarray] = []
        self.partners: list[np.ndarray] = []
        for rows in per_node:
            rows.sort()
            arr = np.array(rows, dtype=np.int64).reshape(len(rows), 3)
            self.months.append(np.ascontiguousarray(arr[:, 0]))
            self.rels.append(np.ascontiguousarray(arr[:, 1]))
            self.partners.append(np.ascontiguousarray(arr[:, 2]))

    def query(self, node: int, month: int, limit: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Most recent ``limit`` events of ``node`` strictly before ``month``."""
        months = self.months[node]
        cut = bisect_left(months, month)
        lo = max(0, cut - limit)
        return months[lo:cut], self.rels[node][lo:cut], self.partners[node][lo:cut]

    def query_batch(
        self, nodes: np.ndarray, months: np.ndarray, limit: int
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Padded (B, limit) history arrays: lags, rel types, partners, mask."""
        b = len(nodes)
        lag = np.zeros((b, limit), dtype=np.int64)
        rel = np.zeros((b, limit), dtype=np.int64)
        par = np.zeros((b, limit), dtype=np.int64)
        mask = np.zeros((b, limit), dtype=np.float64)
        for i, (node, month) in enumerate(zip(nodes, months)):
            m, r, p = self.query(int(node), int(month), limit)
            n = len(m)
            if n:
                lag[i, :n] = month - m
                rel[i, :n] = r
                par[i, :n] = p
                mask[i, :n] = 1.0
        return lag, rel, par, mask


class HawkesEmbedding(nn.Module):
    """Learnable node/relation embeddings with excitation-aware scoring."""

    def __init__(
        self,
        n_entities: int,
        n_relations: int,
        dim: int = 128,
        max_history: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        if n_entities < 1 or n_relations < 1:
            raise ValueError("need at least one entity and one relation type")
        gen = seeded_generator(seed)
        scale = 1.0 / np.sqrt(dim)
        self.dim = dim
        self.max_history = max_history
        self.node_emb = nn.Parameter(torch.randn(n_entities, dim, generator=gen) * scale)
        self.rel_emb = nn.Parameter(torch.randn(n_relations, dim, generator=gen) * scale)
        w = torch.empty(dim, dim)
        bound = np.sqrt(6.0 / (2 * dim))
        with torch.no_grad():
            w.uniform_(-bound, bound, generator=gen)
        self.w_e = nn.Parameter(w)
        self.gamma1 = nn.Parameter(torch.tensor(0.5))
        self.gamma2 = nn.Parameter(torch.tensor(0.5))
        # Softplus keeps per-relation-type decay rates positive; raw value
        # chosen so the initial rate is exactly 1 per month.
        raw0 = float(np.log(np.expm1(1.0)))
        self.raw_decay = nn.Parameter(torch.full((n_relations,), raw0))

    @property
    def decay(self) -> torch.Tensor:
        return nn.functional.softplus(self.raw_decay)

    def _mu(self, h_emb: torch.Tensor, r_emb: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        act = nn.functional.leaky_relu
        a = act(h_emb @ self.w_e.T, LEAKY_SLOPE)
        b = act(t_emb @ self.w_e.T, LEAKY_SLOPE)
        return ((a + r_emb - b) ** 2).sum(dim=-1)

    def base_intensity(self, heads, rels, tails) -> torch.Tensor:
        """Squared translation distance; >= 0, and 0 only on exact translation."""
        heads = torch.as_tensor(heads, dtype=torch.long)
        rels = torch.as_tensor(rels, dtype=torch.long)
        tails = torch.as_tensor(tails, dtype=torch.long)
        return self._mu(self.node_emb[heads], self.rel_emb[rels], self.node_emb[tails])

    def mutual_batch(
        self, nodes: np.ndarray, months: np.ndarray, index: EventHistoryIndex
    ) -> torch.Tensor:
        """Decayed sum of negated base distances over each node's history."""
        nodes = np.asarray(nodes, dtype=np.int64)
        months = np.asarray(months, dtype=np.int64)
        lag, rel, par, mask = index.query_batch(nodes, months, self.max_history)
        dtype = self.node_emb.dtype
        node_e = self.node_emb[torch.from_numpy(nodes)].unsqueeze(1)
        rel_t = torch.from_numpy(rel)
        g = -self._mu(node_e, self.rel_emb[rel_t], self.node_emb[torch.from_numpy(par)])
        w = torch.exp(-self.decay[rel_t] * torch.from_numpy(lag).to(dtype))
        return (w * g * torch.from_numpy(mask).to(dtype)).sum(dim=-1)

    def mutual_intensity(self, node: int, month: int, index: EventHistoryIndex) -> torch.Tensor:
        return self.mutual_batch(np.array([node]), np.array([month]), index)[0]

    def intensity_batch(
        self, heads, rels, tails, months, index: EventHistoryIndex
    ) -> torch.Tensor:
        """-base + gamma1 * head excitation + gamma2 * tail excitation."""
        mu = self.base_intensity(heads, rels, tails)
        mh = self.mutual_batch(heads, months, index)
        mt = self.mutual_batch(tails, months, index)
        return -mu + self.gamma1 * mh + self.gamma2 * mt

    def intensity(self, head: int, rel: int, tail: int, month: int, index: EventHistoryIndex) -> torch.Tensor:
        return self.intensity_batch(
            np.array([head]), np.array([rel]), np.array([tail]), np.array([month]), index
        )[0]

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {
            name: p.detach().cpu().numpy().copy()
            for name, p in self.named_parameters()
        }


@dataclass
class HawkesTrainConfig:
    lr: float = 1e-4
    epochs: int = 5
    negatives: int = 5
    margin: float = 1.0
    batch_size: int = 128
    seed: int = 0


@dataclass
class HawkesTrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    fallback_types: set[str] = field(default_factory=set)


def entity_type_pools(kg: TemporalKG) -> dict[str, np.ndarray]:
    pools: dict[str, list[int]] = {}
    for ent in kg.entities.values():
        pools.setdefault(ent.entity_type, []).append(ent.id)
    return {t: np.array(sorted(ids), dtype=np.int64) for t, ids in pools.items()}


def _sample_corruptions(
    rng: np.random.Generator,
    tail: int,
    pool: np.ndarray,
    all_ids: np.ndarray,
    k: int,
    result: HawkesTrainResult,
    tail_type: str,
) -> np.ndarray:
    """K corrupted tails != tail, same-type pool first, all entities fallback."""
    candidates = pool[pool != tail]
    if len(candidates) == 0:
        if tail_type not in result.fallback_types:
            result.fallback_types.add(tail_type)
            log.warning(
                "no alternative entities of type %r; corrupting over all entities",
                tail_type,
            )
        candidates = all_ids[all_ids != tail]
    if len(candidates) == 0:
        return np.full(k, tail, dtype=np.int64)
    return rng.choice(candidates, size=k)


def train_hawkes(
    model: HawkesEmbedding,
    events: list[EventTuple],
    pools: dict[str, np.ndarray],
    config: HawkesTrainConfig,
    index: EventHistoryIndex | None = None,
) -> HawkesTrainResult:
    """Fit by SGD on the margin objective against corrupted-tail negatives.

    ``pools`` maps tail type -> candidate ids for same-type corruption and
    must live in the same id space as the events (dense 0..n_entities-1;
    remap upstream if needed). ``epochs=0`` or ``negatives=0`` leaves
    parameters untouched. Raises DivergenceError on a non-finite loss.
    """
    result = HawkesTrainResult()
    if not events or config.epochs == 0 or config.negatives == 0:
        return result
    n_entities = model.node_emb.shape[0]
    if index is None:
        index = EventHistoryIndex(events, n_entities)
    all_ids = np.arange(n_entities, dtype=np.int64)
    empty = np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr)

    heads = np.array([e.head for e in events], dtype=np.int64)
    rels = np.array([e.relation_type for e in events], dtype=np.int64)
    tails = np.array([e.tail for e in events], dtype=np.int64)
    months = np.array([e.month_index for e in events], dtype=np.int64)
    k = config.negatives

    for _ in range(config.epochs):
        order = rng.permutation(len(events))
        epoch_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            neg_tails = np.stack(
                [
                    _sample_corruptions(
                        rng, int(tails[i]), pools.get(events[i].tail_type, empty),
                        all_ids, k, result, events[i].tail_type,
                    )
                    for i in batch
                ]
            )  # (B, K)
            pos = model.intensity_batch(heads[batch], rels[batch], tails[batch], months[batch], index)
            rep = np.repeat(batch, k)
            neg = model.intensity_batch(
                heads[rep], rels[rep], neg_tails.reshape(-1), months[rep], index
            ).view(len(batch), k)
            loss = torch.clamp(config.margin - pos.unsqueeze(1) + neg, min=0.0).sum()
            if not torch.isfinite(loss):
                raise DivergenceError("non-finite margin loss in event-embedding training")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
        result.epoch_losses.append(epoch_loss)
    return result

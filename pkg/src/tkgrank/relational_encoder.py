"""Relational embeddings via heterogeneous, edge-featured graph attention.

A dated snapshot becomes a directed edge batch. Each edge carries an
attribute e_edge = relation embedding + calendar-time embedding, where the
time embedding sums month/day/hour table rows for the edge's start date
(day-resolution data always hits hour 0). When point-process relation
embeddings are supplied they are fused into the relation embedding by a
learned linear map, and per-asset sequential/point-process vectors can be
injected into entity features before message passing.

Each attention layer projects nodes per node type (a single shared
projection in the homogeneous variant), keys/values per relation type,
scores edges additively on [source || edge attribute || target] with a
LeakyReLU, and normalizes by softmax over each target's in-edges with two
heads concatenated. Nodes with no in-edges attend to themselves through a
reserved self-loop slot so every node has a defined output.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date

import numpy as np
import torch
from torch import nn

from .errors import IntegrityError
from .kg_store import Snapshot, TemporalKG
from .seq_encoder import init_linear_, seeded_generator

LEAKY_SLOPE = 0.2
SELF_LOOP_BUCKET = "self"
SELF_LOOP_NAME = "<self>"


@dataclass(frozen=True)
class GraphBatch:
    """Tensorized snapshot: parallel edge arrays over dense node rows."""

    n_nodes: int
    src: torch.Tensor          # (E,) long
    dst: torch.Tensor          # (E,) long
    rel: torch.Tensor          # (E,) long; == n_relations marks a self-loop
    month0: torch.Tensor       # (E,) long in [0, 12)
    day0: torch.Tensor         # (E,) long in [0, 31)
    hour: torch.Tensor         # (E,) long in [0, 24)
    real: torch.Tensor         # (E,) bool; False for self-loop fallbacks
    time_bucket: tuple[str, ...]  # "YYYY-MM" per edge ("self" for loops)

    @property
    def n_edges(self) -> int:
        return int(self.src.shape[0])


@dataclass(frozen=True)
class AttentionReport:
    """Per-edge attention weights: one (E, n_heads) array per layer."""

    layers: tuple[np.ndarray, ...]


class GraphContext:
    """Dense-row view of a graph plus per-date batch construction (cached).

    Entity ids from arbitrary exports need not be contiguous; rows here are
    entity ids sorted ascending. Assets map to rows by entity name == ticker.
    """

    def __init__(self, kg: TemporalKG, tickers: list[str] | None = None):
        self.kg = kg
        self.entity_ids = sorted(kg.entities)
        self.row_of = {eid: i for i, eid in enumerate(self.entity_ids)}
        self.n_nodes = len(self.entity_ids)
        self.n_relations = len(kg.relation_types)
        self.type_names = sorted(
            {kg.entities[eid].entity_type for eid in self.entity_ids}
        )
        type_idx = {t: i for i, t in enumerate(self.type_names)}
        self.node_types = np.array(
            [type_idx[kg.entities[eid].entity_type] for eid in self.entity_ids],
            dtype=np.int64,
        )
        self.asset_rows: np.ndarray | None = None
        if tickers is not None:
            by_name: dict[str, int] = {}
            for eid in self.entity_ids:
                by_name.setdefault(kg.entities[eid].name, self.row_of[eid])
            missing = [t for t in tickers if t not in by_name]
            if missing:
                raise IntegrityError(
                    f"tickers with no graph entity of the same name: {', '.join(missing)}"
                )
            self.asset_rows = np.array([by_name[t] for t in tickers], dtype=np.int64)
        self._batch_cache: dict[date, GraphBatch] = {}

    def batch_at(self, at: date) -> GraphBatch:
        if at not in self._batch_cache:
            from .kg_store import snapshot as kg_snapshot

            self._batch_cache[at] = self.tensorize(kg_snapshot(self.kg, at))
        return self._batch_cache[at]

    def tensorize(self, snap: Snapshot) -> GraphBatch:
        src, dst, rel = [], [], []
        month0, day0, hour = [], [], []
        buckets: list[str] = []
        for r in snap.relations:
            src.append(self.row_of[r.head])
            dst.append(self.row_of[r.tail])
            rel.append(r.relation_type)
            ts = r.valid_from
            month0.append(ts.month - 1)
            day0.append(ts.day - 1)
            hour.append(0)
            buckets.append(f"{ts.year:04d}-{ts.month:02d}")
        covered = set(dst)
        n_real = len(src)
        for row in range(self.n_nodes):
            if row not in covered:
                src.append(row)
                dst.append(row)
                rel.append(self.n_relations)
                month0.append(0)
                day0.append(0)
                hour.append(0)
                buckets.append(SELF_LOOP_BUCKET)
        real = torch.zeros(len(src), dtype=torch.bool)
        real[:n_real] = True
        as_long = lambda xs: torch.as_tensor(xs, dtype=torch.long)
        return GraphBatch(
            n_nodes=self.n_nodes,
            src=as_long(src), dst=as_long(dst), rel=as_long(rel),
            month0=as_long(month0), day0=as_long(day0), hour=as_long(hour),
            real=real, time_bucket=tuple(buckets),
        )


def segment_softmax(scores: torch.Tensor, segments: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Softmax of ``scores`` grouped by ``segments`` along dim 0."""
    shape = (n_segments, *scores.shape[1:])
    idx = segments.view(-1, *([1] * (scores.dim() - 1))).expand_as(scores)
    top = scores.new_full(shape, float("-inf"))
    top = top.scatter_reduce(0, idx, scores, reduce="amax", include_self=True)
    shifted = torch.exp(scores - top[segments])
    denom = scores.new_zeros(shape).index_add(0, segments, shifted)
    return shifted / denom[segments]


class HeatLayer(nn.Module):
    """One heterogeneous edge-featured attention layer."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        n_heads: int,
        n_node_types: int,
        n_rel_slots: int,
        d_edge: int,
        gen: torch.Generator,
    ):
        super().__init__()
        if d_out % n_heads:
            raise ValueError(f"d_out {d_out} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_out // n_heads
        def bank(*shape):
            fan_in, fan_out = shape[-1], shape[-2]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            t = torch.empty(*shape)
            with torch.no_grad():
                t.uniform_(-bound, bound, generator=gen)
            return nn.Parameter(t)
        h, dh = n_heads, self.d_head
        self.w_node = bank(n_node_types, h, dh, d_in)
        self.w_key = bank(n_rel_slots, h, dh, dh)
        self.w_val = bank(n_rel_slots, h, dh, dh)
        self.w_edge = bank(h, dh, d_edge)
        self.att = bank(h, 1, 3 * dh)

    def forward(
        self,
        x: torch.Tensor,
        batch: GraphBatch,
        node_types: torch.Tensor,
        edge_attr: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (node outputs (N, d_out), attention weights (E, n_heads))."""
        n, h, dh = batch.n_nodes, self.n_heads, self.d_head
        z = x.new_zeros(n, h, dh)
        for t in range(self.w_node.shape[0]):
            sel = node_types == t
            if sel.any():
                z[sel] = torch.einsum("hoi,ni->nho", self.w_node[t], x[sel])
        z_src, z_dst = z[batch.src], z[batch.dst]
        key = x.new_zeros(batch.n_edges, h, dh)
        val = x.new_zeros(batch.n_edges, h, dh)
        for r in range(self.w_key.shape[0]):
            sel = batch.rel == r
            if sel.any():
                key[sel] = torch.einsum("hoi,ehi->eho", self.w_key[r], z_src[sel])
                val[sel] = torch.einsum("hoi,ehi->eho", self.w_val[r], z_src[sel])
        attr = torch.einsum("hoi,ei->eho", self.w_edge, edge_attr)
        score_in = torch.cat([key, attr, z_dst], dim=-1)
        scores = nn.functional.leaky_relu(
            torch.einsum("hoi,ehi->eho", self.att, score_in).squeeze(-1), LEAKY_SLOPE
        )
        alpha = segment_softmax(scores, batch.dst, n)
        out = x.new_zeros(n, h, dh).index_add(0, batch.dst, alpha.unsqueeze(-1) * val)
        return out.reshape(n, h * dh), alpha


class RelationalEncoder(nn.Module):
    """Entity embeddings refined by two attention layers and two linear maps."""

    def __init__(
        self,
        n_entities: int,
        n_relations: int,
        n_node_types: int,
        d_r: int = 16,
        d_tpp: int | None = None,
        d_inject: int | None = None,
        n_heads: int = 2,
        n_layers: int = 2,
        heterogeneous: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        gen = seeded_generator(seed)
        self.d_r = d_r
        self.n_relations = n_relations
        self.heterogeneous = heterogeneous
        self.entity_emb = nn.Parameter(torch.randn(n_entities, d_r, generator=gen))
        self.rel_emb = nn.Parameter(torch.randn(n_relations, d_r, generator=gen))
        self.month_table = nn.Parameter(torch.randn(12, d_r, generator=gen))
        self.day_table = nn.Parameter(torch.randn(31, d_r, generator=gen))
        self.hour_table = nn.Parameter(torch.randn(24, d_r, generator=gen))
        self.self_attr = nn.Parameter(torch.randn(d_r, generator=gen))
        self.fuse = None
        if d_tpp is not None:
            self.fuse = nn.Linear(d_r + d_tpp, d_r, bias=False)
            init_linear_(self.fuse, gen)
        self.inject = None
        if d_inject is not None:
            self.inject = nn.Linear(d_inject, d_r, bias=False)
            init_linear_(self.inject, gen)
        bank_types = n_node_types if heterogeneous else 1
        self.layers = nn.ModuleList(
            HeatLayer(d_r, d_r, n_heads, bank_types, n_relations + 1, d_r, gen)
            for _ in range(n_layers)
        )
        self.lin1 = nn.Linear(d_r, d_r)
        self.lin2 = nn.Linear(d_r, d_r)
        init_linear_(self.lin1, gen)
        init_linear_(self.lin2, gen)

    def time_embedding(self, month0, day0, hour) -> torch.Tensor:
        """Sum of calendar-component table rows (0-based indices)."""
        return self.month_table[month0] + self.day_table[day0] + self.hour_table[hour]

    def fused_relation_emb(self, rel_tpp: torch.Tensor | None) -> torch.Tensor:
        """(M, d_r) relation embeddings, point-process-fused when available."""
        if rel_tpp is None or self.fuse is None:
            return self.rel_emb
        return self.fuse(torch.cat([self.rel_emb, rel_tpp.to(self.rel_emb.dtype)], dim=-1))

    def entity_features(
        self,
        inject_values: torch.Tensor | None = None,
        inject_rows: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Base embeddings, plus projected injected vectors on chosen rows."""
        feats = self.entity_emb
        if inject_values is not None:
            if self.inject is None:
                raise ValueError("encoder built without an injection projection")
            add = self.inject(inject_values.to(feats.dtype))
            feats = feats.index_add(0, inject_rows, add)
        return feats

    def edge_attributes(self, batch: GraphBatch, rel_tpp: torch.Tensor | None) -> torch.Tensor:
        rel_table = self.fused_relation_emb(rel_tpp)
        attr = torch.empty(batch.n_edges, self.d_r, dtype=rel_table.dtype)
        real = batch.real
        attr[real] = rel_table[batch.rel[real]] + self.time_embedding(
            batch.month0[real], batch.day0[real], batch.hour[real]
        )
        attr[~real] = self.self_attr.to(rel_table.dtype)
        return attr

    def forward(
        self,
        batch: GraphBatch,
        node_types: np.ndarray,
        rel_tpp: torch.Tensor | None = None,
        inject_values: torch.Tensor | None = None,
        inject_rows: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, AttentionReport]:
        """Embed every node; also return per-layer attention weights."""
        types = torch.as_tensor(node_types, dtype=torch.long)
        if not self.heterogeneous:
            types = torch.zeros_like(types)
        x = self.entity_features(inject_values, inject_rows)
        attr = self.edge_attributes(batch, rel_tpp)
        weights = []
        for i, layer in enumerate(self.layers):
            x, alpha = layer(x, batch, types, attr)
            weights.append(alpha.detach().cpu().numpy())
            if i + 1 < len(self.layers):
                x = nn.functional.leaky_relu(x, LEAKY_SLOPE)
        x = self.lin2(nn.functional.leaky_relu(self.lin1(x), LEAKY_SLOPE))
        return x, AttentionReport(layers=tuple(weights))

    def kge_loss(self, batch: GraphBatch, rel_tpp: torch.Tensor | None = None) -> torch.Tensor:
        """Mean unsquared translation residual over the batch's real edges.

        Uses base entity embeddings (not injected features); self-loop
        fallbacks are excluded. Empty batches contribute zero.
        """
        real = batch.real
        if not bool(real.any()):
            return self.entity_emb.sum() * 0.0
        rel_table = self.fused_relation_emb(rel_tpp)
        e_h = self.entity_emb[batch.src[real]]
        e_t = self.entity_emb[batch.dst[real]]
        e_r = rel_table[batch.rel[real]]
        e_tau = self.time_embedding(batch.month0[real], batch.day0[real], batch.hour[real])
        residual = e_h + e_r + e_tau - e_t
        return residual.pow(2).sum(dim=-1).sqrt().mean()

"""Listwise ranking head, training losses, and per-phase optimization.

Scores come from a linear head over the concatenated per-asset embedding
streams, turned into a distribution by a max-subtracted softmax across the
asset list. The training objective is a weighted sum of four parts: a
translation regularizer on the day's graph snapshot, a smooth listwise
ranking surrogate, and two rescaled binary cross-entropies (direction and
top-k membership). The sequential-only baseline trains on a pairwise
ranking hinge plus the direction term instead.

Model variants:

* FULL        all three streams, point-process-fused relation embeddings
* WOTPP       no point-process embeddings
* WOSEQ       no sequential injection into the relational layer, no
              point-process embeddings (the head still sees the seq stream)
* WOHK        WOTPP with type-blind (homogeneous) node projections
* LSTM        WOTPP with the recurrent sequential encoder
* TRANSF      sequential stream only, pairwise + direction objective
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DivergenceError
from .market_data import PhaseSpec, make_topk_labels
from .relational_encoder import AttentionReport, GraphContext, RelationalEncoder
from .seq_encoder import RecurrentSeqEncoder, TransformerSeqEncoder, seeded_generator
from .seq_encoder import init_linear_

log = logging.getLogger(__name__)

VARIANTS = ("FULL", "WOTPP", "WOSEQ", "WOHK", "LSTM", "TRANSF")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def listwise_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the asset axis with max subtraction for stability."""
    z = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def approx_ndcg_loss(
    scores: torch.Tensor, y_true: torch.Tensor, temperature: float = 0.1
) -> torch.Tensor:
    """Differentiable NDCG surrogate, minimized toward -1.

    Smooth ranks come from pairwise sigmoids of the predicted scores; gains
    2^y - 1 come from the true scores and are normalized by their ideal DCG.
    As temperature -> 0 with distinct scores the value approaches the
    negated hard NDCG of the induced ranking.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = scores.shape[-1]
    diff = (scores.unsqueeze(-2) - scores.unsqueeze(-1)) / temperature
    # diff[i, j] = (s_j - s_i) / temperature; the diagonal contributes
    # sigmoid(0) = 0.5 which the 0.5 base rank removes.
    ranks = 0.5 + torch.sigmoid(diff).sum(dim=-1)
    gains = torch.pow(2.0, y_true) - 1.0
    ideal, _ = torch.sort(gains, descending=True, dim=-1)
    discounts = torch.log2(torch.arange(n, dtype=scores.dtype) + 2.0)
    max_dcg = (ideal / discounts).sum(dim=-1)
    denom = torch.where(
        max_dcg.abs() < 1e-10, torch.full_like(max_dcg, 1e-10), max_dcg
    )
    dcg = (gains / torch.log2(1.0 + ranks)).sum(dim=-1)
    return -dcg / denom


def _rescaled_bce(
    probs: torch.Tensor, targets: torch.Tensor, rescale: bool, eps: float
) -> torch.Tensor:
    if rescale:
        probs = probs * probs.shape[-1]
    q = probs.clamp(eps, 1.0 - eps)
    t = targets.to(q.dtype)
    return -(t * torch.log(q) + (1.0 - t) * torch.log(1.0 - q)).mean(dim=-1)


def direction_loss(
    probs: torch.Tensor, directions: torch.Tensor, rescale: bool = True, eps: float = 1e-6
) -> torch.Tensor:
    """BCE between (rescaled) listwise probabilities and up/down labels."""
    return _rescaled_bce(probs, directions, rescale, eps)


def topk_loss(
    probs: torch.Tensor, topk_labels: torch.Tensor, rescale: bool = True, eps: float = 1e-6
) -> torch.Tensor:
    """BCE between (rescaled) listwise probabilities and top-k membership."""
    return _rescaled_bce(probs, topk_labels, rescale, eps)


def pairwise_loss(scores: torch.Tensor, y_true: torch.Tensor) -> torch.Tensor:
    """Hinge on discordant unordered pairs: sum of |margin products|.

    Zero iff no pair is ranked opposite to its true-return order.
    """
    i, j = torch.triu_indices(scores.shape[-1], scores.shape[-1], offset=1)
    ds = scores[..., i] - scores[..., j]
    dy = y_true[..., i] - y_true[..., j]
    return torch.clamp(-ds * dy, min=0.0).sum(dim=-1)


@dataclass
class LossConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    alpha4: float = 1.0
    temperature: float = 0.1
    k: int = 5
    rescale_bce: bool = True
    eps: float = 1e-6


# ---------------------------------------------------------------------------
# Assembled model
# ---------------------------------------------------------------------------


@dataclass
class ModelDims:
    d_s: int = 20
    d_tpp: int = 128
    d_r: int = 16
    seq_heads: int = 2
    seq_layers: int = 2
    rel_heads: int = 2
    rel_layers: int = 2


class RankingModel(nn.Module):
    """Variant-gated assembly of the three embedding streams plus the head."""

    def __init__(
        self,
        variant: str,
        n_assets: int,
        dims: ModelDims,
        ctx: GraphContext | None = None,
        hawkes_node_emb: np.ndarray | None = None,
        hawkes_rel_emb: np.ndarray | None = None,
        pooling: str = "mean",
        seed: int = 0,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.n_assets = n_assets
        self.dims = dims
        self.ctx = ctx

        seq_cls = RecurrentSeqEncoder if variant == "LSTM" else TransformerSeqEncoder
        seq_kwargs = dict(n_features=5, d_model=dims.d_s, pooling=pooling, seed=seed)
        if seq_cls is TransformerSeqEncoder:
            seq_kwargs.update(n_heads=dims.seq_heads, n_layers=dims.seq_layers)
        self.seq = seq_cls(**seq_kwargs)

        self.rel_enc: RelationalEncoder | None = None
        self.uses_graph = variant != "TRANSF"
        self.uses_tpp = variant == "FULL"
        self.injects_seq = variant in ("FULL", "WOTPP", "WOHK", "LSTM")

        seq_out = dims.d_s + (dims.d_tpp if self.uses_tpp else 0)
        if self.uses_graph:
            if ctx is None or ctx.asset_rows is None:
                raise ConfigError(f"variant {variant} needs a graph context with asset rows")
            self.rel_enc = RelationalEncoder(
                n_entities=ctx.n_nodes,
                n_relations=ctx.n_relations,
                n_node_types=len(ctx.type_names),
                d_r=dims.d_r,
                d_tpp=dims.d_tpp if self.uses_tpp else None,
                d_inject=seq_out if self.injects_seq else None,
                n_heads=dims.rel_heads,
                n_layers=dims.rel_layers,
                heterogeneous=variant != "WOHK",
                seed=seed + 1,
            )
            head_in = seq_out + dims.d_r
        else:
            head_in = seq_out

        if self.uses_tpp:
            if hawkes_node_emb is None or hawkes_rel_emb is None:
                raise ConfigError("FULL variant needs fitted point-process embeddings")
            if hawkes_node_emb.shape != (ctx.n_nodes, dims.d_tpp):
                raise ConfigError(
                    f"point-process node embeddings {hawkes_node_emb.shape} do not match "
                    f"({ctx.n_nodes}, {dims.d_tpp})"
                )
            # Fitted upstream and held fixed during phase training.
            self.register_buffer("node_tpp", torch.as_tensor(hawkes_node_emb, dtype=torch.float32))
            self.register_buffer("rel_tpp", torch.as_tensor(hawkes_rel_emb, dtype=torch.float32))
        else:
            self.node_tpp = None
            self.rel_tpp = None

        self.head = nn.Linear(head_in, 1)
        init_linear_(self.head, seeded_generator(seed + 2))

    def asset_rows_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.ctx.asset_rows, dtype=torch.long)

    def forward(
        self, windows: torch.Tensor, batch=None
    ) -> tuple[torch.Tensor, AttentionReport | None]:
        """(n_assets, W, 5) windows + optional graph batch -> (probs, attention)."""
        s = self.seq(windows)
        rows = self.asset_rows_tensor() if self.uses_graph else None
        if self.uses_tpp:
            seq_part = torch.cat([s, self.node_tpp[rows]], dim=-1)
        else:
            seq_part = s
        report = None
        if self.uses_graph:
            if batch is None:
                raise ValueError(f"variant {self.variant} requires a graph batch")
            node_out, report = self.rel_enc(
                batch,
                self.ctx.node_types,
                rel_tpp=self.rel_tpp,
                inject_values=seq_part if self.injects_seq else None,
                inject_rows=rows if self.injects_seq else None,
            )
            features = torch.cat([seq_part, node_out[rows]], dim=-1)
        else:
            features = seq_part
        logits = self.head(features).squeeze(-1)
        return listwise_softmax(logits), report

    def day_loss(
        self,
        windows: torch.Tensor,
        batch,
        returns: torch.Tensor,
        directions: torch.Tensor,
        cfg: LossConfig,
    ) -> tuple[torch.Tensor, dict[str, float]]:
        """Composite objective for one trading day's asset cross-section."""
        probs, _ = self.forward(windows, batch)
        parts: dict[str, float] = {}
        if self.variant == "TRANSF":
            l_pair = pairwise_loss(probs, returns)
            l_dir = direction_loss(probs, directions, cfg.rescale_bce, cfg.eps)
            total = cfg.alpha2 * l_pair + cfg.alpha3 * l_dir
            parts = {"pairwise": float(l_pair.detach()), "direction": float(l_dir.detach())}
            return total, parts
        topk = torch.as_tensor(
            make_topk_labels(returns.detach().cpu().numpy(), cfg.k), dtype=probs.dtype
        )
        l1 = self.rel_enc.kge_loss(batch, rel_tpp=self.rel_tpp)
        l2 = approx_ndcg_loss(probs, returns, cfg.temperature)
        l3 = direction_loss(probs, directions, cfg.rescale_bce, cfg.eps)
        l4 = topk_loss(probs, topk, cfg.rescale_bce, cfg.eps)
        total = cfg.alpha1 * l1 + cfg.alpha2 * l2 + cfg.alpha3 * l3 + cfg.alpha4 * l4
        parts = {
            "kge": float(l1.detach()), "approx_ndcg": float(l2.detach()),
            "direction": float(l3.detach()), "topk": float(l4.detach()),
        }
        return total, parts


# ---------------------------------------------------------------------------
# Phase training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 10
    momentum: float = 0.0
    seed: int = 0
    val_k: int = 5


@dataclass
class PhaseTrainResult:
    best_epoch: int = -1
    best_val_ndcg: float = float("nan")
    epoch_losses: list[float] = field(default_factory=list)
    val_ndcgs: list[float] = field(default_factory=list)
    diverged: bool = False


def _ndcg_binary(probs: np.ndarray, returns: np.ndarray, k: int) -> float:
    from .backtest import ndcg_at_k

    order = np.lexsort((np.arange(len(probs)), -probs))
    relevance = make_topk_labels(returns, k).astype(float)
    return ndcg_at_k(order, relevance, k)


def train_phase(
    model: RankingModel,
    data,
    phase: PhaseSpec,
    delta: int,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
) -> PhaseTrainResult:
    """SGD over the phase's training days; keeps the best-validation state.

    One optimization step per anchor day, day order reshuffled each epoch.
    The model is left loaded with its best validation-NDCG parameters.
    Raises DivergenceError (carrying ``last_state``) on a non-finite loss.
    """
    result = PhaseTrainResult()
    rng = np.random.default_rng(train_cfg.seed + 1000 * phase.index)
    train_anchors = data.anchors_in(*phase.train)
    val_anchors = data.anchors_in(*phase.val)
    if len(train_anchors) == 0:
        raise ConfigError(f"phase {phase.index}: no usable training days")
    opt = torch.optim.SGD(model.parameters(), lr=train_cfg.lr, momentum=train_cfg.momentum)
    best_state = copy.deepcopy(model.state_dict())
    last_finite = best_state
    best_val = -math.inf

    for epoch in range(train_cfg.epochs):
        epoch_loss = 0.0
        for t in rng.permutation(train_anchors):
            windows, returns, directions, batch = data.day_inputs(int(t), delta, model.ctx)
            total, _ = model.day_loss(windows, batch, returns, directions, loss_cfg)
            if not torch.isfinite(total):
                err = DivergenceError(
                    f"non-finite loss at phase {phase.index}, epoch {epoch}, day {t}"
                )
                err.last_state = last_finite
                result.diverged = True
                raise err
            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_loss += float(total.detach())
        last_finite = copy.deepcopy(model.state_dict())
        result.epoch_losses.append(epoch_loss)

        val_scores = []
        with torch.no_grad():
            for t in val_anchors:
                windows, returns, _, batch = data.day_inputs(int(t), delta, model.ctx)
                probs, _ = model.forward(windows, batch)
                val_scores.append(
                    _ndcg_binary(probs.numpy(), returns.numpy(), train_cfg.val_k)
                )
        val_ndcg = float(np.mean(val_scores)) if val_scores else float("nan")
        result.val_ndcgs.append(val_ndcg)
        if val_scores and val_ndcg > best_val:
            best_val = val_ndcg
            result.best_epoch = epoch
            result.best_val_ndcg = val_ndcg
            best_state = copy.deepcopy(model.state_dict())

    if result.best_epoch >= 0:
        model.load_state_dict(best_state)
    return result

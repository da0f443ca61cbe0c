"""Sequential price-window encoders.

The default encoder is a small encoder-only transformer: input projection,
fixed sinusoidal position encoding, pre-norm self-attention blocks, and mean
pooling over the window (last-position pooling via ``pooling="last"``). A
hand-rolled LSTM behind the same interface serves the recurrent ablation.

Construction is seeded: the same seed yields bit-identical parameters and
therefore bit-identical encodings on one platform.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def init_linear_(linear: nn.Linear, gen: torch.Generator) -> None:
    # Xavier-uniform weights, zero biases, drawn from the module's generator
    # so initialization never touches torch's global RNG.
    bound = math.sqrt(6.0 / (linear.in_features + linear.out_features))
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=gen)
        if linear.bias is not None:
            linear.bias.zero_()


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    """Classic fixed position table: sin on even columns, cos on odd."""
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, half / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, gen: torch.Generator):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)
        self.act = nn.GELU()
        for lin in (self.q, self.k, self.v, self.o, self.ff1, self.ff2):
            init_linear_(lin, gen)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, w, d = x.shape
        shape = (b, w, self.n_heads, self.d_head)
        q = self.q(x).view(shape).transpose(1, 2)
        k = self.k(x).view(shape).transpose(1, 2)
        v = self.v(x).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.o(ctx.transpose(1, 2).reshape(b, w, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln1(x))
        return x + self.ff2(self.act(self.ff1(self.ln2(x))))


class TransformerSeqEncoder(nn.Module):
    """Encode (W, n_features) windows into d_model-dim vectors."""

    def __init__(
        self,
        n_features: int = 5,
        d_model: int = 20,
        n_heads: int = 2,
        n_layers: int = 2,
        d_ff: int | None = None,
        max_len: int = 512,
        pooling: str = "mean",
        seed: int = 0,
    ):
        super().__init__()
        if pooling not in ("mean", "last"):
            raise ValueError(f"unknown pooling {pooling!r}")
        d_ff = 4 * d_model if d_ff is None else d_ff
        gen = seeded_generator(seed)
        self.pooling = pooling
        self.d_model = d_model
        self.in_proj = nn.Linear(n_features, d_model)
        init_linear_(self.in_proj, gen)
        self.blocks = nn.ModuleList(
            EncoderBlock(d_model, n_heads, d_ff, gen) for _ in range(n_layers)
        )
        self.register_buffer(
            "positions",
            sinusoidal_positions(max_len, d_model).to(torch.get_default_dtype()),
            persistent=False,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, W, n_features) -> (B, d_model)."""
        if x.dim() != 3:
            raise ValueError(f"expected (batch, window, features), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite value in encoder input")
        w = x.shape[1]
        if w > self.positions.shape[0]:
            raise ValueError(f"window {w} exceeds max_len {self.positions.shape[0]}")
        h = self.in_proj(x) + self.positions[:w].to(x.dtype)
        for block in self.blocks:
            h = block(h)
        return h.mean(dim=1) if self.pooling == "mean" else h[:, -1]

    @torch.no_grad()
    def encode(self, window: np.ndarray) -> np.ndarray:
        """Convenience single-window path: runs the batched forward on B=1."""
        return self.encode_batch(np.asarray(window)[None])[0]

    @torch.no_grad()
    def encode_batch(self, windows: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(windows)).to(self.in_proj.weight.dtype)
        return self.forward(x).cpu().numpy()


class RecurrentSeqEncoder(nn.Module):
    """LSTM over the window, pooled the same way as the transformer."""

    def __init__(
        self,
        n_features: int = 5,
        d_model: int = 20,
        pooling: str = "mean",
        seed: int = 0,
    ):
        super().__init__()
        if pooling not in ("mean", "last"):
            raise ValueError(f"unknown pooling {pooling!r}")
        gen = seeded_generator(seed)
        self.pooling = pooling
        self.d_model = d_model
        # One fused projection per gate bank: input->4d and hidden->4d, gate
        # order (input, forget, cell, output).
        self.wx = nn.Linear(n_features, 4 * d_model)
        self.wh = nn.Linear(d_model, 4 * d_model, bias=False)
        init_linear_(self.wx, gen)
        init_linear_(self.wh, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3:
            raise ValueError(f"expected (batch, window, features), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite value in encoder input")
        b, w, _ = x.shape
        d = self.d_model
        h = x.new_zeros(b, d)
        c = x.new_zeros(b, d)
        outputs = []
        for t in range(w):
            gates = self.wx(x[:, t]) + self.wh(h)
            i, f, g, o = gates.split(d, dim=-1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(c)
            outputs.append(h)
        stacked = torch.stack(outputs, dim=1)
        return stacked.mean(dim=1) if self.pooling == "mean" else stacked[:, -1]

    @torch.no_grad()
    def encode(self, window: np.ndarray) -> np.ndarray:
        return self.encode_batch(np.asarray(window)[None])[0]

    @torch.no_grad()
    def encode_batch(self, windows: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(windows)).to(self.wx.weight.dtype)
        return self.forward(x).cpu().numpy()


def build_seq_encoder(kind: str, **kwargs) -> nn.Module:
    if kind == "transformer":
        return TransformerSeqEncoder(**kwargs)
    if kind == "lstm":
        return RecurrentSeqEncoder(**kwargs)
    raise ValueError(f"unknown sequential encoder kind {kind!r}")

"""Sequential encoder tests.

The transformer and LSTM forward passes are checked against independent
numpy re-implementations run in float64, plus targeted hand-derived cases
(gate layout, zero-weight nulls, position-table closed form).
"""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from helpers import assert_grads_close
from tkgrank.seq_encoder import (
    RecurrentSeqEncoder,
    TransformerSeqEncoder,
    build_seq_encoder,
    sinusoidal_positions,
)

# ---------------------------------------------------------------------------
# Independent numpy reference implementations
# ---------------------------------------------------------------------------


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def np_gelu(x):
    return np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in x.ravel()]).reshape(x.shape)


def np_layernorm(x, weight, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)  # biased, matching torch LayerNorm
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def np_sinusoidal(length, dim):
    """Loop formulation of the classic sin/cos position table."""
    table = np.zeros((length, dim))
    for pos in range(length):
        for j in range(0, dim, 2):
            angle = pos / 10000.0 ** (j / dim)
            table[pos, j] = math.sin(angle)
            if j + 1 < dim:
                table[pos, j + 1] = math.cos(angle)
    return table


def _params64(model):
    return {k: v.detach().cpu().double().numpy() for k, v in model.state_dict().items()}


def np_transformer_forward(model, x):
    """Pure-numpy replica of TransformerSeqEncoder.forward, float64 in/out."""
    p = _params64(model)
    batch, window, _ = x.shape
    d_model = model.d_model
    # The buffer is built in float64 and stored in float32; replicate the cast.
    positions = np_sinusoidal(window, d_model).astype(np.float32).astype(np.float64)
    h = x @ p["in_proj.weight"].T + p["in_proj.bias"] + positions

    n_layers = len(model.blocks)
    n_heads = model.blocks[0].n_heads
    d_head = d_model // n_heads
    for layer in range(n_layers):
        pre = f"blocks.{layer}"

        def lin(name, z, pre=pre):
            return z @ p[f"{pre}.{name}.weight"].T + p[f"{pre}.{name}.bias"]

        normed = np_layernorm(h, p[f"{pre}.ln1.weight"], p[f"{pre}.ln1.bias"])
        shape = (batch, window, n_heads, d_head)
        q = lin("q", normed).reshape(shape).transpose(0, 2, 1, 3)
        k = lin("k", normed).reshape(shape).transpose(0, 2, 1, 3)
        v = lin("v", normed).reshape(shape).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d_head)
        ctx = np_softmax(scores) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(batch, window, d_model)
        h = h + lin("o", ctx)

        normed = np_layernorm(h, p[f"{pre}.ln2.weight"], p[f"{pre}.ln2.bias"])
        h = h + lin("ff2", np_gelu(lin("ff1", normed)))

    return h.mean(axis=1) if model.pooling == "mean" else h[:, -1]


def np_lstm_forward(model, x):
    """Pure-numpy replica of RecurrentSeqEncoder.forward, float64 in/out."""
    p = _params64(model)
    batch, window, _ = x.shape
    d = model.d_model
    h = np.zeros((batch, d))
    c = np.zeros((batch, d))
    outputs = []
    for t in range(window):
        gates = x[:, t] @ p["wx.weight"].T + p["wx.bias"] + h @ p["wh.weight"].T
        i, f, g, o = (gates[:, j * d : (j + 1) * d] for j in range(4))
        c = np_sigmoid(f) * c + np_sigmoid(i) * np.tanh(g)
        h = np_sigmoid(o) * np.tanh(c)
        outputs.append(h)
    stacked = np.stack(outputs, axis=1)
    return stacked.mean(axis=1) if model.pooling == "mean" else stacked[:, -1]


def _windows(batch, window, features, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch, window, features))


# ---------------------------------------------------------------------------
# Position table
# ---------------------------------------------------------------------------


class TestSinusoidalPositions:
    def test_position_zero_alternates_zero_one(self):
        table = sinusoidal_positions(4, 8).numpy()
        assert np.array_equal(table[0, 0::2], np.zeros(4))
        assert np.array_equal(table[0, 1::2], np.ones(4))

    def test_matches_closed_form(self):
        table = sinusoidal_positions(7, 6).numpy()
        expected = np_sinusoidal(7, 6)
        np.testing.assert_allclose(table, expected, atol=1e-12)

    def test_odd_dim_supported(self):
        table = sinusoidal_positions(5, 5).numpy()
        assert table.shape == (5, 5)
        assert np.isfinite(table).all()
        np.testing.assert_allclose(table, np_sinusoidal(5, 5), atol=1e-12)

    def test_values_bounded(self):
        table = sinusoidal_positions(64, 20).numpy()
        assert np.abs(table).max() <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# Transformer encoder
# ---------------------------------------------------------------------------


class TestTransformerOracle:
    @pytest.mark.parametrize("pooling", ["mean", "last"])
    def test_forward_matches_numpy(self, pooling):
        model = TransformerSeqEncoder(
            n_features=5, d_model=8, n_heads=2, n_layers=2, pooling=pooling, seed=7
        ).double()
        x = _windows(3, 7, 5, seed=1)
        got = model.encode_batch(x)
        want = np_transformer_forward(model, x)
        assert got.dtype == np.float64
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_single_layer_single_head(self):
        model = TransformerSeqEncoder(
            n_features=2, d_model=4, n_heads=1, n_layers=1, d_ff=6, seed=3
        ).double()
        x = _windows(2, 4, 2, seed=2)
        np.testing.assert_allclose(
            model.encode_batch(x), np_transformer_forward(model, x), atol=1e-10
        )

    def test_float32_path_close_to_float64_oracle(self):
        model = TransformerSeqEncoder(n_features=5, d_model=8, n_heads=2, seed=7)
        x = _windows(3, 7, 5, seed=1)
        got = model.encode_batch(x.astype(np.float32))
        want = np_transformer_forward(model, x)
        assert got.dtype == np.float32
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)


class TestTransformerBehavior:
    def test_same_seed_same_parameters(self):
        a = TransformerSeqEncoder(seed=42)
        b = TransformerSeqEncoder(seed=42)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_different_seed_different_parameters(self):
        a = TransformerSeqEncoder(seed=0)
        b = TransformerSeqEncoder(seed=1)
        assert not torch.equal(a.in_proj.weight, b.in_proj.weight)

    def test_params_independent_of_global_rng(self):
        torch.manual_seed(0)
        a = TransformerSeqEncoder(seed=9)
        torch.manual_seed(987654)
        b = TransformerSeqEncoder(seed=9)
        for va, vb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(va, vb)

    def test_encode_batch_matches_encode(self):
        model = TransformerSeqEncoder(n_features=5, d_model=8, n_heads=2, seed=5)
        x = _windows(6, 9, 5, seed=3).astype(np.float32)
        batched = model.encode_batch(x)
        singles = np.stack([model.encode(row) for row in x])
        np.testing.assert_array_equal(batched, singles)

    def test_batch_rows_independent(self):
        model = TransformerSeqEncoder(n_features=3, d_model=8, n_heads=2, seed=5)
        x = _windows(5, 6, 3, seed=4).astype(np.float32)
        perm = np.array([4, 2, 0, 3, 1])
        np.testing.assert_array_equal(model.encode_batch(x[perm]), model.encode_batch(x)[perm])

    def test_mean_pooling_is_mean_of_last_positions(self):
        # Same seed => identical weights; a mean-pooled encoder must agree with
        # averaging per-position states of the last-pooled run over prefixes is
        # not well-defined, so check directly against the oracle's pre-pool h.
        mean_model = TransformerSeqEncoder(n_features=4, d_model=8, n_heads=2, seed=11, pooling="mean").double()
        last_model = TransformerSeqEncoder(n_features=4, d_model=8, n_heads=2, seed=11, pooling="last").double()
        x = _windows(2, 5, 4, seed=6)
        np.testing.assert_allclose(
            mean_model.encode_batch(x), np_transformer_forward(mean_model, x), atol=1e-10
        )
        np.testing.assert_allclose(
            last_model.encode_batch(x), np_transformer_forward(last_model, x), atol=1e-10
        )

    def test_rejects_wrong_rank(self):
        model = TransformerSeqEncoder()
        with pytest.raises(ValueError, match="batch, window, features"):
            model(torch.zeros(3, 5))

    def test_rejects_nonfinite_input(self):
        model = TransformerSeqEncoder()
        bad = np.zeros((1, 4, 5), dtype=np.float32)
        bad[0, 2, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            model.encode_batch(bad)
        bad[0, 2, 1] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            model.encode_batch(bad)

    def test_rejects_window_beyond_max_len(self):
        model = TransformerSeqEncoder(max_len=8)
        with pytest.raises(ValueError, match="max_len"):
            model.encode_batch(np.zeros((1, 9, 5), dtype=np.float32))

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            TransformerSeqEncoder(d_model=10, n_heads=3)

    def test_rejects_unknown_pooling(self):
        with pytest.raises(ValueError, match="pooling"):
            TransformerSeqEncoder(pooling="max")

    def test_position_table_excluded_from_checkpoints(self):
        model = TransformerSeqEncoder()
        assert "positions" not in model.state_dict()


# ---------------------------------------------------------------------------
# Recurrent encoder
# ---------------------------------------------------------------------------


class TestRecurrentOracle:
    @pytest.mark.parametrize("pooling", ["mean", "last"])
    def test_forward_matches_numpy(self, pooling):
        model = RecurrentSeqEncoder(n_features=5, d_model=6, pooling=pooling, seed=13).double()
        x = _windows(3, 8, 5, seed=9)
        got = model.encode_batch(x)
        np.testing.assert_allclose(got, np_lstm_forward(model, x), atol=1e-12)

    def test_zero_parameters_give_zero_output(self):
        model = RecurrentSeqEncoder(n_features=3, d_model=4, seed=0)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        out = model.encode_batch(_windows(2, 5, 3).astype(np.float32))
        np.testing.assert_array_equal(out, np.zeros((2, 4), dtype=np.float32))

    def test_gate_bank_layout(self):
        # Zero every weight and drive the gates purely through the input bias,
        # one quarter per gate: +10 on the first (input gate), -10 on the
        # second (forget), +10 on the third (cell candidate), 0 on the fourth
        # (output). Two steps of the recurrence then have the closed form
        #   c1 = sigmoid(10)*tanh(10),  c2 = sigmoid(-10)*c1 + sigmoid(10)*tanh(10)
        #   h2 = sigmoid(0)*tanh(c2)
        # Any permutation of the gate banks changes the result by orders of
        # magnitude, so this pins the (input, forget, cell, output) order.
        d = 4
        model = RecurrentSeqEncoder(n_features=2, d_model=d, pooling="last", seed=0)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            model.wx.bias[0 * d : 1 * d] = 10.0
            model.wx.bias[1 * d : 2 * d] = -10.0
            model.wx.bias[2 * d : 3 * d] = 10.0
        sig = lambda z: 1.0 / (1.0 + math.exp(-z))
        c1 = sig(10) * math.tanh(10)
        c2 = sig(-10) * c1 + sig(10) * math.tanh(10)
        expected = sig(0) * math.tanh(c2)
        out = model.encode_batch(np.zeros((1, 2, 2), dtype=np.float32))
        np.testing.assert_allclose(out, np.full((1, d), expected), rtol=1e-6)

    def test_encode_batch_matches_encode(self):
        model = RecurrentSeqEncoder(n_features=5, d_model=6, seed=21)
        x = _windows(4, 7, 5, seed=10).astype(np.float32)
        batched = model.encode_batch(x)
        singles = np.stack([model.encode(row) for row in x])
        # BLAS dispatches matrix-vector for batch 1 and matrix-matrix above,
        # so the recurrence accumulates a few ulps of divergence per step.
        np.testing.assert_allclose(batched, singles, rtol=1e-5, atol=1e-7)

    def test_rejects_wrong_rank_and_nonfinite(self):
        model = RecurrentSeqEncoder()
        with pytest.raises(ValueError, match="batch, window, features"):
            model(torch.zeros(2, 5))
        bad = np.full((1, 3, 5), np.nan, dtype=np.float32)
        with pytest.raises(ValueError, match="non-finite"):
            model.encode_batch(bad)

    def test_rejects_unknown_pooling(self):
        with pytest.raises(ValueError, match="pooling"):
            RecurrentSeqEncoder(pooling="sum")

    def test_seeded_determinism(self):
        a = RecurrentSeqEncoder(seed=8)
        b = RecurrentSeqEncoder(seed=8)
        c = RecurrentSeqEncoder(seed=9)
        assert torch.equal(a.wx.weight, b.wx.weight)
        assert torch.equal(a.wh.weight, b.wh.weight)
        assert not torch.equal(a.wx.weight, c.wx.weight)


# ---------------------------------------------------------------------------
# Gradients and builder
# ---------------------------------------------------------------------------


class TestGradients:
    def test_transformer_gradients(self):
        model = TransformerSeqEncoder(
            n_features=2, d_model=4, n_heads=2, n_layers=1, d_ff=6, seed=3
        ).double()
        x = torch.tensor(_windows(2, 3, 2, seed=5))
        loss_fn = lambda: (model(x) ** 2).sum()
        assert_grads_close(loss_fn, model.parameters())

    def test_recurrent_gradients(self):
        model = RecurrentSeqEncoder(n_features=2, d_model=3, seed=4).double()
        x = torch.tensor(_windows(2, 4, 2, seed=6))
        loss_fn = lambda: (model(x) ** 2).sum()
        assert_grads_close(loss_fn, model.parameters())


class TestBuilder:
    def test_builds_each_kind(self):
        assert isinstance(build_seq_encoder("transformer", d_model=8, n_heads=2), TransformerSeqEncoder)
        assert isinstance(build_seq_encoder("lstm", d_model=8), RecurrentSeqEncoder)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown sequential encoder"):
            build_seq_encoder("gru")

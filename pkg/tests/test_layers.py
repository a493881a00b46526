"""Neural blocks: attention against a brute-force per-head oracle, FFN and
position table against scalar loops."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fdcheck import fd_check
from mmdial import layers as L
from mmdial import tensor as T
from mmdial.errors import ConfigError, ContractError
from mmdial.tensor import Tensor


def mha(rng, d, heads):
    return L.MultiHeadAttentionParams.init(rng, d, heads)


class TestAttention:
    def test_single_key_forces_weight_one(self):
        """With one key the softmax has nothing to choose; every output row
        is v0 pushed through the V and O projections."""
        rng = np.random.default_rng(42)
        p = mha(rng, 4, 2)
        q = Tensor(rng.standard_normal((3, 4)))
        kv = Tensor(rng.standard_normal((1, 4)))
        out = L.multi_head_attention(q, kv, kv, None, p)
        want = (kv.data @ p.w_v.data) @ p.w_o.data
        assert_allclose(out.data, np.repeat(want, 3, axis=0), atol=1e-12)

    def test_mask_single_column_equals_single_key(self):
        rng = np.random.default_rng(1)
        p = mha(rng, 4, 2)
        q = Tensor(rng.standard_normal((2, 4)))
        k = Tensor(rng.standard_normal((5, 4)))
        v = Tensor(rng.standard_normal((5, 4)))
        j = 3
        mask = np.zeros((2, 5), dtype=bool)
        mask[:, j] = True
        masked = L.multi_head_attention(q, k, v, mask, p)
        only_j = L.multi_head_attention(
            q, Tensor(k.data[j : j + 1]), Tensor(v.data[j : j + 1]), None, p
        )
        assert_allclose(masked.data, only_j.data, atol=1e-10)

    def test_matches_brute_force_head_split(self):
        """Recompute head by head with sliced projection columns and plain
        numpy, no shared code with the implementation."""
        rng = np.random.default_rng(7)
        d, heads, dh = 4, 2, 2
        p = mha(rng, d, heads)
        q = rng.standard_normal((3, d))
        k = rng.standard_normal((5, d))
        v = rng.standard_normal((5, d))

        parts = []
        for h in range(heads):
            cols = slice(h * dh, (h + 1) * dh)
            qh = q @ p.w_q.data[:, cols]
            kh = k @ p.w_k.data[:, cols]
            vh = v @ p.w_v.data[:, cols]
            scores = qh @ kh.T / np.sqrt(dh)
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            att = e / e.sum(axis=-1, keepdims=True)
            parts.append(att @ vh)
        want = np.concatenate(parts, axis=1) @ p.w_o.data

        got = L.multi_head_attention(Tensor(q), Tensor(k), Tensor(v), None, p)
        assert_allclose(got.data, want, atol=1e-10)

    def test_output_rows_are_convex_combinations(self):
        """With identity V/O the output must stay inside the hull of the value
        rows: bounded componentwise and under random linear functionals."""
        rng = np.random.default_rng(3)
        p = mha(rng, 4, 2)
        p.w_v = Tensor(np.eye(4))
        p.w_o = Tensor(np.eye(4))
        q = Tensor(rng.standard_normal((3, 4)))
        v = rng.standard_normal((6, 4))
        out = L.multi_head_attention(q, Tensor(v), Tensor(v), None, p).data
        eps = 1e-9
        assert (out <= v.max(axis=0) + eps).all()
        assert (out >= v.min(axis=0) - eps).all()
        for _ in range(10):
            f = rng.standard_normal(4)
            assert (out @ f <= (v @ f).max() + eps).all()

    def test_permuting_keys_and_values_together_is_invariant(self):
        rng = np.random.default_rng(9)
        p = mha(rng, 6, 3)
        q = Tensor(rng.standard_normal((2, 6)))
        k = rng.standard_normal((5, 6))
        v = rng.standard_normal((5, 6))
        base = L.multi_head_attention(q, Tensor(k), Tensor(v), None, p)
        perm = rng.permutation(5)
        shuffled = L.multi_head_attention(q, Tensor(k[perm]), Tensor(v[perm]), None, p)
        assert_allclose(base.data, shuffled.data, atol=1e-12)

    def test_masked_scores_stay_finite(self):
        rng = np.random.default_rng(4)
        p = mha(rng, 4, 2)
        q = Tensor(rng.standard_normal((3, 4)))
        k = Tensor(rng.standard_normal((3, 4)))
        out = L.multi_head_attention(q, k, k, L.causal_mask(3), p)
        assert np.isfinite(out.data).all()

    def test_empty_keys_rejected(self):
        rng = np.random.default_rng(0)
        p = mha(rng, 4, 2)
        q = Tensor(np.zeros((2, 4)))
        empty = Tensor(np.zeros((0, 4)))
        with pytest.raises(ContractError):
            L.multi_head_attention(q, empty, empty, None, p)

    def test_bad_mask_shape_rejected(self):
        rng = np.random.default_rng(0)
        p = mha(rng, 4, 2)
        x = Tensor(np.zeros((2, 4)))
        with pytest.raises(ContractError):
            L.multi_head_attention(x, x, x, np.ones((3, 2), dtype=bool), p)

    def test_fully_masked_row_rejected(self):
        rng = np.random.default_rng(0)
        p = mha(rng, 4, 2)
        x = Tensor(np.zeros((2, 4)))
        mask = np.ones((2, 2), dtype=bool)
        mask[1, :] = False
        with pytest.raises(ContractError):
            L.multi_head_attention(x, x, x, mask, p)

    def test_heads_must_divide_d_model(self):
        with pytest.raises(ConfigError):
            mha(np.random.default_rng(0), 6, 4)


class TestPositionalEncoding:
    def test_position_zero_alternates_zero_one(self):
        pe = L.positional_encoding(3, 6)
        assert_allclose(pe.data[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])

    def test_matches_scalar_formula(self):
        pe = L.positional_encoding(5, 8).data
        for pos in range(5):
            for i in range(8):
                angle = pos / 10000 ** ((i - i % 2) / 8)
                want = np.sin(angle) if i % 2 == 0 else np.cos(angle)
                assert abs(pe[pos, i] - want) < 1e-12

    def test_entries_bounded(self):
        pe = L.positional_encoding(40, 10).data
        assert (np.abs(pe) <= 1.0).all()

    def test_not_trainable(self):
        assert L.positional_encoding(4, 4).requires_grad is False


class TestFFN:
    def test_zero_weights_give_output_bias(self):
        p = L.FFNParams(
            w1=Tensor(np.zeros((4, 8))),
            b1=Tensor(np.zeros(8)),
            w2=Tensor(np.zeros((8, 4))),
            b2=Tensor(np.full(4, 2.5)),
        )
        out = L.ffn(Tensor(np.random.default_rng(0).standard_normal((3, 4))), p)
        assert_allclose(out.data, np.full((3, 4), 2.5))

    def test_identity_weights_pass_nonnegative_input_through(self):
        p = L.FFNParams(
            w1=Tensor(np.eye(4)), b1=Tensor(np.zeros(4)),
            w2=Tensor(np.eye(4)), b2=Tensor(np.zeros(4)),
        )
        x = np.abs(np.random.default_rng(1).standard_normal((3, 4)))
        assert_allclose(L.ffn(Tensor(x), p).data, x)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(5)
        p = L.FFNParams.init(rng, 3, 7)
        p.b1 = Tensor(rng.standard_normal(7), requires_grad=True)
        p.b2 = Tensor(rng.standard_normal(3), requires_grad=True)
        x = rng.standard_normal((4, 3))
        want = np.zeros((4, 3))
        for r in range(4):
            hidden = [max(0.0, sum(x[r, i] * p.w1.data[i, j] for i in range(3)) + p.b1.data[j]) for j in range(7)]
            for o in range(3):
                want[r, o] = sum(hidden[j] * p.w2.data[j, o] for j in range(7)) + p.b2.data[o]
        assert_allclose(L.ffn(Tensor(x), p).data, want, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_layer_gradients_match_finite_differences(seed):
    """Attention (masked and not), FFN, and layer norm wrappers all pass the
    finite-difference check end to end."""
    rng = np.random.default_rng(seed)
    d = 4
    att = L.MultiHeadAttentionParams.init(rng, d, 2)
    ff = L.FFNParams.init(rng, d, 6)
    ln = L.LayerNormParams.init(d)
    q = Tensor(rng.standard_normal((3, d)), requires_grad=True)
    kv = Tensor(rng.standard_normal((5, d)), requires_grad=True)
    mask = np.ones((3, 5), dtype=bool)
    mask[2, 1:] = False
    mix = Tensor(rng.standard_normal((3, d)))

    params = {"q": q, "kv": kv, "ln.gain": ln.gain, "ln.bias": ln.bias}
    params.update(att.named("att"))
    params.update(ff.named("ff"))

    def make_loss():
        h = L.multi_head_attention(q, kv, kv, mask, att)
        return T.tensor_sum(T.mul(ln(L.ffn(h, ff)), mix))

    assert fd_check(make_loss, params) < 1e-6

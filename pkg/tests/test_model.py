"""Transformer component tests.

masked_attention is checked against a tiny per-query-loop reference that
builds the softmax by hand; RoPE gets its defining algebraic properties
(norm preservation, relative-offset dependence) rather than golden values.
"""

import math

import pytest
import torch

from cflm.config import CFConfig, ModelConfig, Vocabulary
from cflm.layout import build_layout
from cflm.masks import build_mask
from cflm.model import apply_rope, masked_attention, new_model, rope_tables

torch.manual_seed(0)


def naive_attention(q, k, v, mask_bits, cos, sin, positions):
    """Scalar-loop reference: one softmax per (batch, head, query) row."""
    q = apply_rope(q.double(), positions, cos, sin)
    k = apply_rope(k.double(), positions, cos, sin)
    v = v.double()
    b, h, t, d = q.shape
    out = torch.zeros_like(v)
    for bi in range(b):
        for hi in range(h):
            for qi in range(t):
                keys = [ki for ki in range(t) if mask_bits[qi, ki]]
                scores = torch.tensor(
                    [float(q[bi, hi, qi] @ k[bi, hi, ki]) / math.sqrt(d) for ki in keys],
                    dtype=torch.float64,
                )
                w = torch.softmax(scores, dim=0)
                for wi, ki in zip(w, keys):
                    out[bi, hi, qi] += wi * v[bi, hi, ki]
    return out


class TestMaskedAttention:
    def test_matches_naive_reference(self):
        torch.manual_seed(11)
        b, h, t, d = 2, 2, 6, 8
        q, k, v = (torch.randn(b, h, t, d, dtype=torch.float64) for _ in range(3))
        mask = torch.rand(t, t) < 0.6
        mask |= torch.eye(t, dtype=torch.bool)  # keep every row nonempty
        cos, sin = rope_tables(t, d)
        pos = torch.arange(t)
        got = masked_attention(q, k, v, mask, pos, pos, cos, sin)
        want = naive_attention(q, k, v, mask, cos, sin, pos)
        assert (got - want).abs().max() < 1e-12

    def test_single_visible_key_copies_value(self):
        # With one visible key the softmax weight is exactly 1.
        torch.manual_seed(3)
        q = torch.randn(1, 1, 3, 4, dtype=torch.float64)
        k = torch.randn(1, 1, 3, 4, dtype=torch.float64)
        v = torch.randn(1, 1, 3, 4, dtype=torch.float64)
        mask = torch.eye(3, dtype=torch.bool)
        cos, sin = rope_tables(3, 4)
        out = masked_attention(q, k, v, mask, torch.arange(3), torch.arange(3), cos, sin)
        assert torch.equal(out, v)

    def test_masked_key_has_no_influence(self):
        # Changing an invisible key/value must not move any output at all.
        torch.manual_seed(5)
        b, h, t, d = 1, 2, 5, 8
        q = torch.randn(b, h, t, d, dtype=torch.float64)
        k = torch.randn(b, h, t, d, dtype=torch.float64)
        v = torch.randn(b, h, t, d, dtype=torch.float64)
        mask = torch.tril(torch.ones(t, t, dtype=torch.bool))
        mask[:, 2] = False
        mask[2, 2] = True  # key 2 visible only to itself
        cos, sin = rope_tables(t, d)
        pos = torch.arange(t)
        base = masked_attention(q, k, v, mask, pos, pos, cos, sin)
        k2, v2 = k.clone(), v.clone()
        k2[:, :, 2] += 1e6
        v2[:, :, 2] -= 1e6
        bumped = masked_attention(q, k2, v2, mask, pos, pos, cos, sin)
        rows = [i for i in range(t) if i != 2]
        assert torch.equal(base[:, :, rows], bumped[:, :, rows])

    def test_empty_row_rejected(self):
        q = torch.randn(1, 1, 2, 4, dtype=torch.float64)
        mask = torch.tensor([[True, False], [False, False]])
        cos, sin = rope_tables(2, 4)
        with pytest.raises(ValueError):
            masked_attention(q, q, q, mask, torch.arange(2), torch.arange(2), cos, sin)


class TestRope:
    def test_rotation_preserves_norm(self):
        torch.manual_seed(7)
        x = torch.randn(1, 2, 10, 16, dtype=torch.float64)
        cos, sin = rope_tables(10, 16)
        y = apply_rope(x, torch.arange(10), cos, sin)
        assert torch.allclose(
            x.norm(dim=-1), y.norm(dim=-1), atol=1e-12, rtol=0
        )

    def test_position_zero_is_identity(self):
        x = torch.randn(1, 1, 4, 8, dtype=torch.float64)
        cos, sin = rope_tables(4, 8)
        y = apply_rope(x, torch.zeros(4, dtype=torch.long), cos, sin)
        assert torch.allclose(x, y, atol=0, rtol=0)

    def test_scores_depend_only_on_offset(self):
        # <rot(q, p+s), rot(k, p'+s)> must be invariant in s.
        torch.manual_seed(9)
        q = torch.randn(1, 1, 1, 16, dtype=torch.float64)
        k = torch.randn(1, 1, 1, 16, dtype=torch.float64)
        cos, sin = rope_tables(400, 16)

        def score(pq, pk):
            rq = apply_rope(q, torch.tensor([pq]), cos, sin)
            rk = apply_rope(k, torch.tensor([pk]), cos, sin)
            return float((rq * rk).sum())

        base = score(7, 3)
        for shift in (1, 50, 333):
            assert abs(score(7 + shift, 3 + shift) - base) < 1e-10


class TestCodecLM:
    def _tiny(self, role="ar", num_layers=1, seed=0):
        vocab = Vocabulary(text_size=5, speech_size=12, num_layers=num_layers)
        cfg = ModelConfig(dim=16, num_blocks=2, num_heads=2, max_positions=64,
                          num_layers=num_layers)
        return new_model(cfg, vocab, role=role, seed=seed), vocab, cfg

    def test_seeded_construction_is_deterministic(self):
        m1, _, _ = self._tiny(seed=42)
        m2, _, _ = self._tiny(seed=42)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)

    def test_ar_logit_shape_and_range_check(self):
        model, vocab, _ = self._tiny()
        cf = CFConfig(g=2, n_ar=4, mode="cf")
        lay = build_layout(cf, 2, 0, 4)
        mask = torch.from_numpy(build_mask(lay, cf).bits)
        tokens = torch.randint(0, vocab.total_size, (3, lay.total_len))
        logits = model.forward_ar(tokens, mask, torch.arange(lay.total_len))
        assert logits.shape == (3, lay.total_len, vocab.speech_size + 1)
        bad = tokens.clone()
        bad[0, 0] = vocab.total_size
        with pytest.raises(ValueError):
            model.forward_ar(bad, mask, torch.arange(lay.total_len))

    def test_batch_of_one_equals_batch_row(self):
        model, vocab, _ = self._tiny()
        model = model.double()
        cf = CFConfig(g=2, n_ar=4, mode="cf")
        lay = build_layout(cf, 2, 0, 6)
        mask = torch.from_numpy(build_mask(lay, cf).bits)
        pos = torch.arange(lay.total_len)
        torch.manual_seed(1)
        tokens = torch.randint(0, vocab.total_size, (4, lay.total_len))
        with torch.no_grad():
            batch = model.forward_ar(tokens, mask, pos)
            single = model.forward_ar(tokens[2:3], mask, pos)
        assert (batch[2] - single[0]).abs().max() < 1e-12

    def test_nar_layer_embedding_matters(self):
        model, vocab, cfg = self._tiny(role="nar", num_layers=3)
        cf = CFConfig(g=2, n_ar=4, n_nar=3, mode="cf")
        lay = build_layout(cf, 2, 0, 5, with_eos=False, with_bos=False, insert_w=False)
        from cflm.masks import build_prompt_local_nar

        mask = torch.from_numpy(build_prompt_local_nar(lay, cf.n_nar).bits)
        x = torch.randn(1, lay.total_len, cfg.dim)
        pos = torch.arange(lay.total_len)
        with torch.no_grad():
            l2 = model.forward_nar(x, 2, mask, pos)
            l3 = model.forward_nar(x, 3, mask, pos)
        # different layer index -> different injected embedding -> the
        # backbone activations cannot coincide
        assert l2.shape == (1, lay.total_len, vocab.speech_size)
        assert not torch.allclose(
            model.layer_embed.weight[1], model.layer_embed.weight[2]
        )

    def test_nar_rejects_out_of_range_layer(self):
        model, _, cfg = self._tiny(role="nar", num_layers=2)
        x = torch.randn(1, 3, cfg.dim)
        mask = torch.ones(3, 3, dtype=torch.bool)
        with pytest.raises(ValueError):
            model.forward_nar(x, 1, mask, torch.arange(3))
        with pytest.raises(ValueError):
            model.forward_nar(x, 3, mask, torch.arange(3))

    def test_role_mixing_rejected(self):
        ar, vocab, cfg = self._tiny()
        nar, _, _ = self._tiny(role="nar", num_layers=2)
        mask = torch.ones(2, 2, dtype=torch.bool)
        with pytest.raises(ValueError):
            ar.forward_nar(torch.randn(1, 2, cfg.dim), 2, mask, torch.arange(2))
        with pytest.raises(ValueError):
            nar.forward_ar(torch.zeros(1, 2, dtype=torch.long), mask, torch.arange(2))

"""Slot-layout tests.

The layout is the ground truth every mask builder and the decoding loops
share, so the expected values here are enumerated by hand from the layout
rules rather than computed with the library's own helpers.
"""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cflm.config import CFConfig
from cflm.layout import SequenceLayout, SlotKind, build_layout, span_count


def kinds_str(layout: SequenceLayout) -> str:
    """Compact one-char rendering: T/P/B/R/W/E."""
    short = {
        SlotKind.TEXT: "T",
        SlotKind.PROMPT: "P",
        SlotKind.BOS: "B",
        SlotKind.RAW: "R",
        SlotKind.W: "W",
        SlotKind.EOS: "E",
    }
    return "".join(short[k] for k in layout.kinds)


class TestSpanCount:
    """Number of complete compression spans strictly behind the window."""

    def test_hand_cases(self):
        # t=60, n_ar=50, g=10: tokens 0..9 form one complete span behind
        # the window -> 1.  t=50 leaves nothing behind -> 0.
        assert span_count(60, g=10, n_ar=50) == 1
        assert span_count(50, g=10, n_ar=50) == 0
        # (275 - 75) / 15 = 13.33 -> 13 complete spans.
        assert span_count(275, g=15, n_ar=75) == 13

    def test_small_values(self):
        assert span_count(0, g=2, n_ar=4) == 0
        assert span_count(4, g=2, n_ar=4) == 0
        assert span_count(5, g=2, n_ar=4) == 0  # (5-4)//2 == 0
        assert span_count(6, g=2, n_ar=4) == 1
        assert span_count(8, g=2, n_ar=4) == 2

    @given(t=st.integers(0, 4000), g=st.integers(1, 64), n_ar=st.integers(1, 200))
    @settings(max_examples=60)
    def test_counting_oracle(self, t, g, n_ar):
        # A span j (tokens j*g .. j*g+g-1) is countable once its last token
        # falls strictly behind the window start t - n_ar.
        expected = sum(1 for j in range(t) if j * g + g - 1 < t - n_ar)
        assert span_count(t, g=g, n_ar=n_ar) == expected


class TestBuildLayout:
    def test_reference_example(self):
        # text=2, no speech prompt, 5 raw tokens, g=2:
        # [T, T, BOS, R0, R1, W0, R2, R3, W1, R4, EOS]
        cf = CFConfig(g=2, n_ar=4, mode="cf")
        lay = build_layout(cf, text_len=2, speech_prompt_len=0, num_raw=5)
        assert kinds_str(lay) == "TTBRRWRRWRE"
        assert lay.prompt_len == 3  # text + BOS
        assert lay.total_len == 11
        assert lay.raw_pos == (3, 4, 6, 7, 9)
        assert lay.w_pos == (5, 8)
        assert lay.eos_slot == 10

    def test_w_slot_position_formula(self):
        # W_j sits at prompt_len + (j + 1) * g + j.
        cf = CFConfig(g=3, n_ar=6, mode="cf")
        lay = build_layout(cf, text_len=4, speech_prompt_len=2, num_raw=10)
        n_p = 4 + 2 + 1
        assert lay.prompt_len == n_p
        for j, slot in enumerate(lay.w_pos):
            assert slot == n_p + (j + 1) * 3 + j
        # 10 raw tokens at g=3 -> 3 complete spans, trailing token has no W.
        assert lay.num_w == 3

    def test_trailing_partial_span_has_no_w(self):
        cf = CFConfig(g=4, n_ar=8, mode="cf")
        for num_raw, expect_w in [(0, 0), (3, 0), (4, 1), (7, 1), (8, 2), (9, 2)]:
            lay = build_layout(cf, 1, 0, num_raw)
            assert lay.num_w == expect_w, num_raw

    def test_non_cf_modes_have_no_w(self):
        for mode in ("dense", "window"):
            cf = CFConfig(g=2, n_ar=4, mode=mode)
            lay = build_layout(cf, 2, 0, 6)
            assert lay.num_w == 0
            assert kinds_str(lay) == "TTBRRRRRRE"

    def test_speech_prompt_slots(self):
        cf = CFConfig(g=2, n_ar=4, mode="cf")
        lay = build_layout(cf, text_len=3, speech_prompt_len=2, num_raw=3)
        # the complete span (R0, R1) earns a W even this close to the end
        assert kinds_str(lay) == "TTTPPBRRWRE"
        assert lay.bos_slot == 5

    def test_eos_and_bos_optional(self):
        cf = CFConfig(g=2, n_ar=4, mode="cf")
        lay = build_layout(cf, 2, 1, 4, with_eos=False, with_bos=False, insert_w=False)
        assert kinds_str(lay) == "TTPRRRR"
        assert lay.bos_slot is None
        assert lay.eos_slot is None

    def test_raw_index_round_trip(self):
        cf = CFConfig(g=3, n_ar=6, mode="cf")
        lay = build_layout(cf, 2, 1, 11)
        for i, slot in enumerate(lay.raw_pos):
            assert lay.raw_index_of(slot) == i

    def test_span_of_matches_w_order(self):
        cf = CFConfig(g=2, n_ar=4, mode="cf")
        lay = build_layout(cf, 1, 0, 9)
        # raw token t belongs to span t // g
        for i, slot in enumerate(lay.raw_pos):
            assert lay.span_of[slot] == i // 2
        for j, slot in enumerate(lay.w_pos):
            assert lay.span_of[slot] == j

    def test_rejects_negative_lengths(self):
        cf = CFConfig(g=2, n_ar=4)
        with pytest.raises(ValueError):
            build_layout(cf, -1, 0, 4)
        with pytest.raises(ValueError):
            build_layout(cf, 2, 0, -2)

    @given(
        text_len=st.integers(0, 6),
        sp_len=st.integers(0, 4),
        num_raw=st.integers(0, 40),
        g=st.integers(1, 8),
    )
    @settings(max_examples=60)
    def test_total_length_identity(self, text_len, sp_len, num_raw, g):
        cf = CFConfig(g=g, n_ar=max(g, 4), mode="cf")
        lay = build_layout(cf, text_len, sp_len, num_raw)
        assert lay.total_len == text_len + sp_len + 1 + num_raw + num_raw // g + 1
        assert len(lay.raw_pos) == num_raw
        # W slots interleave strictly between raw slots
        for j, w in enumerate(lay.w_pos):
            assert lay.kinds[w - 1] == SlotKind.RAW

"""Configuration and vocabulary tests."""

from fractions import Fraction

import pytest

from cflm.config import (
    CFConfig,
    ModelConfig,
    Vocabulary,
    load_run_config,
    make_cf_config,
    parse_kv_text,
)


class TestCFConfig:
    def test_compression_rate(self):
        # 50 Hz codec, spans of 10 -> one compressed token per 5th of a
        # second: rate 50/10 = 5
        cfg = CFConfig(g=10, n_ar=50, frame_rate=50)
        assert cfg.compression_rate == Fraction(5, 1)
        assert CFConfig(g=4, n_ar=8, frame_rate=50).compression_rate == Fraction(25, 2)

    def test_validation(self):
        with pytest.raises(ValueError):
            CFConfig(g=0, n_ar=4)
        with pytest.raises(ValueError):
            CFConfig(g=2, n_ar=0)
        with pytest.raises(ValueError):
            CFConfig(g=2, n_ar=4, mode="blockwise")
        # compression needs the window to cover a whole span
        with pytest.raises(ValueError):
            CFConfig(g=8, n_ar=4, mode="cf")
        # ...but other modes don't care
        CFConfig(g=8, n_ar=4, mode="window")

    def test_make_cf_config(self):
        cfg = make_cf_config(4, 16, n_nar=32, frame_rate=75, mode="window")
        assert (cfg.g, cfg.n_ar, cfg.n_nar, cfg.frame_rate) == (4, 16, 32, 75)


class TestVocabulary:
    def test_id_layout(self):
        v = Vocabulary(text_size=10, speech_size=100)
        assert v.speech_base == 10
        assert v.speech_id(0) == 10
        assert v.speech_id(99) == 109
        assert (v.bos_id, v.eos_id, v.pad_id, v.w_id) == (110, 111, 112, 113)
        assert v.total_size == 114
        assert v.eos_index == 100  # head space: codewords then EOS

    def test_codeword_round_trip(self):
        v = Vocabulary(text_size=3, speech_size=7)
        for c in range(7):
            assert v.codeword_of(v.speech_id(c)) == c
        with pytest.raises(ValueError):
            v.codeword_of(2)  # a text id
        with pytest.raises(ValueError):
            v.codeword_of(v.bos_id)

    def test_validation(self):
        with pytest.raises(ValueError):
            Vocabulary(text_size=0, speech_size=4)
        with pytest.raises(ValueError):
            Vocabulary(text_size=2, speech_size=0)


class TestKvParsing:
    def test_basic(self):
        text = "g = 4\nn_ar = 16  # window\n\n# comment line\nmode = cf\n"
        assert parse_kv_text(text) == {"g": "4", "n_ar": "16", "mode": "cf"}

    def test_rejects_duplicates_and_garbage(self):
        with pytest.raises(ValueError):
            parse_kv_text("g = 1\ng = 2\n")
        with pytest.raises(ValueError):
            parse_kv_text("just some words\n")
        with pytest.raises(ValueError):
            parse_kv_text("g =\n")

    def test_load_run_config(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("g = 4\nn_ar = 12\nmode = cf\ndim = 32\nnum_heads = 4\nseed = 7\n")
        rc = load_run_config(path)
        assert rc.cf.g == 4 and rc.cf.n_ar == 12 and rc.cf.mode == "cf"
        assert rc.model.dim == 32 and rc.seed == 7

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("g = 4\nn_ar = 12\nwindow = 9\n")
        with pytest.raises(ValueError):
            load_run_config(path)


class TestModelConfig:
    def test_derived_dims(self):
        cfg = ModelConfig(dim=64, num_heads=4, ffn_mult=4)
        assert cfg.head_dim == 16
        assert cfg.ffn_hidden == 256

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(dim=30, num_heads=4)

"""Synthetic-corpus tests.

The corpus only earns its keep if rendering is exactly invertible — a
model that emits a reference utterance verbatim must score SER 0. The SER
hand cases were worked out with pencil and paper from the Levenshtein
definition.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cflm.synthcorpus import (
    SENTINEL,
    SILENCE,
    CorpusRecord,
    SynthSpec,
    build_motif_table,
    decode_speech,
    gen_corpus,
    levenshtein,
    read_corpus,
    render_utterance,
    speaker_match_rate,
    speaker_permutation,
    symbol_error_rate,
    write_corpus,
)


SPEC = SynthSpec(text_size=6, speech_size=24, seed=13)


class TestMotifTable:
    def test_shape_and_determinism(self):
        t1 = build_motif_table(SPEC)
        t2 = build_motif_table(SPEC)
        assert t1 == t2
        assert len(t1) == SPEC.text_size
        assert len(set(t1)) == SPEC.text_size  # pairwise distinct

    def test_onset_discipline(self):
        table = build_motif_table(SPEC)
        onsets = set(SPEC.onset_tokens)
        bodies = set(SPEC.body_tokens)
        for motif in table:
            assert motif[0] in onsets
            assert all(tok in bodies for tok in motif[1:])
            assert SILENCE not in motif

    def test_no_immediate_repeats(self):
        for motif in build_motif_table(SPEC):
            assert all(a != b for a, b in zip(motif, motif[1:]))

    def test_token_sets_partition_vocab(self):
        onsets, bodies = set(SPEC.onset_tokens), set(SPEC.body_tokens)
        assert onsets.isdisjoint(bodies)
        assert SILENCE not in onsets | bodies
        assert onsets | bodies | {SILENCE} == set(range(SPEC.speech_size))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SynthSpec(motif_len=(1, 3))  # single-token motifs banned
        with pytest.raises(ValueError):
            SynthSpec(silence_prob=1.0)
        with pytest.raises(ValueError):
            SynthSpec(repeat=(3, 2))
        with pytest.raises(ValueError):
            SynthSpec(speech_size=3)


class TestRoundTrip:
    def test_decode_inverts_render(self):
        table = build_motif_table(SPEC)
        rng = np.random.default_rng(5)
        for _ in range(40):
            text = [int(v) for v in rng.integers(0, SPEC.text_size, size=rng.integers(1, 12))]
            layers, _ = render_utterance(SPEC, table, text, 0, rng)
            assert decode_speech(layers[0], SPEC) == text

    def test_ser_zero_on_reference(self):
        for rec in gen_corpus(SPEC, 25, (1, 10)):
            assert symbol_error_rate(rec.speech[0], rec.text, SPEC) == 0.0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_any_seed(self, seed):
        spec = SynthSpec(text_size=5, speech_size=20, seed=seed)
        rec = gen_corpus(spec, 1, (1, 8))[0]
        assert decode_speech(rec.speech[0], spec) == list(rec.text)

    def test_alignment_spans_cover_motifs(self):
        table = build_motif_table(SPEC)
        rng = np.random.default_rng(2)
        text = [3, 1, 3, 0]
        layers, spans = render_utterance(SPEC, table, text, 0, rng)
        assert len(spans) == len(text)
        prev_end = 0
        for (start, end), symbol in zip(spans, text):
            assert prev_end <= start < end  # monotone, nonempty
            segment = [t for t in layers[0][start:end]]
            assert decode_speech(segment, SPEC) == [symbol]
            prev_end = end


class TestCorpusGeneration:
    def test_determinism(self):
        a = gen_corpus(SPEC, 10, (2, 6))
        b = gen_corpus(SPEC, 10, (2, 6))
        assert a == b

    def test_prefix_stability(self):
        # each record draws from its own stream, so growing the corpus
        # never changes earlier records
        short = gen_corpus(SPEC, 5, (2, 6))
        long = gen_corpus(SPEC, 9, (2, 6))
        assert long[:5] == short

    def test_expected_length_ratio(self):
        # tokens per symbol ~= silence_prob * E[run] + mean_motif * E[repeat],
        # conditioned on the motif table this seed actually drew
        spec = SynthSpec(text_size=6, speech_size=24, seed=1)
        records = gen_corpus(spec, 300, (4, 10))
        ratio = sum(len(r.speech[0]) for r in records) / sum(len(r.text) for r in records)
        table = build_motif_table(spec)
        mean_motif = sum(len(m) for m in table) / len(table)
        expect = 0.25 * 2.0 + mean_motif * 2.0
        assert abs(ratio - expect) / expect < 0.10

    def test_jsonl_round_trip(self, tmp_path):
        records = gen_corpus(SPEC, 8, (1, 6))
        path = tmp_path / "corpus.jsonl"
        write_corpus(path, records)
        assert read_corpus(path) == records


class TestSymbolErrorRate:
    def test_hand_cases(self):
        table = build_motif_table(SPEC)
        # exact render of symbols [2, 4] with no redundancy
        plain = list(table[2]) + list(table[4])
        assert symbol_error_rate(plain, [2, 4], SPEC) == 0.0
        # one substitution against a 2-symbol reference -> 0.5
        wrong = list(table[2]) + list(table[1])
        assert symbol_error_rate(wrong, [2, 4], SPEC) == 0.5
        # one deletion against a 4-symbol reference -> 0.25
        missing = list(table[0]) + list(table[1]) + list(table[2])
        assert symbol_error_rate(missing, [0, 1, 2, 3], SPEC) == 0.25

    def test_clipped_at_one(self):
        table = build_motif_table(SPEC)
        babble = list(table[0]) * 30
        assert symbol_error_rate(babble, [1], SPEC) == 1.0

    def test_empty_reference(self):
        assert symbol_error_rate([], [], SPEC) == 0.0
        table = build_motif_table(SPEC)
        assert symbol_error_rate(list(table[0]), [], SPEC) == 1.0

    def test_garbage_decodes_to_sentinel(self):
        # a lone body token cannot match any motif
        body = list(SPEC.body_tokens)[0]
        assert decode_speech([body], SPEC) == [SENTINEL]


class TestLevenshtein:
    def test_hand_cases(self):
        assert levenshtein([], []) == 0
        assert levenshtein([1, 2, 3], [1, 2, 3]) == 0
        assert levenshtein([1, 2, 3], [1, 3]) == 1
        assert levenshtein([1, 2], [3, 4]) == 2
        assert levenshtein([], [5, 6, 7]) == 3
        # kitten -> sitting, the classic 3
        assert levenshtein([0, 1, 2, 2, 3, 4], [5, 1, 2, 2, 1, 4, 6]) == 3

    @given(
        st.lists(st.integers(0, 5), max_size=8),
        st.lists(st.integers(0, 5), max_size=8),
    )
    @settings(max_examples=50)
    def test_metric_properties(self, a, b):
        d = levenshtein(a, b)
        assert d == levenshtein(b, a)
        assert d <= max(len(a), len(b))
        assert (d == 0) == (a == b)


class TestSpeakerLayers:
    SPEC2 = SynthSpec(text_size=5, speech_size=20, num_layers=2, num_speakers=4, seed=3)

    def test_permutation_is_bijective_and_seeded(self):
        for spk in range(self.SPEC2.num_speakers):
            perm = speaker_permutation(self.SPEC2, spk)
            assert sorted(perm) == list(range(20))
            assert np.array_equal(perm, speaker_permutation(self.SPEC2, spk))

    def test_speakers_differ(self):
        perms = [speaker_permutation(self.SPEC2, s) for s in range(4)]
        assert not any(
            np.array_equal(perms[i], perms[j]) for i in range(4) for j in range(i + 1, 4)
        )

    def test_match_rate_one_on_reference(self):
        for rec in gen_corpus(self.SPEC2, 12, (2, 6)):
            assert speaker_match_rate(rec.speech[0], rec.speech[1], rec.speaker, self.SPEC2) == 1.0

    def test_wrong_speaker_scores_low(self):
        # comparing against another speaker's permutation should look like
        # chance, i.e. about 1/speech_size, not 1.0
        recs = [r for r in gen_corpus(self.SPEC2, 40, (4, 8)) if r.speaker != 0]
        rates = [
            speaker_match_rate(r.speech[0], r.speech[1], 0, self.SPEC2) for r in recs
        ]
        assert np.mean(rates) < 0.3

    def test_requires_two_layers(self):
        with pytest.raises(ValueError):
            speaker_match_rate([1], [1], 0, SPEC)

    def test_three_layer_iteration(self):
        spec3 = SynthSpec(text_size=4, speech_size=16, num_layers=3, seed=9)
        rec = gen_corpus(spec3, 1, (3, 5))[0]
        perm = speaker_permutation(spec3, rec.speaker)
        l1 = np.asarray(rec.speech[0])
        assert tuple(perm[l1]) == rec.speech[1]
        assert tuple(perm[perm[l1]]) == rec.speech[2]

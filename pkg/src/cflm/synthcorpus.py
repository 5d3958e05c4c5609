"""Synthetic text-to-speech-token corpora with monotonic alignment.

Each text symbol owns a fixed motif of speech tokens. Utterances render
symbols left to right with controllable redundancy: every motif token is
repeated a random number of times (duration) and silence runs (token 0)
may precede any symbol. Token id 0 is reserved for silence; the remaining
ids are split into an onset set (motif first tokens only) and a body set
(every later token), so a decoder can re-segment a stream exactly: strip
silence, collapse immediate repeats, split before each onset token, look
the segment up in the motif table.

Layer 2 (when num_layers >= 2) recolors layer 1 through a speaker-keyed
permutation of the codeword space — the cheapest structure that forces a
refiner to consult the speech prompt for speaker identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import parse_kv_text

SILENCE = 0
SENTINEL = -1  # decoder output for an unrecognized segment


@dataclass(frozen=True)
class SynthSpec:
    text_size: int = 8
    speech_size: int = 32
    num_layers: int = 1
    motif_len: tuple[int, int] = (2, 4)
    repeat: tuple[int, int] = (1, 3)
    silence_prob: float = 0.25
    silence_run: tuple[int, int] = (1, 3)
    num_speakers: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.text_size < 1 or self.num_speakers < 1 or self.num_layers < 1:
            raise ValueError("text_size, num_speakers, num_layers must be >= 1")
        for name in ("motif_len", "repeat", "silence_run"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty or non-positive")
        if self.motif_len[0] < 2:
            raise ValueError(
                "motif_len must start at >= 2: single-token motifs collapse across "
                "repeated symbols and cannot be re-segmented"
            )
        if not 0.0 <= self.silence_prob < 1.0:
            raise ValueError("silence_prob must be in [0, 1)")
        if self.speech_size < 4:
            raise ValueError("speech_size must be >= 4 (silence + onset + 2 body tokens)")

    @property
    def onset_tokens(self) -> range:
        """Ids that may start a motif (and appear nowhere else)."""
        n_onset = max(1, min(self.text_size, (self.speech_size - 1) // 3))
        return range(1, 1 + n_onset)

    @property
    def body_tokens(self) -> range:
        return range(1 + len(self.onset_tokens), self.speech_size)


def build_motif_table(spec: SynthSpec) -> tuple[tuple[int, ...], ...]:
    """One motif per text symbol; deterministic in spec.seed.

    Motifs start with an onset token, continue with body tokens, never
    repeat a token twice in a row, and are pairwise distinct.
    """
    rng = np.random.default_rng([spec.seed, 0])
    onsets = list(spec.onset_tokens)
    bodies = list(spec.body_tokens)
    table: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    for _ in range(spec.text_size):
        for _attempt in range(10_000):
            length = int(rng.integers(spec.motif_len[0], spec.motif_len[1] + 1))
            motif = [int(rng.choice(onsets))]
            while len(motif) < length:
                nxt = int(rng.choice(bodies))
                if nxt != motif[-1]:
                    motif.append(nxt)
            key = tuple(motif)
            if key not in seen:
                seen.add(key)
                table.append(key)
                break
        else:
            raise ValueError("could not draw enough distinct motifs; enlarge speech_size")
    return tuple(table)


def speaker_permutation(spec: SynthSpec, speaker: int) -> np.ndarray:
    """The speaker's codeword recoloring (a permutation of [0, speech_size))."""
    if not 0 <= speaker < spec.num_speakers:
        raise ValueError(f"speaker {speaker} out of range [0, {spec.num_speakers})")
    rng = np.random.default_rng([spec.seed, 1, speaker])
    return rng.permutation(spec.speech_size)


@dataclass(frozen=True)
class CorpusRecord:
    text: tuple[int, ...]
    speaker: int
    speech: tuple[tuple[int, ...], ...]  # one token tuple per codebook layer


def render_utterance(
    spec: SynthSpec,
    table: Sequence[tuple[int, ...]],
    text: Sequence[int],
    speaker: int,
    rng: np.random.Generator,
) -> tuple[tuple[tuple[int, ...], ...], tuple[tuple[int, int], ...]]:
    """Render text to speech layers; also return per-symbol (start, end) spans."""
    layer1: list[int] = []
    spans: list[tuple[int, int]] = []
    for symbol in text:
        if spec.silence_prob > 0 and rng.random() < spec.silence_prob:
            layer1.extend([SILENCE] * int(rng.integers(spec.silence_run[0], spec.silence_run[1] + 1)))
        start = len(layer1)
        for token in table[symbol]:
            layer1.extend([token] * int(rng.integers(spec.repeat[0], spec.repeat[1] + 1)))
        spans.append((start, len(layer1)))
    layers = [tuple(layer1)]
    if spec.num_layers >= 2:
        perm = speaker_permutation(spec, speaker)
        current = np.asarray(layer1, dtype=np.int64)
        for _ in range(spec.num_layers - 1):
            current = perm[current]  # layer l applies the recoloring l-1 times
            layers.append(tuple(int(v) for v in current))
    return tuple(layers), tuple(spans)


def gen_corpus(
    spec: SynthSpec, n_sequences: int, len_range: tuple[int, int]
) -> list[CorpusRecord]:
    """Generate a corpus; byte-identical across runs with the same spec."""
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"len_range ({lo}, {hi}) is empty or non-positive")
    table = build_motif_table(spec)
    records: list[CorpusRecord] = []
    for idx in range(n_sequences):
        rng = np.random.default_rng([spec.seed, 2, idx])
        n_symbols = int(rng.integers(lo, hi + 1))
        text = tuple(int(v) for v in rng.integers(0, spec.text_size, size=n_symbols))
        speaker = int(rng.integers(0, spec.num_speakers))
        layers, _ = render_utterance(spec, table, text, speaker, rng)
        records.append(CorpusRecord(text=text, speaker=speaker, speech=layers))
    return records


def decode_speech(layer1: Sequence[int], spec: SynthSpec) -> list[int]:
    """Invert rendering: speech tokens -> text symbols (SENTINEL when lost)."""
    table = {motif: symbol for symbol, motif in enumerate(build_motif_table(spec))}
    onsets = set(spec.onset_tokens)

    cleaned: list[int] = []
    for token in layer1:
        if token == SILENCE:
            continue
        if not cleaned or cleaned[-1] != token:
            cleaned.append(token)

    segments: list[list[int]] = []
    for token in cleaned:
        if token in onsets or not segments:
            segments.append([token])
        else:
            segments[-1].append(token)
    return [table.get(tuple(seg), SENTINEL) for seg in segments]


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def symbol_error_rate(
    generated_layer1: Sequence[int], reference_text: Sequence[int], spec: SynthSpec
) -> float:
    """Levenshtein distance between decoded symbols and the reference text,
    normalized by reference length and clipped to [0, 1]."""
    if len(reference_text) == 0:
        return 0.0 if len(decode_speech(generated_layer1, spec)) == 0 else 1.0
    decoded = decode_speech(generated_layer1, spec)
    return min(1.0, levenshtein(decoded, list(reference_text)) / len(reference_text))


def speaker_match_rate(
    generated_layer1: Sequence[int],
    generated_layer2: Sequence[int],
    speaker: int,
    spec: SynthSpec,
) -> float:
    """Fraction of layer-2 tokens equal to the speaker's recoloring of layer 1."""
    if spec.num_layers < 2:
        raise ValueError("speaker_match_rate requires num_layers >= 2")
    if len(generated_layer1) != len(generated_layer2):
        raise ValueError("layer lengths differ")
    if len(generated_layer1) == 0:
        return 0.0
    perm = speaker_permutation(spec, speaker)
    l1 = np.asarray(generated_layer1, dtype=np.int64)
    l2 = np.asarray(generated_layer2, dtype=np.int64)
    return float(np.mean(perm[l1] == l2))


# ------------------------------------------------------------------ file I/O


def write_corpus(path: str | Path, records: Sequence[CorpusRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "text": list(rec.text),
                        "speaker": rec.speaker,
                        "speech": [list(layer) for layer in rec.speech],
                    }
                )
                + "\n"
            )


def read_corpus(path: str | Path) -> list[CorpusRecord]:
    records: list[CorpusRecord] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append(
            CorpusRecord(
                text=tuple(obj["text"]),
                speaker=int(obj["speaker"]),
                speech=tuple(tuple(layer) for layer in obj["speech"]),
            )
        )
    return records


_SPEC_KEYS = {
    "text_size": int,
    "speech_size": int,
    "num_layers": int,
    "motif_len_min": int,
    "motif_len_max": int,
    "repeat_min": int,
    "repeat_max": int,
    "silence_prob": float,
    "silence_run_min": int,
    "silence_run_max": int,
    "num_speakers": int,
    "seed": int,
}


def load_synth_spec(path: str | Path) -> SynthSpec:
    """Read a key=value spec file; unknown keys rejected."""
    path = Path(path)
    kv = parse_kv_text(path.read_text(), source=str(path))
    unknown = sorted(set(kv) - set(_SPEC_KEYS))
    if unknown:
        raise ValueError(f"{path}: unknown keys {unknown}; allowed: {sorted(_SPEC_KEYS)}")
    vals = {key: _SPEC_KEYS[key](raw) for key, raw in kv.items()}
    base = SynthSpec()

    def rng(name: str) -> tuple[int, int]:
        lo = vals.get(f"{name}_min", getattr(base, name)[0])
        hi = vals.get(f"{name}_max", getattr(base, name)[1])
        return (lo, hi)

    return SynthSpec(
        text_size=vals.get("text_size", base.text_size),
        speech_size=vals.get("speech_size", base.speech_size),
        num_layers=vals.get("num_layers", base.num_layers),
        motif_len=rng("motif_len"),
        repeat=rng("repeat"),
        silence_prob=vals.get("silence_prob", base.silence_prob),
        silence_run=rng("silence_run"),
        num_speakers=vals.get("num_speakers", base.num_speakers),
        seed=vals.get("seed", base.seed),
    )

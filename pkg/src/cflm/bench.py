"""Latency benchmarking, ablation sweeps, SER evaluation, attention export.

Per-step wall time covers the raw-token forward pass only — sampling, I/O
and compressed-token steps are excluded on both strategies, isolating the
cache-size effect. Benchmarks never stop at EOS (the workload would vary
with model weights otherwise); token streams stay deterministic, times do
not.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import CFConfig, ModelConfig
from .inference import EngineParams, GenerationParams, generate, refine_nar, score_sequence
from .synthcorpus import CorpusRecord, SynthSpec, speaker_match_rate, symbol_error_rate

BENCH_WARMUP_STEPS = 10


@dataclass(frozen=True)
class BenchRow:
    strategy: str
    t: int
    mean_ms: float
    p50_ms: float
    p90_ms: float
    cache_len: int
    tokens_per_s: float
    rtf: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    tokens: dict[str, list[int]]  # strategy -> generated stream (determinism check)


def _percentile(values: Sequence[float], q: float) -> float:
    ordered = sorted(values)
    idx = min(len(ordered) - 1, max(0, round(q * (len(ordered) - 1))))
    return ordered[idx]


def bench(
    params: EngineParams,
    grid: Sequence[int],
    strategies: Sequence[str] = ("vanilla", "faster"),
    window: int = 25,
    text_len: int = 8,
    prompt_len: int = 12,
    seed: int = 0,
) -> BenchReport:
    """Greedy-decode to max(grid) once per strategy on a fixed prompt and
    report per-step statistics around each grid point."""
    if not grid:
        raise ValueError("empty grid")
    grid = sorted(int(t) for t in grid)
    if grid[0] <= BENCH_WARMUP_STEPS:
        raise ValueError(f"grid points must exceed the {BENCH_WARMUP_STEPS}-step warmup")
    rng = np.random.default_rng(seed)
    vocab = params.vocab
    text = rng.integers(0, vocab.text_size, size=text_len).tolist()
    prompt = rng.integers(0, vocab.speech_size, size=prompt_len).tolist()
    max_raw = grid[-1]

    rows: list[BenchRow] = []
    streams: dict[str, list[int]] = {}
    for strategy in strategies:
        gen = GenerationParams(max_raw_tokens=max_raw, temperature=0.0, seed=seed)
        result = generate(
            params, text, prompt, gen, strategy=strategy, ban_eos=True
        )
        streams[strategy] = result.tokens
        for t in grid:
            lo = max(BENCH_WARMUP_STEPS, t - window)
            steps = result.step_ms[lo:t]
            mean_ms = statistics.fmean(steps)
            rows.append(
                BenchRow(
                    strategy=strategy,
                    t=t,
                    mean_ms=mean_ms,
                    p50_ms=_percentile(steps, 0.50),
                    p90_ms=_percentile(steps, 0.90),
                    cache_len=result.cache_lens[t - 1],
                    tokens_per_s=1000.0 / mean_ms,
                    rtf=(mean_ms / 1000.0) * params.cf.frame_rate,
                )
            )
    return BenchReport(rows=rows, tokens=streams)


def write_bench_csv(path: str | Path, report: BenchReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["strategy", "t", "mean_ms", "p50_ms", "p90_ms", "cache_len", "tokens_per_s", "rtf"]
        )
        for r in report.rows:
            writer.writerow(
                [
                    r.strategy,
                    r.t,
                    f"{r.mean_ms:.4f}",
                    f"{r.p50_ms:.4f}",
                    f"{r.p90_ms:.4f}",
                    r.cache_len,
                    f"{r.tokens_per_s:.2f}",
                    f"{r.rtf:.5f}",
                ]
            )


# ---------------------------------------------------------------- evaluation


def evaluate_ser(
    engine: EngineParams,
    spec: SynthSpec,
    records: Sequence[CorpusRecord],
    limit: Optional[int] = None,
    max_gen_factor: float = 1.6,
    seed: int = 0,
) -> float:
    """Mean symbol error rate of greedy text-to-speech over `records`."""
    subset = records[:limit] if limit is not None else records
    if not subset:
        raise ValueError("no records to evaluate")
    total = 0.0
    for record in subset:
        ref = record.speech[0]
        budget = int(len(ref) * max_gen_factor) + engine.cf.g + 2
        gen = GenerationParams(max_raw_tokens=budget, temperature=0.0, seed=seed)
        result = generate(engine, record.text, (), gen, strategy="vanilla")
        total += symbol_error_rate(result.tokens, record.text, spec)
    return total / len(subset)


def evaluate_speaker_match(
    nar_model,
    cf: CFConfig,
    spec: SynthSpec,
    records: Sequence[CorpusRecord],
    limit: Optional[int] = None,
    prompt_frac: float = 0.4,
) -> float:
    """Mean speaker-match rate of refined layer 2 against ground-truth layer 1.

    Layer 1 is teacher-forced (ground truth) so the metric isolates the
    refiner: given a speech prompt carrying the speaker's recoloring, does
    it recolor the continuation consistently?
    """
    subset = [r for r in (records[:limit] if limit is not None else records) if len(r.speech[0]) >= 3]
    if not subset:
        raise ValueError("no records to evaluate")
    total = 0.0
    for record in subset:
        n = len(record.speech[0])
        ref_len = max(1, min(n - 1, int(n * prompt_frac)))
        prompt_codes = [layer[:ref_len] for layer in record.speech]
        layer1_rest = record.speech[0][ref_len:]
        codes = refine_nar(nar_model, cf, record.text, prompt_codes, layer1_rest)
        total += speaker_match_rate(layer1_rest, codes[1], record.speaker, spec)
    return total / len(subset)


# -------------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepSettings:
    steps: int = 1200
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    holdout: int = 32
    eval_limit: int = 32


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: int
    ser: float
    speaker_match: Optional[float]


SWEEP_AXES = ("g", "n_ar", "n_nar")


def sweep(
    corpus: Sequence[CorpusRecord],
    spec: SynthSpec,
    base_cf: CFConfig,
    model_cfg: ModelConfig,
    axis: str,
    values: Sequence[int],
    settings: SweepSettings = SweepSettings(),
) -> list[SweepRow]:
    """Train one model per axis value under identical seeds/budgets and
    evaluate all of them on the same held-out tail of the corpus."""
    from .model import new_model
    from .training import train_ar, train_nar

    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ValueError("empty sweep values")
    if settings.holdout >= len(corpus):
        raise ValueError("holdout swallows the whole corpus")
    train_records = list(corpus[: -settings.holdout])
    eval_records = list(corpus[-settings.holdout :])

    rows: list[SweepRow] = []
    for value in values:
        cf = replace(base_cf, **{axis: int(value)})
        model = new_model(model_cfg, _sweep_vocab(spec), role="ar", seed=settings.seed)
        train_ar(
            model, cf, train_records,
            steps=settings.steps, batch_size=settings.batch_size,
            lr=settings.lr, seed=settings.seed,
        )
        engine = EngineParams.from_model(model, cf)
        ser = evaluate_ser(engine, spec, eval_records, limit=settings.eval_limit)
        match: Optional[float] = None
        if spec.num_layers >= 2:
            nar = new_model(
                _nar_model_cfg(model_cfg, spec), _sweep_vocab(spec),
                role="nar", seed=settings.seed,
            )
            train_nar(
                nar, cf, train_records,
                steps=settings.steps, batch_size=settings.batch_size,
                lr=settings.lr, seed=settings.seed,
            )
            match = evaluate_speaker_match(nar, cf, spec, eval_records, limit=settings.eval_limit)
        rows.append(SweepRow(axis=axis, value=int(value), ser=ser, speaker_match=match))
    return rows


def _sweep_vocab(spec: SynthSpec):
    from .config import Vocabulary

    return Vocabulary(
        text_size=spec.text_size, speech_size=spec.speech_size, num_layers=spec.num_layers
    )


def _nar_model_cfg(model_cfg: ModelConfig, spec: SynthSpec) -> ModelConfig:
    return replace(model_cfg, num_layers=spec.num_layers)


def write_sweep_csv(path: str | Path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "ser", "speaker_match"])
        for r in rows:
            writer.writerow(
                [
                    r.axis,
                    r.value,
                    f"{r.ser:.4f}",
                    "" if r.speaker_match is None else f"{r.speaker_match:.4f}",
                ]
            )


# ------------------------------------------------------------ attention viz


def attn_export(
    engine: EngineParams, record: CorpusRecord, prompt_frac: float = 0.0
) -> np.ndarray:
    """Teacher-forced text-column attention: rows = raw steps, cols = text
    positions, values = head-and-block-averaged weights from full softmax
    rows (so each row sums to <= 1)."""
    n = len(record.speech[0])
    ref_len = int(n * prompt_frac)
    result = score_sequence(
        engine,
        record.text,
        record.speech[0][:ref_len],
        record.speech[0][ref_len:],
        strategy="vanilla",
        record_attn=True,
    )
    if result.attn_text is None:
        raise ValueError("sequence produced no raw steps")
    return result.attn_text


def monotonicity_score(attn: np.ndarray) -> float:
    """Fraction of steps whose strongest text column does not move left."""
    if attn.shape[0] < 2:
        return 1.0
    peaks = attn.argmax(axis=1)
    return float(np.mean(peaks[1:] >= peaks[:-1]))


def write_attn_csv(path: str | Path, attn: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"text_{i}" for i in range(attn.shape[1])])
        for step, row in enumerate(attn):
            writer.writerow([step] + [f"{v:.6f}" for v in row])

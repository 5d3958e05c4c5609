"""Command-line surface.

Subcommands: train, generate, bench, sweep, eval, dump-mask, attn-viz,
gen-corpus. Tabular outputs are headered CSV. Exit code 0 on success, 2 on
validation errors (bad flags, malformed configs/checkpoints/corpora).

Decoding, benchmarking and mask dumps run on the numpy engine and do not
import torch; training/refinement subcommands do.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import CFConfig, ModelConfig, RunConfig, Vocabulary, load_run_config


def _ids(text: Optional[str]) -> list[int]:
    if not text:
        return []
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise ValueError(f"expected whitespace/comma-separated integers, got {text!r}") from None


def _run_config(args) -> RunConfig:
    if args.config:
        rc = load_run_config(args.config)
    else:
        rc = RunConfig(cf=CFConfig(g=10, n_ar=50), model=ModelConfig())
    if getattr(args, "seed", None) is not None:
        rc = replace(rc, seed=args.seed)
    return rc


def _scan_vocab(records, num_layers: int) -> Vocabulary:
    text_size = max((max(r.text) for r in records if r.text), default=0) + 1
    speech_size = (
        max((max(layer) for r in records for layer in r.speech if layer), default=0) + 1
    )
    return Vocabulary(text_size=text_size, speech_size=speech_size, num_layers=num_layers)


# ------------------------------------------------------------------ handlers


def _cmd_train(args) -> int:
    from .checkpoint import save_model
    from .model import new_model
    from .synthcorpus import read_corpus
    from .training import train_ar, train_nar

    rc = _run_config(args)
    cf = replace(rc.cf, mode=args.mode) if args.mode else rc.cf
    records = read_corpus(args.corpus)
    if not records:
        raise ValueError(f"{args.corpus}: empty corpus")
    num_layers = len(records[0].speech)
    vocab = _scan_vocab(records, num_layers)
    if args.text_size:
        vocab = replace(vocab, text_size=args.text_size)
    if args.speech_size:
        vocab = replace(vocab, speech_size=args.speech_size)
    model_cfg = replace(rc.model, num_layers=num_layers)

    model = new_model(model_cfg, vocab, role=args.role, seed=rc.seed)
    train = train_ar if args.role == "ar" else train_nar
    rows = train(
        model, cf, records,
        steps=args.steps, batch_size=args.batch_size, lr=args.lr,
        seed=rc.seed, log_path=args.log,
    )
    save_model(args.out, model, cf)
    print(f"trained {args.role} for {args.steps} steps; final loss {rows[-1].loss:.4f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_generate(args) -> int:
    from .inference import EngineParams, GenerationParams, generate

    engine = EngineParams.from_checkpoint(args.ckpt)
    gen = GenerationParams(
        max_raw_tokens=args.max_len,
        temperature=args.temperature,
        top_k=args.top_k,
        seed=args.seed if args.seed is not None else 0,
    )
    text = _ids(args.text)
    prompt = _ids(args.speech_prompt)
    result = generate(engine, text, prompt, gen, strategy=args.infer)

    layers = [result.tokens]
    if args.nar_ckpt:
        from .checkpoint import load_model
        from .inference import refine_nar

        nar_model, nar_meta = load_model(args.nar_ckpt)
        prompt_codes = [prompt] * nar_meta.vocab.num_layers if prompt else [[]] * nar_meta.vocab.num_layers
        layers = refine_nar(nar_model, nar_meta.cf, text, prompt_codes, result.tokens)

    lines = [" ".join(str(tok) for tok in layer) for layer in layers]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    print(
        f"generated {len(result.tokens)} tokens"
        + (" (stopped at EOS)" if result.stopped_eos else ""),
        file=sys.stderr,
    )
    return 0


def _cmd_bench(args) -> int:
    from .bench import bench, write_bench_csv
    from .inference import EngineParams

    engine = EngineParams.from_checkpoint(args.ckpt)
    strategies = ("vanilla", "faster") if args.infer == "both" else (args.infer,)
    report = bench(
        engine,
        grid=_ids(args.grid),
        strategies=strategies,
        window=args.window,
        seed=args.seed if args.seed is not None else 0,
    )
    write_bench_csv(args.out, report)
    for row in report.rows:
        print(
            f"{row.strategy:8s} t={row.t:<6d} {row.mean_ms:8.3f} ms/step  "
            f"cache={row.cache_len}"
        )
    print(f"wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    from .bench import SweepSettings, sweep, write_sweep_csv
    from .synthcorpus import load_synth_spec, read_corpus

    rc = _run_config(args)
    spec = load_synth_spec(args.spec)
    records = read_corpus(args.corpus)
    settings = SweepSettings(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=rc.seed,
        holdout=args.holdout,
        eval_limit=args.eval_limit,
    )
    rows = sweep(records, spec, rc.cf, rc.model, args.axis, _ids(args.values), settings)
    write_sweep_csv(args.out, rows)
    for row in rows:
        extra = "" if row.speaker_match is None else f"  speaker_match={row.speaker_match:.3f}"
        print(f"{row.axis}={row.value:<4d} ser={row.ser:.4f}{extra}")
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    import csv

    from .bench import evaluate_ser, evaluate_speaker_match
    from .inference import EngineParams
    from .synthcorpus import load_synth_spec, read_corpus

    engine = EngineParams.from_checkpoint(args.ckpt)
    spec = load_synth_spec(args.spec)
    records = read_corpus(args.corpus)
    ser = evaluate_ser(engine, spec, records, limit=args.limit)
    match = None
    if args.nar_ckpt:
        from .checkpoint import load_model

        nar_model, nar_meta = load_model(args.nar_ckpt)
        match = evaluate_speaker_match(nar_model, nar_meta.cf, spec, records, limit=args.limit)
    print(f"ser={ser:.4f}" + ("" if match is None else f" speaker_match={match:.4f}"))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ser", "speaker_match"])
            writer.writerow([f"{ser:.4f}", "" if match is None else f"{match:.4f}"])
        print(f"wrote {args.out}")
    return 0


def _cmd_dump_mask(args) -> int:
    from .layout import build_layout
    from .masks import (
        build_cf_training,
        build_dense_causal,
        build_prompt_local_ar,
        build_prompt_local_nar,
    )

    rc = _run_config(args)
    cf = rc.cf
    if args.kind == "nar":
        if cf.n_nar is None:
            raise ValueError("dump-mask kind=nar needs n_nar in the config")
        layout = build_layout(
            cf, args.text_len, args.prompt_len, args.gen_len,
            with_eos=False, with_bos=False, insert_w=False,
        )
        mask = build_prompt_local_nar(layout, cf.n_nar)
    elif args.kind == "cf":
        layout = build_layout(replace(cf, mode="cf"), args.text_len, args.prompt_len, args.gen_len)
        mask = build_cf_training(layout, cf)
    else:
        layout = build_layout(
            replace(cf, mode=args.kind), args.text_len, args.prompt_len, args.gen_len
        )
        mask = (
            build_dense_causal(layout)
            if args.kind == "dense"
            else build_prompt_local_ar(layout, cf.n_ar)
        )
    text = mask.dump()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_attn_viz(args) -> int:
    from .bench import attn_export, monotonicity_score, write_attn_csv
    from .inference import EngineParams
    from .synthcorpus import read_corpus

    engine = EngineParams.from_checkpoint(args.ckpt)
    records = read_corpus(args.corpus)
    if not 0 <= args.index < len(records):
        raise ValueError(f"--index {args.index} out of range (corpus has {len(records)})")
    attn = attn_export(engine, records[args.index])
    write_attn_csv(args.out, attn)
    print(f"monotonicity={monotonicity_score(attn):.4f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_gen_corpus(args) -> int:
    from .synthcorpus import gen_corpus, load_synth_spec, write_corpus

    spec = load_synth_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    lo, hi = (_ids(args.len_range) + [0, 0])[:2] if args.len_range else (4, 8)
    records = gen_corpus(spec, args.n, (lo, hi))
    write_corpus(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cflm",
        description="Span-compressed speech-token language modeling toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config file (key = value lines)")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--out", help="output path")

    p = sub.add_parser("train", parents=[common], help="train a model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=["dense", "window", "cf"], default=None)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--role", choices=["ar", "nar"], default="ar")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=9.5e-5)
    p.add_argument("--log", help="training-log CSV path")
    p.add_argument("--text-size", type=int, default=None)
    p.add_argument("--speech-size", type=int, default=None)
    p.set_defaults(func=_cmd_train, out_required=True)

    p = sub.add_parser("generate", parents=[common], help="decode speech tokens")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--infer", choices=["vanilla", "faster"], default="vanilla")
    p.add_argument("--text", required=True, help="text symbol ids")
    p.add_argument("--speech-prompt", default="", help="layer-1 prompt codewords")
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--nar-ckpt", help="refiner checkpoint for layers 2..L")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("bench", parents=[common], help="per-step latency benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--infer", choices=["vanilla", "faster", "both"], default="both")
    p.add_argument("--grid", default="20,200,2000")
    p.add_argument("--window", type=int, default=25)
    p.set_defaults(func=_cmd_bench, out_required=True)

    p = sub.add_parser("sweep", parents=[common], help="ablation sweep over g/n_ar/n_nar")
    p.add_argument("--corpus", required=True)
    p.add_argument("--spec", required=True, help="corpus-spec file (for the decoder)")
    p.add_argument("--axis", choices=["g", "n_ar", "n_nar"], required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--holdout", type=int, default=32)
    p.add_argument("--eval-limit", type=int, default=32)
    p.set_defaults(func=_cmd_sweep, out_required=True)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--nar-ckpt")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("dump-mask", parents=[common], help="print a visibility matrix")
    p.add_argument("--kind", choices=["dense", "window", "cf", "nar"], required=True)
    p.add_argument("--text-len", type=int, default=2)
    p.add_argument("--prompt-len", type=int, default=0)
    p.add_argument("--gen-len", type=int, default=8)
    p.set_defaults(func=_cmd_dump_mask)

    p = sub.add_parser("attn-viz", parents=[common], help="export text-attention per step")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=_cmd_attn_viz, out_required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--len-range", default="4,8")
    p.set_defaults(func=_cmd_gen_corpus, out_required=True)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out_required", False) and not args.out:
        parser.error(f"{args.command}: --out is required")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

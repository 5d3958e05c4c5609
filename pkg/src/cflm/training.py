"""Target construction, masked cross-entropy, and the training loops.

Targets live in head space: 0..speech_size-1 are codewords and index
speech_size is EOS. IGNORE (-1) marks slots without supervision — prompt
slots, compressed (W) slots, and the EOS input slot. A raw slot at index t
targets raw token t+1, skipping any W slot between them; the final raw
slot targets EOS; the BOS slot targets the first raw token.
"""

from __future__ import annotations

import csv
import math
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import CFConfig, Vocabulary
from .layout import SequenceLayout, SlotKind, build_layout
from .masks import build_mask, build_prompt_local_nar
from .model import CodecLM
from .synthcorpus import CorpusRecord

IGNORE = -1

LR_DEFAULT = 9.5e-5
BETAS_DEFAULT = (0.5, 0.9)
CLIP_NORM = 1.0
WARMUP_FRACTION = 0.01


@dataclass(frozen=True)
class TargetPlan:
    """Per-slot supervision: head-space target ids and 0/1 weights."""

    targets: np.ndarray  # int64, IGNORE where weight is 0
    weights: np.ndarray  # float64, exactly 0.0 or 1.0

    def __post_init__(self) -> None:
        if self.targets.shape != self.weights.shape:
            raise ValueError("targets/weights shape mismatch")


def build_targets(
    layout: SequenceLayout, raw_codewords: Sequence[int], eos_index: int
) -> TargetPlan:
    if len(raw_codewords) != layout.num_raw:
        raise ValueError(
            f"got {len(raw_codewords)} raw tokens for a layout with {layout.num_raw}"
        )
    n = layout.total_len
    targets = np.full(n, IGNORE, dtype=np.int64)
    weights = np.zeros(n, dtype=np.float64)
    for slot, kind in enumerate(layout.kinds):
        if kind is SlotKind.BOS:
            targets[slot] = raw_codewords[0] if layout.num_raw else eos_index
        elif kind is SlotKind.RAW:
            t = layout.raw_index_of(slot)
            targets[slot] = (
                raw_codewords[t + 1] if t + 1 < layout.num_raw else eos_index
            )
        else:
            continue
        weights[slot] = 1.0
    return TargetPlan(targets=targets, weights=weights)


def slot_input_ids(
    layout: SequenceLayout,
    text_ids: Sequence[int],
    prompt_codewords: Sequence[int],
    raw_codewords: Sequence[int],
    vocab: Vocabulary,
) -> np.ndarray:
    """Global slot ids fed to the autoregressive model."""
    if len(text_ids) != layout.text_len or len(prompt_codewords) != layout.speech_prompt_len:
        raise ValueError("text/prompt length mismatch with layout")
    ids = np.empty(layout.total_len, dtype=np.int64)
    t_text = t_prompt = t_raw = 0
    for slot, kind in enumerate(layout.kinds):
        if kind is SlotKind.TEXT:
            ids[slot] = text_ids[t_text]
            t_text += 1
        elif kind is SlotKind.PROMPT:
            ids[slot] = vocab.speech_id(prompt_codewords[t_prompt])
            t_prompt += 1
        elif kind is SlotKind.BOS:
            ids[slot] = vocab.bos_id
        elif kind is SlotKind.RAW:
            ids[slot] = vocab.speech_id(raw_codewords[t_raw])
            t_raw += 1
        elif kind is SlotKind.W:
            ids[slot] = vocab.w_id
        else:
            ids[slot] = vocab.eos_id
    return ids


def masked_cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Mean NLL over weight-1 slots, computed in float64.

    Weight-0 slots contribute exactly zero — including to gradients —
    because their NLL is multiplied by a hard 0 before the reduction.
    """
    total = weights.sum()
    if total.item() == 0:
        raise ValueError("no supervised slots in batch")
    log_probs = torch.log_softmax(logits.to(torch.float64), dim=-1)
    safe = targets.clamp_min(0)
    nll = -log_probs.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    return (nll * weights.to(torch.float64)).sum() / total.to(torch.float64)


# ------------------------------------------------------------ batch assembly


@dataclass
class ArExample:
    ids: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    mask: np.ndarray  # (T, T) bool


def prepare_ar_example(record: CorpusRecord, cf: CFConfig, vocab: Vocabulary) -> ArExample:
    """Training sequences condition on text only (no speech prompt); at
    inference a speech prompt is just more context in the same id space."""
    raw = record.speech[0]
    layout = build_layout(cf, len(record.text), 0, len(raw))
    ids = slot_input_ids(layout, record.text, (), raw, vocab)
    plan = build_targets(layout, raw, vocab.eos_index)
    mask = build_mask(layout, cf).bits
    return ArExample(ids=ids, targets=plan.targets, weights=plan.weights, mask=mask)


def collate(
    examples: Sequence[ArExample], pad_id: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad to the batch max length. Padding rows see only themselves (the
    softmax needs one visible key) and carry zero loss weight."""
    b = len(examples)
    t = max(len(ex.ids) for ex in examples)
    ids = np.full((b, t), pad_id, dtype=np.int64)
    targets = np.full((b, t), IGNORE, dtype=np.int64)
    weights = np.zeros((b, t), dtype=np.float64)
    masks = np.zeros((b, t, t), dtype=bool)
    positions = np.tile(np.arange(t, dtype=np.int64), (b, 1))
    for i, ex in enumerate(examples):
        n = len(ex.ids)
        ids[i, :n] = ex.ids
        targets[i, :n] = ex.targets
        weights[i, :n] = ex.weights
        masks[i, :n, :n] = ex.mask
        if n < t:
            masks[i, range(n, t), range(n, t)] = True
    return (
        torch.from_numpy(ids),
        torch.from_numpy(targets),
        torch.from_numpy(weights),
        torch.from_numpy(masks),
        torch.from_numpy(positions),
    )


# ------------------------------------------------------------- optimization


@dataclass
class TrainLogRow:
    step: int
    loss: float
    wall_ms: float


def make_optimizer(model: CodecLM, lr: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=BETAS_DEFAULT)


def warmup_schedule(optimizer: torch.optim.Optimizer, total_steps: int):
    warmup = max(1, round(WARMUP_FRACTION * total_steps))

    def factor(step: int) -> float:
        return min(1.0, (step + 1) / warmup)

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def write_log(path: str | Path, rows: Sequence[TrainLogRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "wall_ms"])
        for row in rows:
            writer.writerow([row.step, f"{row.loss:.6f}", f"{row.wall_ms:.3f}"])


def _check_finite(loss: torch.Tensor, step: int) -> None:
    if not math.isfinite(loss.item()):
        raise RuntimeError(f"non-finite loss {loss.item()} at step {step}")


def train_ar(
    model: CodecLM,
    cf: CFConfig,
    corpus: Sequence[CorpusRecord],
    steps: int,
    batch_size: int = 16,
    lr: float = LR_DEFAULT,
    seed: int = 0,
    log_path: Optional[str | Path] = None,
    log_every: int = 50,
) -> list[TrainLogRow]:
    """Train the autoregressive model; deterministic for a fixed seed."""
    if not corpus:
        raise ValueError("empty corpus")
    torch.manual_seed(seed)
    order = random.Random(seed)
    vocab = model.vocab
    examples = [prepare_ar_example(rec, cf, vocab) for rec in corpus]

    optimizer = make_optimizer(model, lr)
    schedule = warmup_schedule(optimizer, steps)
    rows: list[TrainLogRow] = []
    model.train()
    for step in range(steps):
        batch = [examples[order.randrange(len(examples))] for _ in range(batch_size)]
        ids, targets, weights, masks, positions = collate(batch, vocab.pad_id)
        started = time.perf_counter()
        logits = model.forward_ar(ids, masks, positions)
        loss = masked_cross_entropy(logits, targets, weights)
        _check_finite(loss, step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), CLIP_NORM)
        optimizer.step()
        schedule.step()
        elapsed = (time.perf_counter() - started) * 1000.0
        if step % log_every == 0 or step == steps - 1:
            rows.append(TrainLogRow(step=step, loss=float(loss.item()), wall_ms=elapsed))
    model.eval()
    if log_path is not None:
        write_log(log_path, rows)
    return rows


def nar_batch(
    model: CodecLM,
    cf: CFConfig,
    records: Sequence[CorpusRecord],
    layer: int,
    ref_lens: Sequence[int],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Assemble refiner inputs for one layer.

    Sequences are [text | reference speech | speech to refine] with no
    BOS/EOS/W. Reference positions sum the embeddings of ALL layers;
    positions being refined sum layers 1..layer-1. Only refine positions
    carry loss.
    """
    vocab = model.vocab
    n_nar = cf.n_nar if cf.n_nar is not None else max(len(r.speech[0]) for r in records)
    b = len(records)
    lens = []
    metas = []
    for rec, ref_len in zip(records, ref_lens):
        total = len(rec.speech[0])
        if not 0 < ref_len < total:
            raise ValueError("ref_len must split the utterance into two nonempty parts")
        layout = build_layout(
            cf, len(rec.text), ref_len, total - ref_len,
            with_eos=False, with_bos=False, insert_w=False,
        )
        metas.append(layout)
        lens.append(layout.total_len)
    t = max(lens)

    inputs = torch.zeros((b, t, model.cfg.dim), dtype=next(model.parameters()).dtype)
    targets = np.full((b, t), IGNORE, dtype=np.int64)
    weights = np.zeros((b, t), dtype=np.float64)
    masks = np.zeros((b, t, t), dtype=bool)
    positions = np.tile(np.arange(t, dtype=np.int64), (b, 1))

    for i, (rec, layout) in enumerate(zip(records, metas)):
        n = layout.total_len
        ref_len = layout.speech_prompt_len
        codes = torch.tensor(rec.speech, dtype=torch.long)  # (L, total)
        text_ids = torch.tensor(rec.text, dtype=torch.long)

        emb = torch.zeros((n, model.cfg.dim), dtype=inputs.dtype)
        emb[: layout.text_len] = model.embed(text_ids)
        for l in range(1, vocab.num_layers + 1):
            emb[layout.text_len : layout.text_len + ref_len] += model.speech_embed(
                l, codes[l - 1, :ref_len]
            )
        for l in range(1, layer):
            emb[layout.prompt_len : n] += model.speech_embed(l, codes[l - 1, ref_len:])
        inputs[i, :n] = emb

        targets[i, layout.prompt_len : n] = codes[layer - 1, ref_len:].numpy()
        weights[i, layout.prompt_len : n] = 1.0
        masks[i, :n, :n] = build_prompt_local_nar(layout, n_nar).bits
        if n < t:
            masks[i, range(n, t), range(n, t)] = True
    return (
        inputs,
        torch.from_numpy(targets),
        torch.from_numpy(weights),
        torch.from_numpy(masks),
        torch.from_numpy(positions),
    )


def train_nar(
    model: CodecLM,
    cf: CFConfig,
    corpus: Sequence[CorpusRecord],
    steps: int,
    batch_size: int = 16,
    lr: float = LR_DEFAULT,
    seed: int = 0,
    log_path: Optional[str | Path] = None,
    log_every: int = 50,
) -> list[TrainLogRow]:
    """Train the refiner: per sequence, a uniform layer in 2..L and a random
    reference/refine split."""
    if model.vocab.num_layers < 2:
        raise ValueError("refiner training requires num_layers >= 2")
    usable = [rec for rec in corpus if len(rec.speech[0]) >= 2]
    if not usable:
        raise ValueError("corpus has no sequences of length >= 2")
    torch.manual_seed(seed)
    order = random.Random(seed)

    optimizer = make_optimizer(model, lr)
    schedule = warmup_schedule(optimizer, steps)
    rows: list[TrainLogRow] = []
    model.train()
    for step in range(steps):
        layer = order.randint(2, model.vocab.num_layers)
        records = [usable[order.randrange(len(usable))] for _ in range(batch_size)]
        ref_lens = [
            order.randint(1, max(1, len(rec.speech[0]) // 2)) for rec in records
        ]
        started = time.perf_counter()
        inputs, targets, weights, masks, positions = nar_batch(
            model, cf, records, layer, ref_lens
        )
        logits = model.forward_nar(inputs, layer, masks, positions)
        loss = masked_cross_entropy(logits, targets, weights)
        _check_finite(loss, step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), CLIP_NORM)
        optimizer.step()
        schedule.step()
        elapsed = (time.perf_counter() - started) * 1000.0
        if step % log_every == 0 or step == steps - 1:
            rows.append(TrainLogRow(step=step, loss=float(loss.item()), wall_ms=elapsed))
    model.eval()
    if log_path is not None:
        write_log(log_path, rows)
    return rows

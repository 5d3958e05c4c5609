"""Incremental decoding: the mask-only strategy and the cache-eviction one.

The engine is pure numpy in float64. Parameters are upcast once from the
float32 checkpoint; keys are rotated at their original absolute positions
before caching, so evicting entries never re-indexes anything.

Two sessions share one external behavior:

  VanillaSession   keeps every key/value; per-step visibility is computed
                   from entry metadata with the same rules as the training
                   masks. Cost per step grows with the sequence.
  FasterSession    keeps the prompt segment, every compressed (W) entry,
                   and a ring of the last n_ar + 1 raw entries. Raw steps
                   attend to everything retained — the ring IS the window —
                   so no mask is materialized. Eviction is the ring
                   overwriting its oldest slot.

Both feed the same input stream: BOS, then sampled raw tokens, with a W
step after every complete span of g raw tokens. The W step's prediction is
discarded; the token sampled at the preceding raw step is fed after it.
Greedy decoding therefore produces identical token streams, and per-step
logits agree to float64 rounding (the evicted keys are exactly the ones
the mask hides, and masked keys carry exactly zero softmax weight).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointMeta, load_checkpoint
from .config import CFConfig, ModelConfig, Vocabulary

RMS_EPS = 1e-6
ROPE_BASE = 10000.0

_K_PROMPT, _K_RAW, _K_W = 0, 1, 2


@dataclass(frozen=True)
class GenerationParams:
    max_raw_tokens: int
    temperature: float = 0.0
    top_k: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_raw_tokens < 0:
            raise ValueError("max_raw_tokens must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def sample(
    logits: np.ndarray,
    gen: GenerationParams,
    rng: np.random.Generator,
    forbid: Optional[int] = None,
) -> int:
    """Temperature/top-k sampling; greedy when temperature is 0 or top_k is 1."""
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if forbid is not None:
        logits = logits.copy()
        logits[forbid] = -np.inf
    if gen.temperature == 0.0 or gen.top_k == 1:
        return int(np.argmax(logits))
    k = min(gen.top_k, logits.shape[0])
    top = np.argpartition(logits, -k)[-k:]
    scaled = logits[top] / gen.temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    return int(top[rng.choice(k, p=probs)])


# -------------------------------------------------------------- parameters


class _BlockWeights:
    __slots__ = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2", "w3")

    def __init__(self, get, prefix: str):
        self.attn_norm = get(prefix + "attn_norm.weight")
        self.ffn_norm = get(prefix + "ffn_norm.weight")
        # torch Linear stores (out, in); keep (in, out) so x @ w works
        self.wq = get(prefix + "wq.weight").T.copy()
        self.wk = get(prefix + "wk.weight").T.copy()
        self.wv = get(prefix + "wv.weight").T.copy()
        self.wo = get(prefix + "wo.weight").T.copy()
        self.w1 = get(prefix + "w1.weight").T.copy()
        self.w3 = get(prefix + "w3.weight").T.copy()
        self.w2 = get(prefix + "w2.weight").T.copy()


class EngineParams:
    """Float64 snapshot of an autoregressive checkpoint plus rotary tables."""

    def __init__(self, meta: CheckpointMeta, arrays: dict[str, np.ndarray]):
        if meta.role != "ar":
            raise ValueError("the incremental engine decodes 'ar' checkpoints only")
        self.model: ModelConfig = meta.model
        self.cf: CFConfig = meta.cf
        self.vocab: Vocabulary = meta.vocab

        def get(name: str) -> np.ndarray:
            return np.ascontiguousarray(arrays[name], dtype=np.float64)

        self.embed = get("embed.weight")
        self.norm = get("norm.weight")
        self.head = get("head.weight").T.copy()
        self.blocks = [
            _BlockWeights(get, f"blocks.{b}.") for b in range(meta.model.num_blocks)
        ]

        hd = meta.model.head_dim
        inv_freq = 1.0 / (ROPE_BASE ** (np.arange(0, hd, 2, dtype=np.float64) / hd))
        angles = np.arange(meta.model.max_positions, dtype=np.float64)[:, None] * inv_freq
        self.rope_cos = np.cos(angles)
        self.rope_sin = np.sin(angles)
        self.scale = 1.0 / np.sqrt(hd)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "EngineParams":
        meta, arrays = load_checkpoint(path)
        return cls(meta, arrays)

    @classmethod
    def from_model(cls, model, cf: CFConfig) -> "EngineParams":
        arrays = {
            name: tensor.detach().cpu().numpy().astype(np.float64)
            for name, tensor in model.state_dict().items()
        }
        meta = CheckpointMeta(model=model.cfg, cf=cf, vocab=model.vocab, role=model.role)
        return cls(meta, arrays)

    def rotate(self, x: np.ndarray, position: int) -> np.ndarray:
        """Apply the rotary rotation for one absolute position to (H, hd)."""
        c = self.rope_cos[position]
        s = self.rope_sin[position]
        out = np.empty_like(x)
        x1, x2 = x[:, 0::2], x[:, 1::2]
        out[:, 0::2] = x1 * c - x2 * s
        out[:, 1::2] = x1 * s + x2 * c
        return out


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x * (1.0 / np.sqrt(np.mean(x * x) + RMS_EPS)) * gain


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 of (n, H) scores; -inf entries get exactly 0."""
    m = scores.max(axis=0)
    e = np.exp(scores - m)
    return e / e.sum(axis=0)


# ------------------------------------------------------------------ sessions


class VanillaSession:
    """Full KV retention; visibility enforced per step from entry metadata."""

    def __init__(self, p: EngineParams, text_ids: Sequence[int], prompt_codewords: Sequence[int], capacity: int):
        self.p = p
        m = p.model
        self.n = 0
        self.keys = [np.empty((capacity, m.num_heads, m.head_dim)) for _ in p.blocks]
        self.vals = [np.empty((capacity, m.num_heads, m.head_dim)) for _ in p.blocks]
        self.kind = np.empty(capacity, dtype=np.int64)
        self.raw_idx = np.full(capacity, -1, dtype=np.int64)
        self.next_pos = 0
        self.text_len = len(text_ids)
        self.attn_rows: list[np.ndarray] = []
        self.record_attn = False
        self._prompt_ids = [int(i) for i in text_ids] + [
            p.vocab.speech_id(int(c)) for c in prompt_codewords
        ] + [p.vocab.bos_id]

    # --- core forward for one token --------------------------------------
    def _forward(self, token_id: int, kind: int, raw_index: int, windowed: bool) -> np.ndarray:
        p = self.p
        m = p.model
        pos = self.next_pos
        self.next_pos += 1
        i = self.n
        self.kind[i] = kind
        self.raw_idx[i] = raw_index
        self.n += 1

        vis_mask: Optional[np.ndarray] = None
        if windowed:
            n = self.n
            vis = (self.kind[:n] != _K_RAW) | (self.raw_idx[:n] >= raw_index - p.cf.n_ar)
            if not vis.all():
                vis_mask = vis

        x = p.embed[token_id].copy()
        attn_acc: Optional[np.ndarray] = None
        for b, bw in enumerate(p.blocks):
            h = _rmsnorm(x, bw.attn_norm)
            q = p.rotate((h @ bw.wq).reshape(m.num_heads, m.head_dim), pos)
            k = p.rotate((h @ bw.wk).reshape(m.num_heads, m.head_dim), pos)
            v = (h @ bw.wv).reshape(m.num_heads, m.head_dim)
            self.keys[b][i] = k
            self.vals[b][i] = v
            scores = np.einsum("nhd,hd->nh", self.keys[b][: self.n], q) * p.scale
            if vis_mask is not None:
                scores[~vis_mask] = -np.inf
            w = _softmax_rows(scores)
            if self.record_attn and kind == _K_RAW:
                row = w[: self.text_len].mean(axis=1)
                attn_acc = row if attn_acc is None else attn_acc + row
            out = np.einsum("nh,nhd->hd", w, self.vals[b][: self.n])
            x = x + out.reshape(m.dim) @ bw.wo
            h = _rmsnorm(x, bw.ffn_norm)
            x = x + (_silu(h @ bw.w1) * (h @ bw.w3)) @ bw.w2
        if attn_acc is not None:
            self.attn_rows.append(attn_acc / len(p.blocks))
        return _rmsnorm(x, p.norm) @ p.head

    def prefill(self) -> np.ndarray:
        logits = None
        for slot_id in self._prompt_ids:
            logits = self._forward(slot_id, _K_PROMPT, -1, windowed=False)
        assert logits is not None
        return logits

    def step_raw(self, codeword: int, raw_index: int) -> np.ndarray:
        token = self.p.vocab.speech_id(codeword)
        return self._forward(token, _K_RAW, raw_index, windowed=self.p.cf.mode != "dense")

    def step_w(self, span: int) -> None:
        self._forward_w(span)

    def _forward_w(self, span: int) -> None:
        """W step: attend only to the span's raw entries; keep the new KV."""
        p = self.p
        m = p.model
        pos = self.next_pos
        self.next_pos += 1
        lo, hi = span * p.cf.g, (span + 1) * p.cf.g
        sel = np.flatnonzero(
            (self.kind[: self.n] == _K_RAW)
            & (self.raw_idx[: self.n] >= lo)
            & (self.raw_idx[: self.n] < hi)
        )
        i = self.n
        self.kind[i] = _K_W
        self.raw_idx[i] = -1
        self.n += 1
        x = p.embed[p.vocab.w_id].copy()
        for b, bw in enumerate(p.blocks):
            h = _rmsnorm(x, bw.attn_norm)
            q = p.rotate((h @ bw.wq).reshape(m.num_heads, m.head_dim), pos)
            k = p.rotate((h @ bw.wk).reshape(m.num_heads, m.head_dim), pos)
            v = (h @ bw.wv).reshape(m.num_heads, m.head_dim)
            self.keys[b][i] = k
            self.vals[b][i] = v
            kk = self.keys[b][sel]
            vv = self.vals[b][sel]
            scores = np.einsum("nhd,hd->nh", kk, q) * p.scale
            w = _softmax_rows(scores)
            out = np.einsum("nh,nhd->hd", w, vv)
            x = x + out.reshape(m.dim) @ bw.wo
            h = _rmsnorm(x, bw.ffn_norm)
            x = x + (_silu(h @ bw.w1) * (h @ bw.w3)) @ bw.w2
        # hidden state of the W step is discarded; only its KV matters

    @property
    def cache_len(self) -> int:
        return self.n


class FasterSession:
    """Segmented cache: prompt (fixed) + W entries (growing) + raw ring."""

    def __init__(self, p: EngineParams, text_ids: Sequence[int], prompt_codewords: Sequence[int], max_raw: int):
        if p.cf.mode != "cf":
            raise ValueError("the eviction strategy requires cf mode")
        self.p = p
        m = p.model
        cf = p.cf
        n_p = len(text_ids) + len(prompt_codewords) + 1
        w_cap = max_raw // cf.g + 1
        self.ring_cap = cf.n_ar + 1
        shape = (m.num_heads, m.head_dim)
        self.pk = [np.empty((n_p, *shape)) for _ in p.blocks]
        self.pv = [np.empty((n_p, *shape)) for _ in p.blocks]
        self.wk = [np.empty((w_cap, *shape)) for _ in p.blocks]
        self.wv = [np.empty((w_cap, *shape)) for _ in p.blocks]
        self.rk = [np.empty((self.ring_cap, *shape)) for _ in p.blocks]
        self.rv = [np.empty((self.ring_cap, *shape)) for _ in p.blocks]
        self.n_p = 0
        self.n_w = 0
        self.n_fed = 0  # raw tokens fed so far
        self.next_pos = 0
        self.text_len = len(text_ids)
        self.attn_rows: list[np.ndarray] = []
        self.record_attn = False
        self._prompt_ids = [int(i) for i in text_ids] + [
            p.vocab.speech_id(int(c)) for c in prompt_codewords
        ] + [p.vocab.bos_id]

    def _project(self, bw: _BlockWeights, x: np.ndarray, pos: int):
        m = self.p.model
        h = _rmsnorm(x, bw.attn_norm)
        q = self.p.rotate((h @ bw.wq).reshape(m.num_heads, m.head_dim), pos)
        k = self.p.rotate((h @ bw.wk).reshape(m.num_heads, m.head_dim), pos)
        v = (h @ bw.wv).reshape(m.num_heads, m.head_dim)
        return q, k, v

    def _finish_block(self, bw: _BlockWeights, x: np.ndarray, out: np.ndarray) -> np.ndarray:
        x = x + out.reshape(self.p.model.dim) @ bw.wo
        h = _rmsnorm(x, bw.ffn_norm)
        return x + (_silu(h @ bw.w1) * (h @ bw.w3)) @ bw.w2

    def prefill(self) -> np.ndarray:
        p = self.p
        logits = None
        for slot_id in self._prompt_ids:
            pos = self.next_pos
            self.next_pos += 1
            i = self.n_p
            self.n_p += 1
            x = p.embed[slot_id].copy()
            for b, bw in enumerate(p.blocks):
                q, k, v = self._project(bw, x, pos)
                self.pk[b][i] = k
                self.pv[b][i] = v
                kk = self.pk[b][: self.n_p]
                w = _softmax_rows(np.einsum("nhd,hd->nh", kk, q) * p.scale)
                out = np.einsum("nh,nhd->hd", w, self.pv[b][: self.n_p])
                x = self._finish_block(bw, x, out)
            logits = _rmsnorm(x, p.norm) @ p.head
        assert logits is not None
        return logits

    def step_raw(self, codeword: int, raw_index: int) -> np.ndarray:
        p = self.p
        pos = self.next_pos
        self.next_pos += 1
        slot = self.n_fed % self.ring_cap  # overwrite the oldest entry
        self.n_fed += 1
        ring_n = min(self.n_fed, self.ring_cap)
        x = p.embed[p.vocab.speech_id(codeword)].copy()
        attn_acc: Optional[np.ndarray] = None
        for b, bw in enumerate(p.blocks):
            q, k, v = self._project(bw, x, pos)
            self.rk[b][slot] = k
            self.rv[b][slot] = v
            # everything retained is visible: prompt + all W + the ring
            s_p = np.einsum("nhd,hd->nh", self.pk[b][: self.n_p], q)
            s_w = np.einsum("nhd,hd->nh", self.wk[b][: self.n_w], q)
            s_r = np.einsum("nhd,hd->nh", self.rk[b][:ring_n], q)
            scores = np.concatenate([s_p, s_w, s_r], axis=0) * p.scale
            w = _softmax_rows(scores)
            if self.record_attn:
                row = w[: self.text_len].mean(axis=1)
                attn_acc = row if attn_acc is None else attn_acc + row
            out = (
                np.einsum("nh,nhd->hd", w[: self.n_p], self.pv[b][: self.n_p])
                + np.einsum("nh,nhd->hd", w[self.n_p : self.n_p + self.n_w], self.wv[b][: self.n_w])
                + np.einsum("nh,nhd->hd", w[self.n_p + self.n_w :], self.rv[b][:ring_n])
            )
            x = self._finish_block(bw, x, out)
        if attn_acc is not None:
            self.attn_rows.append(attn_acc / len(p.blocks))
        return _rmsnorm(x, p.norm) @ p.head

    def step_w(self, span: int) -> None:
        p = self.p
        pos = self.next_pos
        self.next_pos += 1
        g = p.cf.g
        # the span's raw entries are the last g fed; n_ar >= g keeps them alive
        sel = np.arange(self.n_fed - g, self.n_fed) % self.ring_cap
        i = self.n_w
        self.n_w += 1
        x = p.embed[p.vocab.w_id].copy()
        for b, bw in enumerate(p.blocks):
            q, k, v = self._project(bw, x, pos)
            self.wk[b][i] = k
            self.wv[b][i] = v
            kk = self.rk[b][sel]
            w = _softmax_rows(np.einsum("nhd,hd->nh", kk, q) * p.scale)
            out = np.einsum("nh,nhd->hd", w, self.rv[b][sel])
            x = self._finish_block(bw, x, out)

    @property
    def cache_len(self) -> int:
        return self.n_p + self.n_w + min(self.n_fed, self.ring_cap)


# ----------------------------------------------------------------- decoding


@dataclass
class GenerationResult:
    tokens: list[int]
    stopped_eos: bool
    step_ms: list[float]
    cache_lens: list[int]
    logits: Optional[list[np.ndarray]] = None
    attn_text: Optional[np.ndarray] = None

    @property
    def num_raw(self) -> int:
        return len(self.tokens)


def _make_session(
    p: EngineParams,
    strategy: str,
    text_ids: Sequence[int],
    prompt_codewords: Sequence[int],
    max_raw: int,
):
    cf = p.cf
    n_p = len(text_ids) + len(prompt_codewords) + 1
    w_slots = max_raw // cf.g + 1 if cf.mode == "cf" else 0
    total = n_p + max_raw + w_slots
    if total > p.model.max_positions:
        raise ValueError(
            f"sequence of {total} slots exceeds max_positions={p.model.max_positions}"
        )
    if strategy == "vanilla":
        return VanillaSession(p, text_ids, prompt_codewords, capacity=total)
    if strategy == "faster":
        return FasterSession(p, text_ids, prompt_codewords, max_raw=max_raw)
    raise ValueError(f"unknown strategy {strategy!r}")


def generate(
    p: EngineParams,
    text_ids: Sequence[int],
    prompt_codewords: Sequence[int],
    gen: GenerationParams,
    strategy: str = "vanilla",
    record_logits: bool = False,
    record_attn: bool = False,
    ban_eos: bool = False,
) -> GenerationResult:
    """Decode raw layer-1 tokens. Returns codeword indices (EOS excluded).

    ban_eos suppresses EOS at the sampler so benchmarks always run to the
    full budget regardless of model weights.
    """
    session = _make_session(p, strategy, text_ids, prompt_codewords, gen.max_raw_tokens)
    session.record_attn = record_attn
    cf = p.cf
    eos = p.vocab.eos_index
    rng = np.random.default_rng(gen.seed)

    logits = session.prefill()
    tokens: list[int] = []
    step_ms: list[float] = []
    cache_lens: list[int] = []
    logit_rows: list[np.ndarray] = [logits] if record_logits else []
    stopped = False
    while len(tokens) < gen.max_raw_tokens:
        tok = sample(logits, gen, rng, forbid=eos if ban_eos else None)
        if tok == eos:
            stopped = True
            break
        t = len(tokens)
        tokens.append(int(tok))
        started = time.perf_counter()
        logits = session.step_raw(int(tok), t)
        step_ms.append((time.perf_counter() - started) * 1000.0)
        if cf.mode == "cf" and (t + 1) % cf.g == 0:
            session.step_w((t + 1) // cf.g - 1)
        cache_lens.append(session.cache_len)
        if record_logits:
            logit_rows.append(logits)
    attn = None
    if record_attn and session.attn_rows:
        attn = np.stack(session.attn_rows)
    return GenerationResult(
        tokens=tokens,
        stopped_eos=stopped,
        step_ms=step_ms,
        cache_lens=cache_lens,
        logits=np.stack(logit_rows) if record_logits else None,
        attn_text=attn,
    )


def score_sequence(
    p: EngineParams,
    text_ids: Sequence[int],
    prompt_codewords: Sequence[int],
    raw_codewords: Sequence[int],
    strategy: str = "vanilla",
    record_attn: bool = False,
) -> GenerationResult:
    """Teacher-forced pass over a given raw sequence (no sampling).

    logits[i] is the prediction BEFORE raw token i was fed (logits[0] comes
    from the BOS slot), plus one trailing row predicting the continuation.
    """
    n = len(raw_codewords)
    session = _make_session(p, strategy, text_ids, prompt_codewords, max_raw=n)
    session.record_attn = record_attn
    cf = p.cf
    rows = [session.prefill()]
    cache_lens = []
    for t, codeword in enumerate(raw_codewords):
        rows.append(session.step_raw(int(codeword), t))
        if cf.mode == "cf" and (t + 1) % cf.g == 0:
            session.step_w((t + 1) // cf.g - 1)
        cache_lens.append(session.cache_len)
    attn = None
    if record_attn and session.attn_rows:
        attn = np.stack(session.attn_rows)
    return GenerationResult(
        tokens=[int(c) for c in raw_codewords],
        stopped_eos=False,
        step_ms=[],
        cache_lens=cache_lens,
        logits=np.stack(rows),
        attn_text=attn,
    )


# ------------------------------------------------------------ NAR refinement


def refine_nar(
    nar_model,
    cf: CFConfig,
    text_ids: Sequence[int],
    prompt_codes: Sequence[Sequence[int]],
    layer1: Sequence[int],
) -> list[list[int]]:
    """Greedy layer-by-layer refinement of a generated layer-1 stream.

    prompt_codes is the reference utterance with ALL layers; the returned
    matrix contains num_layers rows for the generated region (row 0 is the
    input layer1, unchanged).
    """
    import torch

    from .layout import build_layout
    from .masks import build_prompt_local_nar

    vocab = nar_model.vocab
    L = vocab.num_layers
    codes: list[list[int]] = [list(layer1)]
    if L == 1:
        return codes
    if len(prompt_codes) != L:
        raise ValueError(f"prompt must carry {L} layers, got {len(prompt_codes)}")
    ref_len = len(prompt_codes[0])
    n = len(layer1)
    if n == 0:
        return [list(layer1) for _ in range(L)]
    layout = build_layout(
        cf, len(text_ids), ref_len, n, with_eos=False, with_bos=False, insert_w=False
    )
    n_nar = cf.n_nar if cf.n_nar is not None else n + ref_len
    mask = torch.from_numpy(build_prompt_local_nar(layout, n_nar).bits)
    positions = torch.arange(layout.total_len)[None]
    prompt_t = torch.tensor(prompt_codes, dtype=torch.long)
    text_t = torch.tensor(list(text_ids), dtype=torch.long)

    with torch.no_grad():
        dtype = next(nar_model.parameters()).dtype
        base = torch.zeros((layout.total_len, nar_model.cfg.dim), dtype=dtype)
        base[: layout.text_len] = nar_model.embed(text_t)
        for l in range(1, L + 1):
            base[layout.text_len : layout.prompt_len] += nar_model.speech_embed(
                l, prompt_t[l - 1]
            )
        for layer in range(2, L + 1):
            inputs = base.clone()
            for l in range(1, layer):
                inputs[layout.prompt_len :] += nar_model.speech_embed(
                    l, torch.tensor(codes[l - 1], dtype=torch.long)
                )
            logits = nar_model.forward_nar(inputs[None], layer, mask, positions)
            predicted = logits[0, layout.prompt_len :].argmax(dim=-1)
            codes.append([int(v) for v in predicted])
    return codes

"""Attention-visibility matrices for the four attention patterns.

Builders construct dense boolean matrices with vectorized numpy index
algebra. ``visibility_oracle`` re-derives the same rules per (query, key)
pair in plain scalar Python; tests compare the two cell-for-cell, so keep
the implementations independent.

Visibility rules, autoregressive stage:

  dense   every slot sees every slot at or before it.
  window  prompt slots (text, speech prompt, BOS) see earlier prompt slots;
          a raw query at raw index t sees the whole prompt plus raw keys s
          with t - n_ar <= s <= t.
  cf      as window, plus: every compressed (W) key already produced is
          visible to raw queries; a W query sees exactly the g raw slots of
          its own span — no prompt, no self, no other W.

The EOS slot acts as a raw query at index num_raw (and as a raw key at the
same index), which makes the window mask degenerate exactly to the dense
causal mask when n_ar covers the whole generation.

Refiner stage (not causal):

  nar     prompt slots are visible to every query; a raw query at t sees
          raw keys s with |t - s| <= n_nar; prompt queries see only prompt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CFConfig
from .layout import SequenceLayout, SlotKind

# kind codes used by the vectorized builders
_K_PROMPT, _K_RAW, _K_W, _K_EOS = 0, 1, 2, 3

_PROMPT_KINDS = (SlotKind.TEXT, SlotKind.PROMPT, SlotKind.BOS)


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Boolean visibility matrix; bits[q, k] true = key k visible to query q."""

    n_q: int
    n_k: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        if self.bits.shape != (self.n_q, self.n_k) or self.bits.dtype != np.bool_:
            raise ValueError("bits must be a bool matrix of shape (n_q, n_k)")
        if self.n_q > 0 and not self.bits.any(axis=1).all():
            empty = int(np.flatnonzero(~self.bits.any(axis=1))[0])
            raise ValueError(f"query row {empty} has no visible keys")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return (self.n_q, self.n_k) == (other.n_q, other.n_k) and bool(
            np.array_equal(self.bits, other.bits)
        )

    def dump(self) -> str:
        """Text grid: header "n_q n_k", then one '1'/'0' row per query."""
        rows = ["%d %d" % (self.n_q, self.n_k)]
        for q in range(self.n_q):
            rows.append("".join("1" if v else "0" for v in self.bits[q]))
        return "\n".join(rows) + "\n"

    @staticmethod
    def parse(text: str) -> "AttentionMask":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        n_q, n_k = (int(p) for p in lines[0].split())
        if len(lines) - 1 != n_q:
            raise ValueError(f"expected {n_q} rows, got {len(lines) - 1}")
        bits = np.zeros((n_q, n_k), dtype=bool)
        for q, row in enumerate(lines[1:]):
            if len(row) != n_k or set(row) - {"0", "1"}:
                raise ValueError(f"bad row {q}: {row!r}")
            bits[q] = np.frombuffer(row.encode(), dtype=np.uint8) == ord("1")
        return AttentionMask(n_q=n_q, n_k=n_k, bits=bits)


def _slot_arrays(layout: SequenceLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-slot (kind_code, raw_index_or_eos, span) arrays for index algebra."""
    n = layout.total_len
    code = np.empty(n, dtype=np.int64)
    ridx = np.full(n, -1, dtype=np.int64)
    span = np.asarray(layout.span_of, dtype=np.int64)
    for i, kind in enumerate(layout.kinds):
        if kind in _PROMPT_KINDS:
            code[i] = _K_PROMPT
        elif kind is SlotKind.RAW:
            code[i] = _K_RAW
        elif kind is SlotKind.W:
            code[i] = _K_W
        else:
            code[i] = _K_EOS
            ridx[i] = layout.num_raw
    ridx[np.asarray(layout.raw_pos, dtype=np.int64)] = np.arange(layout.num_raw)
    return code, ridx, span


def _reject_w(layout: SequenceLayout, op: str) -> None:
    if layout.w_pos:
        raise ValueError(f"{op} requires a layout without compressed slots")


def build_dense_causal(layout: SequenceLayout) -> AttentionMask:
    """Full causal mask: bits[q, k] = (k <= q)."""
    _reject_w(layout, "build_dense_causal")
    n = layout.total_len
    bits = np.tri(n, dtype=bool)
    return AttentionMask(n_q=n, n_k=n, bits=bits)


def build_prompt_local_ar(layout: SequenceLayout, n_ar: int) -> AttentionMask:
    """Prompt always visible; raw-to-raw restricted to the causal window."""
    _reject_w(layout, "build_prompt_local_ar")
    if n_ar <= 0:
        raise ValueError("n_ar must be positive")
    n = layout.total_len
    code, ridx, _ = _slot_arrays(layout)
    pos = np.arange(n)

    q_prompt = (code == _K_PROMPT)[:, None]
    k_prompt = (code == _K_PROMPT)[None, :]
    causal = pos[None, :] <= pos[:, None]

    tq = ridx[:, None]  # raw index of query (num_raw for EOS, -1 for prompt)
    sk = ridx[None, :]
    q_rawish = (code != _K_PROMPT)[:, None]
    k_rawish = (code != _K_PROMPT)[None, :]
    in_window = (sk >= tq - n_ar) & (sk <= tq)

    bits = (q_prompt & k_prompt & causal) | (q_rawish & k_prompt) | (
        q_rawish & k_rawish & in_window
    )
    return AttentionMask(n_q=n, n_k=n, bits=bits)


def build_cf_training(layout: SequenceLayout, cfg: CFConfig) -> AttentionMask:
    """The compressed-span training mask (window rules + W visibility)."""
    if cfg.n_ar < cfg.g:
        raise ValueError("compressed-span attention requires n_ar >= g")
    n = layout.total_len
    code, ridx, span = _slot_arrays(layout)
    pos = np.arange(n)

    q_prompt = (code == _K_PROMPT)[:, None]
    k_prompt = (code == _K_PROMPT)[None, :]
    causal = pos[None, :] <= pos[:, None]

    q_rawish = ((code == _K_RAW) | (code == _K_EOS))[:, None]
    k_rawish = ((code == _K_RAW) | (code == _K_EOS))[None, :]
    tq = ridx[:, None]
    sk = ridx[None, :]
    in_window = (sk >= tq - cfg.n_ar) & (sk <= tq)
    k_w_behind = (code == _K_W)[None, :] & (pos[None, :] < pos[:, None])

    q_w = (code == _K_W)[:, None]
    k_raw = (code == _K_RAW)[None, :]
    same_span = span[:, None] == span[None, :]

    bits = (
        (q_prompt & k_prompt & causal)
        | (q_rawish & k_prompt)
        | (q_rawish & k_w_behind)
        | (q_rawish & k_rawish & in_window)
        | (q_w & k_raw & same_span)
    )
    return AttentionMask(n_q=n, n_k=n, bits=bits)


def build_prompt_local_nar(layout: SequenceLayout, n_nar: int) -> AttentionMask:
    """Bidirectional refiner mask: global prompt, banded raw-to-raw."""
    _reject_w(layout, "build_prompt_local_nar")
    if layout.with_eos:
        raise ValueError("refiner layouts must not contain an EOS slot")
    if n_nar <= 0:
        raise ValueError("n_nar must be positive")
    n = layout.total_len
    code, ridx, _ = _slot_arrays(layout)

    k_prompt = (code == _K_PROMPT)[None, :]
    q_raw = (code == _K_RAW)[:, None]
    k_raw = (code == _K_RAW)[None, :]
    tq = ridx[:, None]
    sk = ridx[None, :]
    in_band = np.abs(tq - sk) <= n_nar

    bits = k_prompt | (q_raw & k_raw & in_band)
    return AttentionMask(n_q=n, n_k=n, bits=bits)


def build_mask(layout: SequenceLayout, cfg: CFConfig) -> AttentionMask:
    """Autoregressive mask for cfg.mode (dense / window / cf)."""
    if cfg.mode == "dense":
        return build_dense_causal(layout)
    if cfg.mode == "window":
        return build_prompt_local_ar(layout, cfg.n_ar)
    return build_cf_training(layout, cfg)


_last_oracle_layout: tuple = (None, ())


def _oracle_raw_indices(layout: SequenceLayout) -> tuple[int, ...]:
    """For each slot, how many RAW slots lie strictly before it.

    A plain running count, memoized for the most recent layout (oracle
    calls arrive cell-by-cell for one layout at a time) so the per-cell
    oracle stays O(1). The derivation is independent of the builders.
    """
    global _last_oracle_layout
    if _last_oracle_layout[0] is layout:
        return _last_oracle_layout[1]
    out = []
    count = 0
    for kind in layout.kinds:
        out.append(count)
        if kind is SlotKind.RAW:
            count += 1
    _last_oracle_layout = (layout, tuple(out))
    return _last_oracle_layout[1]


def visibility_oracle(
    layout: SequenceLayout,
    cfg: CFConfig,
    q: int,
    k: int,
    stage: str = "ar",
) -> bool:
    """Rule-by-rule visibility for one (query, key) pair.

    Deliberately scalar and branchy — this is the reference the vectorized
    builders are tested against.
    """
    kinds = layout.kinds
    qk, kk = kinds[q], kinds[k]
    # raw index by slot: the count of RAW slots strictly before it (EOS
    # thus maps to num_raw)
    table = _oracle_raw_indices(layout)

    if stage == "nar":
        if kk in _PROMPT_KINDS:
            return True
        if qk is SlotKind.RAW and kk is SlotKind.RAW:
            assert cfg.n_nar is not None
            return abs(table[q] - table[k]) <= cfg.n_nar
        return False

    if cfg.mode == "dense":
        return k <= q

    if qk in _PROMPT_KINDS:
        return kk in _PROMPT_KINDS and k <= q

    if qk is SlotKind.W:
        if kk is not SlotKind.RAW:
            return False
        j = layout.span_of[q]
        return j * cfg.g <= table[k] < (j + 1) * cfg.g

    # raw or EOS query
    t = table[q]
    if kk in _PROMPT_KINDS:
        return True
    if kk is SlotKind.W:
        return cfg.mode == "cf" and k < q
    s = table[k]
    return t - cfg.n_ar <= s <= t

"""Slot-sequence layout: where text, prompt, raw, compressed and EOS slots sit.

A "slot" is one transformer position. For the autoregressive stage a
sequence is laid out as

    text symbols | speech prompt | BOS | raw tokens with a compressed (W)
    slot inserted after every complete span of g raw tokens | EOS

W slots exist only in cf mode. A trailing partial span (fewer than g raw
tokens) gets no W slot. Raw token t therefore occupies slot
``prompt_len + t + t // g`` and the j-th W slot (0-based) sits at
``prompt_len + (j + 1) * g + j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .config import CFConfig


class SlotKind(Enum):
    TEXT = "text"
    PROMPT = "prompt"  # speech prompt tokens
    BOS = "bos"
    RAW = "raw"
    W = "w"
    EOS = "eos"


def span_count(t: int, g: int, n_ar: int) -> int:
    """Number of complete spans fully outside the sliding window at raw step t.

    This is how many compressed tokens a raw query at step t can rely on:
    the window covers steps (t - n_ar, t], and only spans that end at or
    before t - n_ar fall fully outside it. Zero while t <= n_ar, then
    grows by one every g steps.
    """
    if t <= n_ar:
        return 0
    return (t - n_ar) // g


@dataclass(frozen=True)
class SequenceLayout:
    """Positions of every slot kind for one laid-out sequence.

    kinds[i] is the SlotKind of slot i; raw_pos[t] is the slot of raw token
    t; w_pos[j] the slot of the j-th W token; span_of[i] is the 0-based span
    index for RAW and W slots and -1 elsewhere.
    """

    cf: CFConfig
    text_len: int
    speech_prompt_len: int
    num_raw: int
    with_bos: bool
    with_eos: bool
    kinds: tuple[SlotKind, ...]
    raw_pos: tuple[int, ...]
    w_pos: tuple[int, ...]
    span_of: tuple[int, ...]

    @property
    def prompt_len(self) -> int:
        """Slots before the first raw token (text + speech prompt + BOS if any)."""
        return self.text_len + self.speech_prompt_len + (1 if self.with_bos else 0)

    @property
    def total_len(self) -> int:
        return len(self.kinds)

    @property
    def bos_slot(self) -> Optional[int]:
        return self.text_len + self.speech_prompt_len if self.with_bos else None

    @property
    def eos_slot(self) -> Optional[int]:
        return self.total_len - 1 if self.with_eos else None

    @property
    def num_w(self) -> int:
        return len(self.w_pos)

    def raw_index_of(self, slot: int) -> int:
        """Inverse of raw_pos; raises for non-raw slots."""
        if self.kinds[slot] is not SlotKind.RAW:
            raise ValueError(f"slot {slot} is {self.kinds[slot].value}, not raw")
        rel = slot - self.prompt_len
        if not self.w_pos:
            return rel
        return rel - rel // (self.cf.g + 1)


def build_layout(
    cf: CFConfig,
    text_len: int,
    speech_prompt_len: int,
    num_raw: int,
    with_eos: bool = True,
    with_bos: bool = True,
    insert_w: Optional[bool] = None,
) -> SequenceLayout:
    """Lay out one sequence.

    In cf mode a W slot follows every complete span of g raw tokens,
    including the final one when num_raw is a multiple of g. dense/window
    modes insert no W slots but share the rest of the layout. The refiner
    path uses with_bos=False, with_eos=False, insert_w=False: its sequences
    are plain [text | reference speech | speech to refine].
    """
    if text_len < 0 or speech_prompt_len < 0 or num_raw < 0:
        raise ValueError("lengths must be non-negative")
    if insert_w is None:
        insert_w = cf.mode == "cf"

    kinds: list[SlotKind] = []
    kinds.extend([SlotKind.TEXT] * text_len)
    kinds.extend([SlotKind.PROMPT] * speech_prompt_len)
    if with_bos:
        kinds.append(SlotKind.BOS)
    span_of: list[int] = [-1] * len(kinds)

    raw_pos: list[int] = []
    w_pos: list[int] = []
    for t in range(num_raw):
        raw_pos.append(len(kinds))
        kinds.append(SlotKind.RAW)
        span_of.append(t // cf.g)
        if insert_w and (t + 1) % cf.g == 0:
            w_pos.append(len(kinds))
            kinds.append(SlotKind.W)
            span_of.append(t // cf.g)
    if with_eos:
        kinds.append(SlotKind.EOS)
        span_of.append(-1)

    return SequenceLayout(
        cf=cf,
        text_len=text_len,
        speech_prompt_len=speech_prompt_len,
        num_raw=num_raw,
        with_bos=with_bos,
        with_eos=with_eos,
        kinds=tuple(kinds),
        raw_pos=tuple(raw_pos),
        w_pos=tuple(w_pos),
        span_of=tuple(span_of),
    )

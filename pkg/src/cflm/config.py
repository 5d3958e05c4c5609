"""Configuration and vocabulary types shared by every other module.

All types are frozen dataclasses: construct once, share freely across
threads. Validation happens at construction time and raises ValueError.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

MODES = ("dense", "window", "cf")

# Reserved-id offsets relative to text_size + speech_size.
_BOS, _EOS, _PAD, _W = 0, 1, 2, 3


@dataclass(frozen=True)
class CFConfig:
    """Hyperparameters of the span-compression mechanism.

    g:          raw speech tokens per compressed span.
    n_ar:       causal sliding-window size, counted in raw speech tokens.
    n_nar:      bidirectional window half-width for the refiner; None = dense.
    frame_rate: speech tokens per second of the nominal codec.
    mode:       "dense" (full causal), "window" (prompt + sliding window),
                or "cf" (window + compressed-span tokens).

    In cf mode n_ar >= g is required: every raw token that falls out of the
    window must belong to a completed span whose compressed token is visible,
    otherwise it would be unreachable at inference time.
    """

    g: int
    n_ar: int
    n_nar: Optional[int] = None
    frame_rate: int = 50
    mode: str = "cf"

    def __post_init__(self) -> None:
        for name in ("g", "n_ar", "frame_rate"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.n_nar is not None and (not isinstance(self.n_nar, int) or self.n_nar <= 0):
            raise ValueError(f"n_nar must be a positive integer or None, got {self.n_nar!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "cf" and self.n_ar < self.g:
            raise ValueError(
                f"cf mode requires n_ar >= g (got n_ar={self.n_ar}, g={self.g}): "
                "tokens older than the window would belong to an incomplete span "
                "with no compressed token to represent them"
            )

    @property
    def compression_rate(self) -> Fraction:
        """Compressed tokens per second of speech in the long-range region."""
        return Fraction(self.frame_rate, self.g)


def make_cf_config(
    g: int,
    n_ar: int,
    n_nar: Optional[int] = None,
    frame_rate: int = 50,
    mode: str = "cf",
) -> CFConfig:
    """Validate and build a CFConfig. See CFConfig for the constraints."""
    return CFConfig(g=g, n_ar=n_ar, n_nar=n_nar, frame_rate=frame_rate, mode=mode)


@dataclass(frozen=True)
class Vocabulary:
    """Token-id space: text symbols, speech codewords, and reserved ids.

    Global slot ids are laid out as
        [0, text_size)                      text symbols
        [text_size, text_size+speech_size)  layer-1 codewords
        then BOS, EOS, PAD, W               reserved, one id each.

    The reserved ids never collide with codewords. W has a single trainable
    embedding row and is never a prediction target. Autoregressive heads
    predict over speech_size + 1 classes; index speech_size means EOS.
    """

    text_size: int
    speech_size: int
    num_layers: int = 1

    def __post_init__(self) -> None:
        if self.text_size <= 0 or self.speech_size <= 0:
            raise ValueError("text_size and speech_size must be positive")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    @property
    def speech_base(self) -> int:
        return self.text_size

    @property
    def bos_id(self) -> int:
        return self.text_size + self.speech_size + _BOS

    @property
    def eos_id(self) -> int:
        return self.text_size + self.speech_size + _EOS

    @property
    def pad_id(self) -> int:
        return self.text_size + self.speech_size + _PAD

    @property
    def w_id(self) -> int:
        return self.text_size + self.speech_size + _W

    @property
    def total_size(self) -> int:
        """Number of distinct slot ids (text + speech + 4 reserved)."""
        return self.text_size + self.speech_size + 4

    @property
    def eos_index(self) -> int:
        """Index of EOS in the autoregressive head's output distribution."""
        return self.speech_size

    def speech_id(self, codeword: int) -> int:
        if not 0 <= codeword < self.speech_size:
            raise ValueError(f"codeword {codeword} out of range [0, {self.speech_size})")
        return self.text_size + codeword

    def codeword_of(self, slot_id: int) -> int:
        if not self.text_size <= slot_id < self.text_size + self.speech_size:
            raise ValueError(f"slot id {slot_id} is not a speech codeword")
        return slot_id - self.text_size


@dataclass(frozen=True)
class ModelConfig:
    """Transformer shape. dim must divide evenly into num_heads."""

    dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    ffn_mult: int = 4
    max_positions: int = 8192
    num_layers: int = 1

    def __post_init__(self) -> None:
        if self.dim <= 0 or self.num_blocks <= 0 or self.num_heads <= 0:
            raise ValueError("dim, num_blocks, num_heads must be positive")
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")
        if self.ffn_mult <= 0:
            raise ValueError("ffn_mult must be positive")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_mult * self.dim


# Keys accepted in run-config files, in canonical order.
CONFIG_KEYS = (
    "g", "n_ar", "n_nar", "frame_rate", "mode",
    "dim", "num_blocks", "num_heads", "ffn_mult", "num_layers", "seed",
)

_INT_KEYS = frozenset(CONFIG_KEYS) - {"mode"}


@dataclass(frozen=True)
class RunConfig:
    """A parsed run-config file: the CF mechanism plus the model shape."""

    cf: CFConfig
    model: ModelConfig
    seed: int = 0


def parse_kv_text(text: str, *, source: str = "<config>") -> dict[str, str]:
    """Parse flat ``key = value`` lines. '#' starts a comment; blanks ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ValueError(f"{source}:{lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_run_config(path: str | Path) -> RunConfig:
    """Load a run-config file. Unknown keys are rejected."""
    path = Path(path)
    kv = parse_kv_text(path.read_text(), source=str(path))
    unknown = sorted(set(kv) - set(CONFIG_KEYS))
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}; allowed: {list(CONFIG_KEYS)}")

    parsed: dict[str, object] = {}
    for key, value in kv.items():
        if key == "mode":
            parsed[key] = value
            continue
        try:
            parsed[key] = int(value)
        except ValueError:
            raise ValueError(f"{path}: key {key!r} must be an integer, got {value!r}") from None

    cf = make_cf_config(
        g=int(parsed.get("g", 10)),
        n_ar=int(parsed.get("n_ar", 50)),
        n_nar=parsed.get("n_nar"),  # type: ignore[arg-type]
        frame_rate=int(parsed.get("frame_rate", 50)),
        mode=str(parsed.get("mode", "cf")),
    )
    model = ModelConfig(
        dim=int(parsed.get("dim", 64)),
        num_blocks=int(parsed.get("num_blocks", 2)),
        num_heads=int(parsed.get("num_heads", 4)),
        ffn_mult=int(parsed.get("ffn_mult", 4)),
        num_layers=int(parsed.get("num_layers", 1)),
    )
    return RunConfig(cf=cf, model=model, seed=int(parsed.get("seed", 0)))


def config_to_dict(cfg) -> dict:
    """Dataclass -> plain dict (for checkpoint headers)."""
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}

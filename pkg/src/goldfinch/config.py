"""Model configuration and its ``key = value`` text form."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

VARIANTS = ("goldfinch", "finch_c2", "finch", "gptalpha", "llama_lite")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "goldfinch"
    n_layer: int = 6
    d_model: int = 128
    head_size: int = 64
    vocab_size: int = 8192
    ctx_len: int = 256
    gold_fraction: Fraction = Fraction(1, 3)
    cr: int = 16
    rope_enabled: bool = False
    rope_base: float = 10000.0
    rope_interp_scale: float = 1.0
    second_value_enabled: bool = True
    key_decay_scaling_enabled: bool = True
    tied_embeddings: bool = False
    decay_rank: int = 64
    ddlerp_rank: int = 32
    gold_lora_rank: int = 64
    loradapt_rank: int = 64
    second_value_rank: int = 64
    chunk_len: int = 16
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.gold_fraction, str):
            self.gold_fraction = Fraction(self.gold_fraction)
        elif not isinstance(self.gold_fraction, Fraction):
            self.gold_fraction = Fraction(self.gold_fraction).limit_denominator(64)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_layer < 1 or self.d_model < 1 or self.head_size < 1 or self.vocab_size < 1:
            raise ConfigError("n_layer, d_model, head_size and vocab_size must be positive")
        if self.d_model % self.head_size:
            raise ConfigError(f"d_model {self.d_model} is not divisible by head_size {self.head_size}")
        if self.cr < 1 or self.d_model % self.cr:
            raise ConfigError(f"d_model {self.d_model} is not divisible by compression ratio {self.cr}")
        if self.variant == "goldfinch" and not (0 < self.gold_fraction <= 1):
            raise ConfigError(f"gold_fraction must be in (0, 1], got {self.gold_fraction}")
        if (self.rope_enabled or self.variant == "llama_lite") and self.head_size % 2:
            raise ConfigError("RoPE needs an even head size")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.chunk_len < 1:
            raise ConfigError("chunk_len must be >= 1")

    # -- derived ------------------------------------------------------------

    @property
    def n_head(self) -> int:
        return self.d_model // self.head_size

    @property
    def n_gold(self) -> int:
        if self.variant != "goldfinch":
            return 0
        return max(1, math.ceil(self.gold_fraction * self.n_layer))

    @property
    def split(self) -> int:
        """Index of the first GOLD layer (== number of recurrent layers below the tap)."""
        return self.n_layer - self.n_gold

    @property
    def d_compressed(self) -> int:
        return self.d_model // self.cr

    @property
    def ffn_hidden(self) -> int:
        if self.variant == "llama_lite":
            return int(math.ceil(self.d_model * 8 / 3 / 32) * 32)
        return int(math.floor(3.5 * self.d_model) // 32 * 32) or 32

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def layer_kinds(self) -> list[str]:
        if self.variant == "goldfinch":
            return ["finch_c2"] * self.split + ["gold"] * self.n_gold
        return {"finch_c2": ["finch_c2"], "finch": ["finch"], "gptalpha": ["gptalpha"],
                "llama_lite": ["llama"]}[self.variant] * self.n_layer

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    # -- text form ----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_dict(parse_kv(text), strict=False)

    @classmethod
    def from_dict(cls, values: dict[str, str], strict: bool = True) -> "ModelConfig":
        kw = {}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for k, raw in values.items():
            if k not in names:
                if strict:
                    raise ConfigError(f"unknown model config key {k!r}")
                continue
            kw[k] = _coerce(names[k].type, raw, k)
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(typ, raw, key):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "Fraction":
            return Fraction(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


__all__ = ["ModelConfig", "ConfigError", "VARIANTS", "parse_kv"]

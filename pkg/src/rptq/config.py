"""Bit-width configurations (WxAy and KV-cache-only WxAyKV modes)."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ValidationError

_MODE_RE = re.compile(r"^W(\d+)A(\d+)(KV)?$")


@dataclass(frozen=True)
class BitConfig:
    """Bit widths for weights, activations and the KV cache.

    In a WxAy mode every activation site is statically quantized at y bits,
    except layer-norm and softmax outputs which never drop below
    `ln_softmax_out_bits`. In a WxAyKV mode only the key/value cache is
    quantized (at y bits); every other activation stays full precision,
    while weights are quantized in both modes.
    """

    weight_bits: int
    activation_bits: int
    kv_bits: int
    kv_only: bool = False
    ln_softmax_out_bits: int = 8

    def __post_init__(self) -> None:
        for name in ("weight_bits", "activation_bits", "kv_bits", "ln_softmax_out_bits"):
            v = getattr(self, name)
            if not 2 <= v <= 16:
                raise ValidationError(f"{name}={v} outside [2, 16]")

    @property
    def mode(self) -> str:
        if self.kv_only:
            return f"W{self.weight_bits}A{self.kv_bits}KV"
        return f"W{self.weight_bits}A{self.activation_bits}"

    @property
    def ln_bits(self) -> int:
        """Layer-norm / softmax output sites keep at least 8 bits."""
        return max(self.ln_softmax_out_bits, self.activation_bits)

    @property
    def dynamic_activation_bits(self) -> int:
        """Bit width of transient activations for memory accounting
        (full precision, i.e. 16, in KV-only modes)."""
        return 16 if self.kv_only else self.activation_bits


def parse_mode(mode: str) -> BitConfig:
    """Parse a mode tag like "W4A4", "W4A16" or "W4A3KV"."""
    m = _MODE_RE.match(mode.strip())
    if not m:
        raise ValidationError(f"unrecognized mode tag {mode!r}")
    w, a, kv_only = int(m.group(1)), int(m.group(2)), m.group(3) is not None
    if kv_only:
        return BitConfig(weight_bits=w, activation_bits=16, kv_bits=a, kv_only=True)
    return BitConfig(weight_bits=w, activation_bits=a, kv_bits=a, kv_only=False)

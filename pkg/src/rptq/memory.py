"""Analytical memory estimator for quantized LLM inference.

Three contributors are modeled for a model shape, bit configuration, batch
size B and sequence length S:

  weights  = P * weight_bits / 8
  kv cache = 2 * L * B * S * d * kv_bits / 8
  dynamic  = B * S * c_dyn * d * act_bits / 8

The dynamic (peak transient activation) constant c_dyn was calibrated once
against published per-part proportions and is frozen in
``data/dynamic_model.json`` as a small structural decomposition; the byte
unit for reported "GB" was resolved to GiB (2^30) during the same
calibration. Both remain switchable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .config import BitConfig
from .errors import ValidationError

GIB = 2 ** 30
GB = 10 ** 9


def _load_data(name: str):
    return json.loads(resources.files("rptq.data").joinpath(name).read_text())


_DYNAMIC = _load_data("dynamic_model.json")
DEFAULT_UNIT = _DYNAMIC["unit"]


@dataclass(frozen=True)
class ModelShape:
    name: str
    param_count: int
    layers: int
    hidden: int
    heads: int
    ffn: int
    max_positions: int

    def __post_init__(self) -> None:
        if self.param_count <= 0:
            raise ValidationError("param_count must be positive")
        if min(self.layers, self.hidden, self.heads, self.ffn, self.max_positions) < 1:
            raise ValidationError("all shape fields must be positive")
        if self.hidden % self.heads != 0:
            raise ValidationError(
                f"hidden {self.hidden} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class MemoryEstimate:
    weight_bytes: float
    kv_bytes: float
    dynamic_bytes: float

    @property
    def total_bytes(self) -> float:
        return self.weight_bytes + self.kv_bytes + self.dynamic_bytes

    @property
    def proportions(self) -> tuple[float, float, float]:
        """(weight, kv, dynamic) fractions; they sum to 1."""
        t = self.total_bytes
        return (self.weight_bytes / t, self.kv_bytes / t, self.dynamic_bytes / t)

    def in_unit(self, unit: str = DEFAULT_UNIT) -> tuple[float, float, float, float]:
        div = _unit_divisor(unit)
        return (self.weight_bytes / div, self.kv_bytes / div,
                self.dynamic_bytes / div, self.total_bytes / div)


def _unit_divisor(unit: str) -> float:
    if unit == "gib":
        return GIB
    if unit == "gb":
        return GB
    raise ValidationError(f"unknown unit {unit!r} (use 'gib' or 'gb')")


def dynamic_constant(cfg: BitConfig) -> float:
    """Frozen calibration: c_dyn such that dynamic bytes =
    B * S * c_dyn * d * act_bits / 8 (act_bits is 16 in KV-only modes)."""
    act_bytes = cfg.dynamic_activation_bits / 8.0
    kv_bytes = cfg.kv_bits / 8.0
    per_token_dim = (_DYNAMIC["act_copies"] * act_bytes
                     + _DYNAMIC["kv_copies"] * kv_bytes
                     + _DYNAMIC["fixed_bytes"])
    return per_token_dim / act_bytes


def estimate(shape: ModelShape, cfg: BitConfig, batch: int,
             seqlen: int) -> MemoryEstimate:
    """Byte breakdown for one (model, bit config, batch, seqlen) cell."""
    if batch < 1 or seqlen < 1:
        raise ValidationError("batch and seqlen must be positive")
    weight_bytes = shape.param_count * cfg.weight_bits / 8.0
    kv_bytes = 2.0 * shape.layers * batch * seqlen * shape.hidden * cfg.kv_bits / 8.0
    act_bytes = cfg.dynamic_activation_bits / 8.0
    dynamic_bytes = batch * seqlen * dynamic_constant(cfg) * shape.hidden * act_bytes
    return MemoryEstimate(weight_bytes=weight_bytes, kv_bytes=kv_bytes,
                          dynamic_bytes=dynamic_bytes)


def sweep(shapes, cfgs, batches, seqlens, unit: str = DEFAULT_UNIT) -> list[dict]:
    """Full cross-product of the inputs, one row per cell."""
    if not (shapes and cfgs and batches and seqlens):
        raise ValidationError("sweep inputs must be non-empty")
    rows = []
    for shape in shapes:
        for cfg in cfgs:
            for b in batches:
                for s in seqlens:
                    est = estimate(shape, cfg, b, s)
                    w, kv, dyn, total = est.in_unit(unit)
                    fw, fkv, fdyn = est.proportions
                    rows.append({
                        "model": shape.name, "mode": cfg.mode,
                        "batch": b, "seqlen": s,
                        "weight_gb": w, "kv_gb": kv, "dynamic_gb": dyn,
                        "total_gb": total,
                        "weight_frac": fw, "kv_frac": fkv, "dynamic_frac": fdyn,
                    })
    return rows


_CSV_COLUMNS = ["model", "mode", "batch", "seqlen", "weight_gb", "kv_gb",
                "dynamic_gb", "total_gb", "weight_frac", "kv_frac",
                "dynamic_frac"]


def sweep_csv_lines(rows: list[dict]) -> list[str]:
    lines = [",".join(_CSV_COLUMNS)]
    for row in rows:
        cells = []
        for col in _CSV_COLUMNS:
            v = row[col]
            cells.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    return lines


# ---------------------------------------------------------------------------
# Shape files
# ---------------------------------------------------------------------------

def shape_from_dict(doc: dict) -> ModelShape:
    return ModelShape(
        name=doc["name"], param_count=int(doc["param_count"]),
        layers=int(doc["layers"]), hidden=int(doc["hidden"]),
        heads=int(doc["heads"]), ffn=int(doc["ffn"]),
        max_positions=int(doc["max_positions"]),
    )


def load_shapes(path: str | Path | None = None) -> list[ModelShape]:
    """Model shapes from a JSON array; defaults to the bundled OPT family."""
    if path is None:
        docs = _load_data("opt_shapes.json")
    else:
        docs = json.loads(Path(path).read_text())
    return [shape_from_dict(doc) for doc in docs]

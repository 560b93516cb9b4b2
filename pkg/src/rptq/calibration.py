"""Per-channel range statistics over a calibration set.

Statistics are exact running extrema (no percentile clipping). Accumulators
are immutable; `collect_stats` and `merge_stats` return new objects, and
merging is associative and commutative, so sharded calibration can combine
partial results in any order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tensor import Tensor


def _as_array(batch) -> np.ndarray:
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    return arr.astype(np.float64, copy=False)


@dataclass(frozen=True)
class ChannelStats:
    """Running per-channel (min, max) plus the number of samples seen."""

    mins: np.ndarray
    maxs: np.ndarray
    samples_seen: int

    def __post_init__(self) -> None:
        mins = np.asarray(self.mins, dtype=np.float64)
        maxs = np.asarray(self.maxs, dtype=np.float64)
        if mins.shape != maxs.shape or mins.ndim != 1:
            raise ValidationError("mins/maxs must be 1-d arrays of equal length")
        if self.samples_seen < 0:
            raise ValidationError("samples_seen must be non-negative")
        if self.samples_seen >= 1 and np.any(mins > maxs):
            raise ValidationError("min > max in channel stats")
        mins.flags.writeable = False
        maxs.flags.writeable = False
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)

    @property
    def num_channels(self) -> int:
        return len(self.mins)

    @classmethod
    def empty(cls, num_channels: int) -> "ChannelStats":
        return cls(
            mins=np.full(num_channels, np.inf),
            maxs=np.full(num_channels, -np.inf),
            samples_seen=0,
        )

    def signatures(self) -> np.ndarray:
        """(min, max) point per channel, the clustering input."""
        return np.stack([self.mins, self.maxs], axis=1)


def collect_stats(acc: ChannelStats, batch) -> ChannelStats:
    """Fold a batch with channels on the last axis into the accumulator.

    The first axis counts as the number of samples (sequences).
    """
    arr = _as_array(batch)
    if arr.ndim < 2:
        raise ValidationError("batch must have at least (sample, channel) axes")
    if arr.shape[-1] != acc.num_channels:
        raise ValidationError(
            f"channel-count mismatch: batch has {arr.shape[-1]}, stats have {acc.num_channels}"
        )
    flat = arr.reshape(-1, arr.shape[-1])
    return ChannelStats(
        mins=np.minimum(acc.mins, flat.min(axis=0)),
        maxs=np.maximum(acc.maxs, flat.max(axis=0)),
        samples_seen=acc.samples_seen + arr.shape[0],
    )


def merge_stats(a: ChannelStats, b: ChannelStats) -> ChannelStats:
    if a.num_channels != b.num_channels:
        raise ValidationError("channel-count mismatch in merge")
    return ChannelStats(
        mins=np.minimum(a.mins, b.mins),
        maxs=np.maximum(a.maxs, b.maxs),
        samples_seen=a.samples_seen + b.samples_seen,
    )


def reorder_stats(stats: ChannelStats, perm: np.ndarray) -> ChannelStats:
    """Permute channels: entry i of the result describes channel perm[i]."""
    perm = np.asarray(perm, dtype=np.int64)
    return ChannelStats(stats.mins[perm], stats.maxs[perm], stats.samples_seen)


@dataclass(frozen=True)
class QKJointStats:
    """Per-head, per-channel extrema of the query and key activations.

    Channel i of head h yields the 4-point (q_max, q_min, k_max, k_min)
    used to cluster Q and K jointly so they share one reorder index.
    """

    q_heads: tuple[ChannelStats, ...]
    k_heads: tuple[ChannelStats, ...]

    def __post_init__(self) -> None:
        if len(self.q_heads) != len(self.k_heads):
            raise ValidationError("q/k head counts differ")
        for q, k in zip(self.q_heads, self.k_heads):
            if q.num_channels != k.num_channels:
                raise ValidationError("q/k channel counts differ within a head")
        object.__setattr__(self, "q_heads", tuple(self.q_heads))
        object.__setattr__(self, "k_heads", tuple(self.k_heads))

    @property
    def num_heads(self) -> int:
        return len(self.q_heads)

    def points(self, head: int) -> np.ndarray:
        """[C_head, 4] clustering input (q_max, q_min, k_max, k_min)."""
        q, k = self.q_heads[head], self.k_heads[head]
        return np.stack([q.maxs, q.mins, k.maxs, k.mins], axis=1)


def collect_qk_stats(q, k) -> QKJointStats:
    """Extrema of [B, H, N, C_head] query/key tensors, one stats pair per head."""
    qa, ka = _as_array(q), _as_array(k)
    if qa.shape != ka.shape:
        raise ValidationError(f"q/k shape mismatch: {qa.shape} vs {ka.shape}")
    if qa.ndim != 4:
        raise ValidationError("expected (sample, head, token, channel) tensors")
    heads_q, heads_k = [], []
    for h in range(qa.shape[1]):
        ch = qa.shape[-1]
        heads_q.append(collect_stats(ChannelStats.empty(ch), qa[:, h]))
        heads_k.append(collect_stats(ChannelStats.empty(ch), ka[:, h]))
    return QKJointStats(tuple(heads_q), tuple(heads_k))


def merge_qk_stats(a: QKJointStats, b: QKJointStats) -> QKJointStats:
    if a.num_heads != b.num_heads:
        raise ValidationError("head-count mismatch in merge")
    return QKJointStats(
        tuple(merge_stats(x, y) for x, y in zip(a.q_heads, b.q_heads)),
        tuple(merge_stats(x, y) for x, y in zip(a.k_heads, b.k_heads)),
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def stats_to_dict(stats: ChannelStats) -> dict:
    if stats.samples_seen == 0:
        raise ValidationError("refusing to serialize empty stats")
    return {
        "channels": stats.num_channels,
        "mins": stats.mins.tolist(),
        "maxs": stats.maxs.tolist(),
        "samples_seen": stats.samples_seen,
    }


def stats_from_dict(doc: dict) -> ChannelStats:
    stats = ChannelStats(
        mins=np.asarray(doc["mins"], dtype=np.float64),
        maxs=np.asarray(doc["maxs"], dtype=np.float64),
        samples_seen=int(doc["samples_seen"]),
    )
    if stats.num_channels != int(doc["channels"]):
        raise ValidationError("channel count disagrees with array length")
    return stats


def qk_stats_to_dict(stats: QKJointStats) -> dict:
    heads = []
    for q, k in zip(stats.q_heads, stats.k_heads):
        heads.append({
            "q_max": q.maxs.tolist(), "q_min": q.mins.tolist(),
            "k_max": k.maxs.tolist(), "k_min": k.mins.tolist(),
            "samples_seen": q.samples_seen,
        })
    return {"heads": heads}


def qk_stats_from_dict(doc: dict) -> QKJointStats:
    q_heads, k_heads = [], []
    for h in doc["heads"]:
        n = int(h.get("samples_seen", 1))
        q_heads.append(ChannelStats(np.asarray(h["q_min"]), np.asarray(h["q_max"]), n))
        k_heads.append(ChannelStats(np.asarray(h["k_min"]), np.asarray(h["k_max"]), n))
    return QKJointStats(tuple(q_heads), tuple(k_heads))


def save_stats(stats: ChannelStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats_to_dict(stats), sort_keys=True, indent=1))


def load_stats(path: str | Path) -> ChannelStats:
    return stats_from_dict(json.loads(Path(path).read_text()))


def save_qk_stats(stats: QKJointStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(qk_stats_to_dict(stats), sort_keys=True, indent=1))


def load_qk_stats(path: str | Path) -> QKJointStats:
    return qk_stats_from_dict(json.loads(Path(path).read_text()))


def stats_csv_lines(stats: ChannelStats) -> list[str]:
    """(channel, min, max) rows for range scatter plots."""
    lines = ["channel,min,max"]
    for c in range(stats.num_channels):
        lines.append(f"{c},{float(stats.mins[c])!r},{float(stats.maxs[c])!r}")
    return lines

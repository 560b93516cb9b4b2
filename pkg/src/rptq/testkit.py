"""Synthetic activation generators and brute-force oracles for tests.

The generator reproduces the channel pathology that motivates range
clustering: a dense cloud of ordinary channels plus a few channels whose
extrema are orders of magnitude larger, with optional per-channel offsets
producing disjoint ranges.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .quant import dequantize_array, minmax_scale_zero
from .reorder import ReorderPlan, identity_plan
from .tensor import Tensor

# Noise is a truncated normal clipped at this many sigmas, so each channel's
# realized extrema sit on its intended range boundary almost surely.
CLIP_SIGMAS = 2.0


@dataclass(frozen=True)
class ChannelProfile:
    """Shape of a synthetic activation distribution.

    outlier channels draw from a Gaussian scaled by `outlier_multiplier`;
    per-channel centers are spread uniformly in [-offset_spread, offset_spread],
    which makes disjoint ranges like [-100, -50] vs [80, 100] reachable.
    The channel structure (which channels are outliers, their offsets) is a
    pure function of `seed`, so separate calibration and evaluation batches
    share it.
    """

    channels: int
    outlier_fraction: float = 0.0
    outlier_multiplier: float = 1.0
    offset_spread: float = 0.0
    scale_spread: float = 1.0
    base_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ValidationError("need at least one channel")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValidationError("outlier fraction outside [0, 1]")
        if self.outlier_multiplier < 1.0:
            raise ValidationError("outlier multiplier must be >= 1")
        if self.scale_spread < 1.0:
            raise ValidationError("scale spread must be >= 1")
        if self.base_scale <= 0.0:
            raise ValidationError("base scale must be positive")

    def channel_layout(self):
        """Per-channel (center, sigma, is_outlier) derived from the profile seed.

        Ordinary channels share `base_scale`, optionally spread log-uniformly
        over [base/scale_spread, base*scale_spread] so ranges form a
        continuum; outlier channels are scaled up by `outlier_multiplier`.
        """
        rng = np.random.default_rng(self.seed)
        n_out = int(round(self.outlier_fraction * self.channels))
        outliers = np.zeros(self.channels, dtype=bool)
        if n_out:
            outliers[rng.choice(self.channels, size=n_out, replace=False)] = True
        centers = rng.uniform(-self.offset_spread, self.offset_spread, self.channels)
        sigmas = np.full(self.channels, self.base_scale)
        if self.scale_spread > 1.0:
            log_s = np.log(self.scale_spread)
            sigmas = sigmas * np.exp(rng.uniform(-log_s, log_s, self.channels))
        sigmas[outliers] *= self.outlier_multiplier
        return centers, sigmas, outliers


def gen_activations(profile: ChannelProfile, samples: int, tokens: int,
                    seed: int) -> Tensor:
    """Deterministic (samples, tokens, channels) activation tensor."""
    if samples < 1 or tokens < 1:
        raise ValidationError("samples and tokens must be positive")
    centers, sigmas, _ = profile.channel_layout()
    rng = np.random.default_rng([profile.seed, seed])
    noise = rng.standard_normal((samples, tokens, profile.channels))
    noise = np.clip(noise, -CLIP_SIGMAS, CLIP_SIGMAS)
    return Tensor(centers + sigmas * noise)


def profile_to_dict(profile: ChannelProfile) -> dict:
    return asdict(profile)


def profile_from_dict(doc: dict) -> ChannelProfile:
    return ChannelProfile(**doc)


def save_profile(profile: ChannelProfile, path: str | Path) -> None:
    Path(path).write_text(json.dumps(profile_to_dict(profile), sort_keys=True, indent=1))


def load_profile(path: str | Path) -> ChannelProfile:
    return profile_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

BRUTE_FORCE_MAX_POINTS = 10
BRUTE_FORCE_MAX_CLUSTERS = 3


def brute_force_partition(points: np.ndarray, g: int):
    """Exact minimum within-cluster SSE over all surjective g-labelings.

    Only feasible for tiny instances (n <= 10, g <= 3); enumeration is
    vectorized over all g^n labelings.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n > BRUTE_FORCE_MAX_POINTS or g > BRUTE_FORCE_MAX_CLUSTERS:
        raise ValidationError(
            f"instance too large for enumeration (n={n}, g={g})")
    if g < 1 or g > n:
        raise ValidationError(f"cluster count {g} outside [1, {n}]")

    total = g ** n
    digits = (np.arange(total)[:, None] // g ** np.arange(n)[None, :]) % g
    onehot = digits[..., None] == np.arange(g)  # [A, n, g]
    counts = onehot.sum(axis=1)  # [A, g]
    surjective = (counts > 0).all(axis=1)
    sums = np.einsum("ang,nd->agd", onehot.astype(np.float64), points)
    sq_norm = (points ** 2).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        explained = np.where(counts > 0, (sums ** 2).sum(axis=2) / counts, 0.0)
    inertia = sq_norm - explained.sum(axis=1)
    inertia[~surjective] = np.inf
    best = int(np.argmin(inertia))
    return digits[best].astype(np.int64), float(inertia[best])


BRUTE_FORCE_GPTQ_MAX_COLS = 3
BRUTE_FORCE_GPTQ_MAX_BITS = 2


def brute_force_gptq(w: np.ndarray, x: np.ndarray, bits: int,
                     plan: ReorderPlan | None = None):
    """Exhaustive minimum of ||X W^T - X W^^T||^2 on the fixed Min-Max grid.

    Enumerates every code combination per output channel (rows separate in
    the objective). Limited to <= 3 columns and <= 2 bits.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValidationError("w must be [C2, C1] and x [M, C1]")
    c2, c1 = w.shape
    if c1 > BRUTE_FORCE_GPTQ_MAX_COLS or bits > BRUTE_FORCE_GPTQ_MAX_BITS:
        raise ValidationError(
            f"instance too large for enumeration (C1={c1}, bits={bits})")
    if plan is None:
        plan = identity_plan(c1)

    # Same grids the greedy and RTN quantizers use.
    scales = np.empty((plan.g, c2))
    zeros = np.empty((plan.g, c2), dtype=np.int64)
    for i, sl in enumerate(plan.cluster_slices()):
        block = w[:, sl]
        scales[i], zeros[i] = minmax_scale_zero(block.min(axis=1), block.max(axis=1), bits)
    col_cluster = np.repeat(np.arange(plan.g), plan.cluster_sizes)

    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    code_range = range(lo, hi + 1)
    combos = np.array(list(itertools.product(code_range, repeat=c1)), dtype=np.int64)

    best_codes = np.empty((c2, c1), dtype=np.int64)
    total_loss = 0.0
    for r in range(c2):
        s = scales[col_cluster, r]
        z = zeros[col_cluster, r]
        w_hat = dequantize_array(combos, s, z)  # [A, C1]
        resid = (w[r] - w_hat) @ x.T  # [A, M]
        losses = (resid ** 2).sum(axis=1)
        best = int(np.argmin(losses))
        best_codes[r] = combos[best]
        total_loss += float(losses[best])
    return best_codes, total_loss

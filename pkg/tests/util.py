"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from rptq.calibration import ChannelStats, collect_stats, reorder_stats
from rptq.qlinear import (ClusteredQuantLinear, dequantize_clusters,
                          quantize_activations)
from rptq.quant import QuantParams, minmax_scale_zero, quantize_array
from rptq.reorder import ReorderPlan
from rptq.testkit import ChannelProfile


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-30)
    return float(np.abs(a - b).max() / denom)


def random_plan(channels: int, g: int, rng: np.random.Generator) -> ReorderPlan:
    """A random permutation partitioned into g random non-empty clusters."""
    perm = rng.permutation(channels).astype(np.int64)
    if g == 1:
        sizes = np.array([channels], dtype=np.int64)
    else:
        cuts = np.sort(rng.choice(np.arange(1, channels), size=g - 1, replace=False))
        sizes = np.diff(np.concatenate([[0], cuts, [channels]])).astype(np.int64)
    return ReorderPlan(perm=perm, cluster_sizes=sizes,
                       centroids=np.zeros((g, 2)))


def random_quant_linear(rng: np.random.Generator, c1: int, c2: int, g: int,
                        bits: int, rows: int = 24):
    """A ClusteredQuantLinear over random data plus a matching activation
    batch already quantized against calibration stats."""
    from rptq.qlinear import quantize_weights_rtn

    plan_in = random_plan(c1, g, rng)
    plan_out = random_plan(c2, 1, rng)
    w = rng.normal(0, 1, (c2, c1))
    bias = rng.normal(0, 0.1, c2)
    acts = rng.normal(0, 2, (rows, c1))
    stats = collect_stats(ChannelStats.empty(c1), acts[None, ...])
    xq, act_params = quantize_activations(acts, plan_in, stats, bits)
    wq, w_scales, w_zeros = quantize_weights_rtn(w, plan_in, bits)
    layer = ClusteredQuantLinear(
        wq=wq, w_scales=w_scales, w_zeros=w_zeros, act_params=act_params,
        in_plan=plan_in, out_plan=plan_out, bias=bias)
    return layer, xq, act_params


def pathological_profile(seed: int, channels: int = 192) -> ChannelProfile:
    """The outlier-heavy, range-disjoint distribution used for comparisons."""
    return ChannelProfile(channels=channels, outlier_fraction=0.03,
                          outlier_multiplier=200.0, offset_spread=30.0,
                          base_scale=1.0, seed=seed)


def activation_mse(x: np.ndarray, plan: ReorderPlan, stats: ChannelStats,
                   bits: int) -> float:
    """Quantization MSE of a tensor under one reorder plan (reordered space)."""
    xr = x[..., plan.perm]
    sr = reorder_stats(stats, plan.perm)
    codes, params = quantize_activations(xr, plan, sr, bits)
    deq = dequantize_clusters(codes.data, plan, list(params))
    return float(((xr - deq) ** 2).mean())

"""Per-cluster quantized linear layers.

The input channel axis of a reordered linear layer is partitioned into the
clusters of its reorder plan. Activations share one (scale, zero point) per
cluster; weights get one pair per (cluster, output channel). Two forward
paths are provided: dequantize-then-matmul, and an integer-domain path that
expands the zero-point cross terms per cluster

    Y_q,i = Xq_i Wq_i^T - z^X_i Wq_i - z^W_i Xq_i + n_i z^X_i z^W_i
    Y     = sum_i s^X_i s^W_i Y_q,i

which is algebraically identical to the dequantized product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import ChannelStats
from .errors import DegenerateDataError, ValidationError
from .quant import (QuantParams, dequantize_array, minmax_scale_zero,
                    quantize_array)
from .reorder import ReorderPlan
from .tensor import IntTensor, Tensor, save_tensor, load_tensor

# Integer forward guarantees no accumulator overflow inside this envelope;
# wider configurations are rejected instead of silently widening.
INT_FORWARD_MAX_BITS = 8
INT_FORWARD_MAX_IN_CHANNELS = 2 ** 15


# ---------------------------------------------------------------------------
# Activation quantization
# ---------------------------------------------------------------------------

def cluster_params_from_stats(stats: ChannelStats, plan: ReorderPlan,
                              bits: int) -> list[QuantParams]:
    """One Min-Max parameter set per cluster. `stats` must already be in
    reordered channel order (entry i describes reordered channel i)."""
    if stats.num_channels != plan.num_channels:
        raise ValidationError("stats/plan channel counts differ")
    params = []
    for sl in plan.cluster_slices():
        lo, hi = float(stats.mins[sl].min()), float(stats.maxs[sl].max())
        scale, zero = minmax_scale_zero(np.array([lo]), np.array([hi]), bits)
        params.append(QuantParams(scale=float(np.float32(scale[0])),
                                  zero_point=int(zero[0]), bits=bits))
    return params


def quantize_clusters(x: np.ndarray, plan: ReorderPlan,
                      params: list[QuantParams]) -> np.ndarray:
    """Quantize a reordered activation tensor cluster by cluster (int64 codes)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != plan.num_channels:
        raise ValidationError("activation channel count does not match plan")
    if len(params) != plan.g:
        raise ValidationError("need one parameter set per cluster")
    codes = np.empty(x.shape, dtype=np.int64)
    for sl, p in zip(plan.cluster_slices(), params):
        codes[..., sl] = quantize_array(x[..., sl], p.scale, p.zero_point, p.bits)
    return codes


def dequantize_clusters(codes: np.ndarray, plan: ReorderPlan,
                        params: list[QuantParams]) -> np.ndarray:
    out = np.empty(codes.shape, dtype=np.float64)
    for sl, p in zip(plan.cluster_slices(), params):
        out[..., sl] = dequantize_array(codes[..., sl], p.scale, p.zero_point)
    return out


def quantize_activations(x, plan: ReorderPlan, stats: ChannelStats,
                         bits: int) -> tuple[IntTensor, list[QuantParams]]:
    """Static per-cluster activation quantization.

    `x` and `stats` are both in reordered channel order; cluster i's
    parameters come from the extrema over its channels.
    """
    params = cluster_params_from_stats(stats, plan, bits)
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    codes = quantize_clusters(arr, plan, params)
    return IntTensor(codes, bits=bits), params


# ---------------------------------------------------------------------------
# Weight quantization
# ---------------------------------------------------------------------------

def _weight_grids(w: np.ndarray, plan: ReorderPlan, bits: int):
    """Min-Max grids per (cluster, output channel): scales/zeros of shape [g, C2]."""
    g, c2 = plan.g, w.shape[0]
    scales = np.empty((g, c2))
    zeros = np.empty((g, c2), dtype=np.int64)
    for i, sl in enumerate(plan.cluster_slices()):
        block = w[:, sl]
        scales[i], zeros[i] = minmax_scale_zero(block.min(axis=1), block.max(axis=1), bits)
    return scales, zeros


def quantize_weights_rtn(w: np.ndarray, plan: ReorderPlan, bits: int):
    """Round-to-nearest baseline on the per-(cluster, output channel) grids.

    Returns (codes IntTensor [C2, C1], scales [g, C2], zeros [g, C2]).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != plan.num_channels:
        raise ValidationError("weight shape does not cover the plan's channels")
    scales, zeros = _weight_grids(w, plan, bits)
    codes = np.empty(w.shape, dtype=np.int64)
    for i, sl in enumerate(plan.cluster_slices()):
        codes[:, sl] = quantize_array(w[:, sl], scales[i][:, None],
                                      zeros[i][:, None], bits)
    return IntTensor(codes, bits=bits), scales, zeros


def _inverse_hessian_factor(h: np.ndarray) -> np.ndarray:
    """Upper-triangular U with H^-1 = U^T U; raises on a singular Hessian."""
    try:
        lower = np.linalg.cholesky(h)
        h_inv = np.linalg.inv(lower.T) @ np.linalg.inv(lower)
        return np.linalg.cholesky(h_inv).T
    except np.linalg.LinAlgError as exc:
        raise DegenerateDataError(
            "singular Hessian after damping: calibration data is degenerate"
        ) from exc


def quantize_weights_gptq(w: np.ndarray, x_calib: np.ndarray, plan: ReorderPlan,
                          bits: int, damp: float = 0.01,
                          cross_cluster: bool = False):
    """Greedy column-by-column weight quantization with error compensation.

    Within each input cluster, columns are quantized in natural order on
    grids fixed from the original weights; after quantizing column j, the
    still-unquantized columns of the same cluster absorb the scaled residual
    through the inverse-Hessian row (H = X^T X + damp * mean(diag) * I).
    Compensation never crosses cluster boundaries unless `cross_cluster`
    is set.

    Returns (codes IntTensor [C2, C1], scales [g, C2], zeros [g, C2]).
    """
    w = np.asarray(w, dtype=np.float64)
    x_calib = np.asarray(x_calib, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != plan.num_channels:
        raise ValidationError("weight shape does not cover the plan's channels")
    if x_calib.ndim != 2 or x_calib.shape[1] != w.shape[1]:
        raise ValidationError("calibration activations do not match weight columns")
    if len(x_calib) < 1:
        raise ValidationError("need at least one calibration row")
    if not np.any(x_calib):
        raise DegenerateDataError(
            "calibration activations are identically zero")

    scales, zeros = _weight_grids(w, plan, bits)
    codes = np.empty(w.shape, dtype=np.int64)

    if cross_cluster:
        blocks = [slice(0, w.shape[1])]
    else:
        blocks = plan.cluster_slices()

    slices = plan.cluster_slices()
    starts = np.array([sl.start for sl in slices])

    def grid_for(col: int):
        cluster = int(np.searchsorted(starts, col, side="right") - 1)
        return scales[cluster], zeros[cluster]

    for block in blocks:
        xb = x_calib[:, block]
        h = xb.T @ xb
        mean_diag = float(np.mean(np.diag(h)))
        if mean_diag <= 0.0:
            # All-zero input block (e.g. a cluster of dead ReLU channels):
            # every code choice has zero layerwise loss, so round to nearest.
            for j in range(block.start, block.stop):
                s, z = grid_for(j)
                codes[:, j] = quantize_array(w[:, j], s, z, bits)
            continue
        h = h + damp * mean_diag * np.eye(h.shape[0])
        u = _inverse_hessian_factor(h)

        wb = w[:, block].copy()
        m = wb.shape[1]
        for j in range(m):
            s, z = grid_for(block.start + j)
            col = wb[:, j]
            q = quantize_array(col, s, z, bits)
            codes[:, block.start + j] = q
            deq = dequantize_array(q, s, z)
            err = (col - deq) / u[j, j]
            if j + 1 < m:
                wb[:, j + 1:] -= np.outer(err, u[j, j + 1:])

    return IntTensor(codes, bits=bits), scales, zeros


def layerwise_loss(w: np.ndarray, w_hat: np.ndarray, x: np.ndarray) -> float:
    """||X W^T - X W^^T||_F^2, the objective weight quantization minimizes."""
    diff = np.asarray(x, dtype=np.float64) @ (np.asarray(w) - np.asarray(w_hat)).T
    return float((diff ** 2).sum())


def dequantize_weights(codes: np.ndarray, plan: ReorderPlan,
                       scales: np.ndarray, zeros: np.ndarray) -> np.ndarray:
    w_hat = np.empty(codes.shape, dtype=np.float64)
    for i, sl in enumerate(plan.cluster_slices()):
        w_hat[:, sl] = dequantize_array(codes[:, sl], scales[i][:, None], zeros[i][:, None])
    return w_hat


# ---------------------------------------------------------------------------
# The quantized layer and its two forward paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusteredQuantLinear:
    """Reordered, per-cluster-quantized weights plus activation parameters.

    wq holds the quantized (already reordered) weight codes; w_scales /
    w_zeros are [g, C2]; act_params carries the calibrated input activation
    parameters, one per input cluster.
    """

    wq: IntTensor
    w_scales: np.ndarray
    w_zeros: np.ndarray
    act_params: tuple
    in_plan: ReorderPlan
    out_plan: ReorderPlan
    bias: np.ndarray

    def __post_init__(self) -> None:
        c2, c1 = self.wq.shape
        if self.in_plan.num_channels != c1:
            raise ValidationError("in_plan does not cover the weight columns")
        if self.out_plan.num_channels != c2:
            raise ValidationError("out_plan does not cover the weight rows")
        g = self.in_plan.g
        w_scales = np.asarray(self.w_scales, dtype=np.float64)
        w_zeros = np.asarray(self.w_zeros, dtype=np.int64)
        if w_scales.shape != (g, c2) or w_zeros.shape != (g, c2):
            raise ValidationError("weight parameter arrays must be [g, C2]")
        if len(self.act_params) != g:
            raise ValidationError("need one activation parameter set per cluster")
        bias = np.asarray(self.bias, dtype=np.float64)
        if bias.shape != (c2,):
            raise ValidationError("bias length must match output channels")
        object.__setattr__(self, "w_scales", w_scales)
        object.__setattr__(self, "w_zeros", w_zeros)
        object.__setattr__(self, "act_params", tuple(self.act_params))
        object.__setattr__(self, "bias", bias)

    @property
    def in_channels(self) -> int:
        return self.wq.shape[1]

    @property
    def out_channels(self) -> int:
        return self.wq.shape[0]


def build_quant_linear(w: np.ndarray, bias: np.ndarray, in_plan: ReorderPlan,
                       out_plan: ReorderPlan, act_params, weight_bits: int,
                       method: str = "rtn", x_calib: np.ndarray | None = None,
                       damp: float = 0.01) -> ClusteredQuantLinear:
    """Quantize already-fused weights into a ClusteredQuantLinear."""
    if method == "rtn":
        wq, scales, zeros = quantize_weights_rtn(w, in_plan, weight_bits)
    elif method == "gptq":
        if x_calib is None:
            raise ValidationError("gptq requires calibration activations")
        wq, scales, zeros = quantize_weights_gptq(w, x_calib, in_plan,
                                                  weight_bits, damp=damp)
    else:
        raise ValidationError(f"unknown weight method {method!r}")
    return ClusteredQuantLinear(wq=wq, w_scales=scales, w_zeros=zeros,
                                act_params=tuple(act_params), in_plan=in_plan,
                                out_plan=out_plan, bias=np.asarray(bias, dtype=np.float64))


def _check_cluster_structure(xq: IntTensor, act_params, layer: ClusteredQuantLinear):
    if xq.shape[-1] != layer.in_channels:
        raise ValidationError("activation channel count does not match the layer")
    if len(act_params) != layer.in_plan.g:
        raise ValidationError("activation parameter count does not match clusters")


def forward_dequant(xq: IntTensor, act_params, layer: ClusteredQuantLinear) -> Tensor:
    """Dequantize activations and weights, then matmul in floating point."""
    _check_cluster_structure(xq, act_params, layer)
    x_hat = dequantize_clusters(xq.data, layer.in_plan, list(act_params))
    w_hat = dequantize_weights(layer.wq.data, layer.in_plan,
                               layer.w_scales, layer.w_zeros)
    return Tensor(x_hat @ w_hat.T + layer.bias)


def forward_integer(xq: IntTensor, act_params, layer: ClusteredQuantLinear) -> Tensor:
    """Integer-domain forward: per-cluster integer matmuls with zero-point
    correction terms, then one float scaling per (cluster, output channel).
    """
    _check_cluster_structure(xq, act_params, layer)
    max_bits = max(xq.bits, layer.wq.bits)
    if max_bits > INT_FORWARD_MAX_BITS or layer.in_channels > INT_FORWARD_MAX_IN_CHANNELS:
        raise ValidationError(
            f"integer forward supports bits <= {INT_FORWARD_MAX_BITS} and "
            f"C1 <= {INT_FORWARD_MAX_IN_CHANNELS}; got bits={max_bits}, "
            f"C1={layer.in_channels}"
        )
    x_codes = xq.data.astype(np.int64)
    w_codes = layer.wq.data.astype(np.int64)
    lead = x_codes.shape[:-1]
    y = np.zeros(lead + (layer.out_channels,), dtype=np.float64)
    for i, sl in enumerate(layer.in_plan.cluster_slices()):
        p = act_params[i]
        a = x_codes[..., sl]
        wb = w_codes[:, sl]
        n = wb.shape[1]
        zx = int(p.zero_point)
        zw = layer.w_zeros[i]  # per output channel
        prod = a @ wb.T
        col_w = wb.sum(axis=1)
        row_a = a.sum(axis=-1)
        yq = (prod - zx * col_w - row_a[..., None] * zw + n * zx * zw)
        y += (p.scale * layer.w_scales[i]) * yq
    return Tensor(y + layer.bias)


# ---------------------------------------------------------------------------
# Bundle serialization: manifest JSON + weight codes + parameter arrays
# ---------------------------------------------------------------------------

def save_quant_linear(layer: ClusteredQuantLinear, directory: str | Path,
                      name: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(layer.wq, directory / f"{name}.wq.bin")
    doc = {
        "weight_bits": layer.wq.bits,
        "w_scales": layer.w_scales.tolist(),
        "w_zeros": layer.w_zeros.tolist(),
        "act_params": [
            {"scale": p.scale, "zero_point": p.zero_point, "bits": p.bits}
            for p in layer.act_params
        ],
        "bias": layer.bias.tolist(),
        "in_plan": {
            "perm": layer.in_plan.perm.tolist(),
            "cluster_sizes": layer.in_plan.cluster_sizes.tolist(),
            "centroids": layer.in_plan.centroids.tolist(),
        },
        "out_plan": {
            "perm": layer.out_plan.perm.tolist(),
            "cluster_sizes": layer.out_plan.cluster_sizes.tolist(),
            "centroids": layer.out_plan.centroids.tolist(),
        },
    }
    (directory / f"{name}.params.json").write_text(
        json.dumps(doc, sort_keys=True, indent=1))


def load_quant_linear(directory: str | Path, name: str) -> ClusteredQuantLinear:
    directory = Path(directory)
    doc = json.loads((directory / f"{name}.params.json").read_text())
    wq = load_tensor(directory / f"{name}.wq.bin").with_bits(doc["weight_bits"])
    plans = {}
    for key in ("in_plan", "out_plan"):
        p = doc[key]
        plans[key] = ReorderPlan(
            perm=np.asarray(p["perm"], dtype=np.int64),
            cluster_sizes=np.asarray(p["cluster_sizes"], dtype=np.int64),
            centroids=np.asarray(p["centroids"], dtype=np.float64),
        )
    act_params = tuple(
        QuantParams(scale=p["scale"], zero_point=p["zero_point"], bits=p["bits"])
        for p in doc["act_params"]
    )
    return ClusteredQuantLinear(
        wq=wq,
        w_scales=np.asarray(doc["w_scales"], dtype=np.float64),
        w_zeros=np.asarray(doc["w_zeros"], dtype=np.int64),
        act_params=act_params,
        in_plan=plans["in_plan"],
        out_plan=plans["out_plan"],
        bias=np.asarray(doc["bias"], dtype=np.float64),
    )

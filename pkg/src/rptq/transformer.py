"""A desk-scale quantized decoder layer with five reorder points.

The layer follows the pre-norm wiring LN1 -> Q/K/V -> QK-matmul -> softmax ->
PV-matmul -> out projection -> residual -> LN2 -> FFN -> residual. Reorder
points: R1 = LN1 output / QKV input, R2 = Q and K per head (shared, from
joint 4-point clustering), R3 = V and the attention-weighted value path per
head, R4 = LN2 output / first FFN input, R5 = FFN hidden activation. The
out-projection and final linear outputs keep original channel order so both
residual adds stay aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import (ChannelStats, QKJointStats, collect_qk_stats,
                          collect_stats, merge_qk_stats, merge_stats,
                          reorder_stats)
from .config import BitConfig
from .errors import ValidationError
from .fusion import (LN_EPS, LayerNormOp, LayerWiring, LinearWeights,
                     check_alignment, fuse_linear, layernorm_forward,
                     linear_forward)
from .qlinear import (ClusteredQuantLinear, build_quant_linear,
                      cluster_params_from_stats, dequantize_clusters,
                      dequantize_weights, forward_dequant, forward_integer,
                      quantize_clusters)
from .quant import QuantParams, dequantize_array, minmax_params, quantize_array
from .reorder import (ReorderPlan, concat_head_plans, identity_plan,
                      plan_reorder)
from .tensor import IntTensor, Tensor


# ---------------------------------------------------------------------------
# Toy model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyDims:
    layers: int
    hidden: int
    heads: int
    ffn: int

    def __post_init__(self) -> None:
        if min(self.layers, self.hidden, self.heads, self.ffn) < 1:
            raise ValidationError("all dimensions must be positive")
        if self.hidden % self.heads != 0:
            raise ValidationError(
                f"hidden {self.hidden} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


DEFAULT_DIMS = ToyDims(layers=2, hidden=128, heads=4, ffn=512)


@dataclass(frozen=True)
class LayerParams:
    gamma1: np.ndarray
    beta1: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass(frozen=True)
class ToyModel:
    dims: ToyDims
    seed: int
    layers: tuple[LayerParams, ...]


def build_toy_model(seed: int, dims: ToyDims = DEFAULT_DIMS) -> ToyModel:
    """Deterministic random decoder stack; a stand-in for real checkpoints.

    Layer-norm gains are log-normal so the normalized outputs keep visible
    per-channel range differences for the clustering to exploit.
    """
    rng = np.random.default_rng(seed)
    d, f = dims.hidden, dims.ffn
    layers = []
    for _ in range(dims.layers):
        def w(rows, cols):
            return (rng.normal(0.0, 1.0 / np.sqrt(cols), (rows, cols))).astype(np.float32)

        def b(n, scale=0.02):
            return rng.normal(0.0, scale, n).astype(np.float32)

        layers.append(LayerParams(
            gamma1=np.exp(rng.normal(0.0, 0.5, d)).astype(np.float32),
            beta1=rng.normal(0.0, 0.5, d).astype(np.float32),
            wq=w(d, d), bq=b(d), wk=w(d, d), bk=b(d), wv=w(d, d), bv=b(d),
            wo=w(d, d), bo=b(d),
            gamma2=np.exp(rng.normal(0.0, 0.5, d)).astype(np.float32),
            beta2=rng.normal(0.0, 0.5, d).astype(np.float32),
            w1=w(f, d), b1=b(f), w2=w(d, f), b2=b(d),
        ))
    return ToyModel(dims=dims, seed=seed, layers=tuple(layers))


# ---------------------------------------------------------------------------
# Full-precision reference forward
# ---------------------------------------------------------------------------

def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _causal_scores(q4: np.ndarray, k4: np.ndarray, past: int) -> np.ndarray:
    """Masked scaled dot-product scores; query i sees keys up to past + i."""
    dh = q4.shape[-1]
    scores = q4 @ k4.swapaxes(-1, -2) / np.sqrt(dh)
    n, t = scores.shape[-2], scores.shape[-1]
    mask = np.arange(t)[None, :] > past + np.arange(n)[:, None]
    return np.where(mask, -np.inf, scores)


def _attention(q4, k4, v4, past: int) -> np.ndarray:
    probs = _softmax(_causal_scores(q4, k4, past))
    return probs @ v4


@dataclass
class LayerTrace:
    """Intermediate activations of one reference layer forward."""
    h1: np.ndarray          # LN1 output                  [B, N, C]
    q4: np.ndarray          # per-head query              [B, H, N, dh]
    k4: np.ndarray
    v4: np.ndarray
    ctx4: np.ndarray        # attention-weighted values   [B, H, N, dh]
    h2: np.ndarray          # LN2 output                  [B, N, C]
    hidden: np.ndarray      # post-ReLU FFN hidden        [B, N, ffn]
    out: np.ndarray         # layer output                [B, N, C]


def reference_layer_forward(p: LayerParams, x: np.ndarray, heads: int,
                            past_kv=None) -> tuple[np.ndarray, tuple, LayerTrace]:
    """Plain float decoder layer. Returns (output, (K, V) full history, trace)."""
    x = np.asarray(x, dtype=np.float64)
    h1 = _layer_norm(x, p.gamma1, p.beta1)
    q4 = _split_heads(h1 @ np.asarray(p.wq, dtype=np.float64).T + p.bq, heads)
    k4 = _split_heads(h1 @ np.asarray(p.wk, dtype=np.float64).T + p.bk, heads)
    v4 = _split_heads(h1 @ np.asarray(p.wv, dtype=np.float64).T + p.bv, heads)
    if past_kv is not None:
        k_all = np.concatenate([past_kv[0], k4], axis=2)
        v_all = np.concatenate([past_kv[1], v4], axis=2)
        past = past_kv[0].shape[2]
    else:
        k_all, v_all, past = k4, v4, 0
    ctx4 = _attention(q4, k_all, v_all, past)
    attn_out = _merge_heads(ctx4) @ np.asarray(p.wo, dtype=np.float64).T + p.bo
    r1 = x + attn_out
    h2 = _layer_norm(r1, p.gamma2, p.beta2)
    hidden = np.maximum(h2 @ np.asarray(p.w1, dtype=np.float64).T + p.b1, 0.0)
    y = hidden @ np.asarray(p.w2, dtype=np.float64).T + p.b2
    out = r1 + y
    trace = LayerTrace(h1=h1, q4=q4, k4=k4, v4=v4, ctx4=ctx4, h2=h2,
                       hidden=hidden, out=out)
    return out, (k_all, v_all), trace


def reference_model_forward(model: ToyModel, x: np.ndarray, past=None):
    """Run the whole stack. `past` is a list of (K, V) tuples or None."""
    x = np.asarray(x, dtype=np.float64)
    new_past, traces = [], []
    for i, p in enumerate(model.layers):
        prev = None if past is None else past[i]
        x, kv, trace = reference_layer_forward(p, x, model.dims.heads, prev)
        new_past.append(kv)
        traces.append(trace)
    return x, new_past, traces


# ---------------------------------------------------------------------------
# Calibration over the reference model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerStats:
    """Extrema for the five reorder sites (plus the ctx leg of R3)."""
    r1: ChannelStats
    qk: QKJointStats
    v_heads: tuple[ChannelStats, ...]
    ctx_heads: tuple[ChannelStats, ...]
    r4: ChannelStats
    r5: ChannelStats


def _head_stats(x4: np.ndarray) -> tuple[ChannelStats, ...]:
    heads = []
    for h in range(x4.shape[1]):
        acc = ChannelStats.empty(x4.shape[-1])
        heads.append(collect_stats(acc, x4[:, h]))
    return tuple(heads)


def _layer_stats_from_trace(trace: LayerTrace) -> LayerStats:
    c = trace.h1.shape[-1]
    f = trace.hidden.shape[-1]
    return LayerStats(
        r1=collect_stats(ChannelStats.empty(c), trace.h1),
        qk=collect_qk_stats(trace.q4, trace.k4),
        v_heads=_head_stats(trace.v4),
        ctx_heads=_head_stats(trace.ctx4),
        r4=collect_stats(ChannelStats.empty(c), trace.h2),
        r5=collect_stats(ChannelStats.empty(f), trace.hidden),
    )


def _merge_layer_stats(a: LayerStats, b: LayerStats) -> LayerStats:
    return LayerStats(
        r1=merge_stats(a.r1, b.r1),
        qk=merge_qk_stats(a.qk, b.qk),
        v_heads=tuple(merge_stats(x, y) for x, y in zip(a.v_heads, b.v_heads)),
        ctx_heads=tuple(merge_stats(x, y) for x, y in zip(a.ctx_heads, b.ctx_heads)),
        r4=merge_stats(a.r4, b.r4),
        r5=merge_stats(a.r5, b.r5),
    )


def calibrate_model(model: ToyModel, batches) -> list[LayerStats]:
    """Collect per-site extrema over calibration batches (prefill mode)."""
    per_layer: list[LayerStats | None] = [None] * model.dims.layers
    count = 0
    for batch in batches:
        arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        _, _, traces = reference_model_forward(model, arr)
        for i, trace in enumerate(traces):
            stats = _layer_stats_from_trace(trace)
            per_layer[i] = stats if per_layer[i] is None else _merge_layer_stats(per_layer[i], stats)
        count += 1
    if count == 0:
        raise ValidationError("zero calibration samples")
    return per_layer  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterCounts:
    r1: int = 32
    r2: int = 4
    r3: int = 4
    r4: int = 32
    r5: int = 32

    def __post_init__(self) -> None:
        if min(self.r1, self.r2, self.r3, self.r4, self.r5) < 1:
            raise ValidationError("cluster counts must be positive")

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.r1, self.r2, self.r3, self.r4, self.r5)


@dataclass(frozen=True)
class DecoderLayerPlan:
    """Reorder plans for one decoder layer: R1/R4/R5 plus per-head R2/R3.

    R2 is shared between Q and K by construction (joint clustering), and the
    out-projection / final-linear outputs are identity, so every plan this
    type can represent passes the alignment check.
    """
    r1: ReorderPlan
    r2_heads: tuple[ReorderPlan, ...]
    r3_heads: tuple[ReorderPlan, ...]
    r4: ReorderPlan
    r5: ReorderPlan
    counts: ClusterCounts

    def __post_init__(self) -> None:
        if len(self.r2_heads) != len(self.r3_heads):
            raise ValidationError("r2/r3 head counts differ")
        object.__setattr__(self, "r2_heads", tuple(self.r2_heads))
        object.__setattr__(self, "r3_heads", tuple(self.r3_heads))

    @property
    def heads(self) -> int:
        return len(self.r2_heads)

    def wiring(self) -> LayerWiring:
        return LayerWiring(
            ln1_out=self.r1, qkv_in=self.r1,
            q_out=self.r2_heads, k_out=self.r2_heads,
            v_out=self.r3_heads, out_proj_in=self.r3_heads,
            out_proj_out=None,
            ln2_out=self.r4, fc1_in=self.r4,
            fc1_out=self.r5, fc2_in=self.r5,
            fc2_out=None,
        )


def plan_layer(stats: LayerStats, counts: ClusterCounts, seed: int) -> DecoderLayerPlan:
    """Cluster every reorder site and verify the wiring is alignment-clean."""
    for name in ("r1", "qk", "v_heads", "ctx_heads", "r4", "r5"):
        if getattr(stats, name, None) is None:
            raise ValidationError(f"missing stats for site {name}")
    r1 = plan_reorder(stats.r1.signatures(), counts.r1, seed + 11)
    r2_heads = tuple(
        plan_reorder(stats.qk.points(h), counts.r2, seed + 100 + h)
        for h in range(stats.qk.num_heads)
    )
    r3_heads = tuple(
        plan_reorder(stats.v_heads[h].signatures(), counts.r3, seed + 200 + h)
        for h in range(len(stats.v_heads))
    )
    r4 = plan_reorder(stats.r4.signatures(), counts.r4, seed + 12)
    r5 = plan_reorder(stats.r5.signatures(), counts.r5, seed + 13)
    plan = DecoderLayerPlan(r1=r1, r2_heads=r2_heads, r3_heads=r3_heads,
                            r4=r4, r5=r5, counts=counts)
    violations = check_alignment(plan.wiring())
    if violations:
        raise ValidationError(f"planner produced misaligned wiring: {violations}")
    return plan


# ---------------------------------------------------------------------------
# Full-precision forward with fused reorders
# ---------------------------------------------------------------------------

def _fused_linears(p: LayerParams, plan: DecoderLayerPlan):
    """Fold the reorder plans into the six weight matrices."""
    q_glob = concat_head_plans(list(plan.r2_heads))
    v_glob = concat_head_plans(list(plan.r3_heads))
    return {
        "q": fuse_linear(LinearWeights(p.wq, p.bq), plan.r1, q_glob),
        "k": fuse_linear(LinearWeights(p.wk, p.bk), plan.r1, q_glob),
        "v": fuse_linear(LinearWeights(p.wv, p.bv), plan.r1, v_glob),
        "out": fuse_linear(LinearWeights(p.wo, p.bo), v_glob, None),
        "fc1": fuse_linear(LinearWeights(p.w1, p.b1), plan.r4, plan.r5),
        "fc2": fuse_linear(LinearWeights(p.w2, p.b2), plan.r5, None),
    }


def fused_layer_forward(p: LayerParams, plan: DecoderLayerPlan, x: np.ndarray,
                        heads: int, past_kv=None) -> tuple[np.ndarray, tuple]:
    """Float forward through the fused layer: every intermediate tensor lives
    in reordered channel space, the output is back in original order."""
    x = np.asarray(x, dtype=np.float64)
    lin = _fused_linears(p, plan)
    ln1 = LayerNormOp(p.gamma1, p.beta1, out_plan=plan.r1)
    ln2 = LayerNormOp(p.gamma2, p.beta2, out_plan=plan.r4)

    h1 = layernorm_forward(ln1, x)
    q4 = _split_heads(linear_forward(lin["q"], h1), heads)
    k4 = _split_heads(linear_forward(lin["k"], h1), heads)
    v4 = _split_heads(linear_forward(lin["v"], h1), heads)
    if past_kv is not None:
        k_all = np.concatenate([past_kv[0], k4], axis=2)
        v_all = np.concatenate([past_kv[1], v4], axis=2)
        past = past_kv[0].shape[2]
    else:
        k_all, v_all, past = k4, v4, 0
    ctx4 = _attention(q4, k_all, v_all, past)
    r1_res = x + linear_forward(lin["out"], _merge_heads(ctx4))
    h2 = layernorm_forward(ln2, r1_res)
    hidden = np.maximum(linear_forward(lin["fc1"], h2), 0.0)
    out = r1_res + linear_forward(lin["fc2"], hidden)
    return out, (k_all, v_all)


# ---------------------------------------------------------------------------
# Quantized layer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiteParams:
    """Calibrated static activation parameters for every quantization site."""
    r1: tuple                    # per r1 cluster
    q_heads: tuple               # per head, per r2 cluster
    k_heads: tuple               # per head, per r2 cluster (kv bits)
    v_heads: tuple               # per head, per r3 cluster (kv bits)
    ctx_heads: tuple             # per head, per r3 cluster
    softmax: QuantParams
    r4: tuple
    r5: tuple


@dataclass(frozen=True)
class QuantizedLayer:
    plan: DecoderLayerPlan
    cfg: BitConfig
    ln1: LayerNormOp
    ln2: LayerNormOp
    q_lin: ClusteredQuantLinear
    k_lin: ClusteredQuantLinear
    v_lin: ClusteredQuantLinear
    out_lin: ClusteredQuantLinear
    fc1: ClusteredQuantLinear
    fc2: ClusteredQuantLinear
    sites: SiteParams
    heads: int


@dataclass(frozen=True)
class QuantizedModel:
    dims: ToyDims
    cfg: BitConfig
    layers: tuple[QuantizedLayer, ...]
    weight_method: str


class KVCache:
    """Per-layer quantized key/value history with static parameters.

    Keys carry the per-head R2 cluster parameters, values the R3 ones, both
    at the configured KV bit width; token count grows with each append.
    """

    def __init__(self, num_layers: int):
        self._k: list = [None] * num_layers
        self._v: list = [None] * num_layers

    def tokens(self, layer: int) -> int:
        return 0 if self._k[layer] is None else self._k[layer].shape[2]

    def append(self, layer: int, k_codes: np.ndarray, v_codes: np.ndarray) -> None:
        if self._k[layer] is None:
            self._k[layer], self._v[layer] = k_codes, v_codes
        else:
            if self._k[layer].shape[0] != k_codes.shape[0] or \
               self._k[layer].shape[1] != k_codes.shape[1]:
                raise ValidationError("cache batch/head shape mismatch")
            self._k[layer] = np.concatenate([self._k[layer], k_codes], axis=2)
            self._v[layer] = np.concatenate([self._v[layer], v_codes], axis=2)

    def get(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        if self._k[layer] is None:
            raise ValidationError("empty cache for layer")
        return self._k[layer], self._v[layer]


def _site_params(stats: LayerStats, plan: DecoderLayerPlan,
                 cfg: BitConfig) -> SiteParams:
    def per_cluster(ch_stats, site_plan, bits):
        return tuple(cluster_params_from_stats(
            reorder_stats(ch_stats, site_plan.perm), site_plan, bits))

    q_heads, k_heads, v_heads, ctx_heads = [], [], [], []
    for h in range(plan.heads):
        q_heads.append(per_cluster(stats.qk.q_heads[h], plan.r2_heads[h],
                                   cfg.activation_bits))
        k_heads.append(per_cluster(stats.qk.k_heads[h], plan.r2_heads[h],
                                   cfg.kv_bits))
        v_heads.append(per_cluster(stats.v_heads[h], plan.r3_heads[h],
                                   cfg.kv_bits))
        ctx_heads.append(per_cluster(stats.ctx_heads[h], plan.r3_heads[h],
                                     cfg.activation_bits))
    return SiteParams(
        r1=per_cluster(stats.r1, plan.r1, cfg.ln_bits),
        q_heads=tuple(q_heads), k_heads=tuple(k_heads),
        v_heads=tuple(v_heads), ctx_heads=tuple(ctx_heads),
        softmax=minmax_params(0.0, 1.0, cfg.ln_bits),
        r4=per_cluster(stats.r4, plan.r4, cfg.ln_bits),
        r5=per_cluster(stats.r5, plan.r5, cfg.activation_bits),
    )


def collect_linear_inputs(model: ToyModel, plans: list[DecoderLayerPlan],
                          batches) -> list[dict]:
    """Per layer, the reordered float calibration inputs of each linear
    (rows are flattened sample x token positions). Feeds the GPTQ Hessians."""
    collected: list[dict] = [
        {"r1": [], "ctx": [], "r4": [], "r5": []} for _ in model.layers
    ]
    for batch in batches:
        arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        _, _, traces = reference_model_forward(model, arr)
        for i, trace in enumerate(traces):
            plan = plans[i]
            c = trace.h1.shape[-1]
            v_glob = concat_head_plans(list(plan.r3_heads))
            ctx = _merge_heads(trace.ctx4).reshape(-1, c)
            collected[i]["r1"].append(trace.h1.reshape(-1, c)[:, plan.r1.perm])
            collected[i]["ctx"].append(ctx[:, v_glob.perm])
            collected[i]["r4"].append(trace.h2.reshape(-1, c)[:, plan.r4.perm])
            collected[i]["r5"].append(
                trace.hidden.reshape(-1, trace.hidden.shape[-1])[:, plan.r5.perm])
    return [{k: np.concatenate(v) for k, v in layer.items()} for layer in collected]


def quantize_model(model: ToyModel, stats: list[LayerStats],
                   plans: list[DecoderLayerPlan], cfg: BitConfig,
                   weight_method: str = "gptq", damp: float = 0.01,
                   calib_batches=None) -> QuantizedModel:
    """Fuse reorders into the weights and quantize everything statically."""
    if weight_method == "gptq":
        if calib_batches is None:
            raise ValidationError("gptq weight quantization needs calibration batches")
        linear_inputs = collect_linear_inputs(model, plans, calib_batches)
    else:
        linear_inputs = [dict() for _ in model.layers]

    qlayers = []
    for i, p in enumerate(model.layers):
        plan, lstats = plans[i], stats[i]
        lin = _fused_linears(p, plan)
        sites = _site_params(lstats, plan, cfg)
        q_glob = concat_head_plans(list(plan.r2_heads))
        v_glob = concat_head_plans(list(plan.r3_heads))
        xin = linear_inputs[i]

        def build(fused, in_plan, out_plan, act_params, calib_key):
            return build_quant_linear(
                fused.w, fused.bias, in_plan, out_plan, act_params,
                weight_bits=cfg.weight_bits, method=weight_method,
                x_calib=xin.get(calib_key), damp=damp)

        r1_params = sites.r1
        ctx_params_flat = tuple(pp for head in sites.ctx_heads for pp in head)
        qlayers.append(QuantizedLayer(
            plan=plan, cfg=cfg,
            ln1=LayerNormOp(p.gamma1, p.beta1, out_plan=plan.r1),
            ln2=LayerNormOp(p.gamma2, p.beta2, out_plan=plan.r4),
            q_lin=build(lin["q"], plan.r1, q_glob, r1_params, "r1"),
            k_lin=build(lin["k"], plan.r1, q_glob, r1_params, "r1"),
            v_lin=build(lin["v"], plan.r1, v_glob, r1_params, "r1"),
            out_lin=build(lin["out"], v_glob, identity_plan(model.dims.hidden),
                          ctx_params_flat, "ctx"),
            fc1=build(lin["fc1"], plan.r4, plan.r5, sites.r4, "r4"),
            fc2=build(lin["fc2"], plan.r5, identity_plan(model.dims.hidden),
                      sites.r5, "r5"),
            sites=sites, heads=model.dims.heads,
        ))
    return QuantizedModel(dims=model.dims, cfg=cfg, layers=tuple(qlayers),
                          weight_method=weight_method)


# ---------------------------------------------------------------------------
# Quantized forward
# ---------------------------------------------------------------------------

def validate_forward_mode(cfg: BitConfig, forward: str) -> None:
    if forward not in ("dequant", "integer"):
        raise ValidationError(f"unknown forward mode {forward!r}")
    if forward == "integer":
        if cfg.kv_only:
            raise ValidationError(
                "integer forward needs quantized activations; KV-only modes "
                "keep activations in floating point")
        if max(cfg.weight_bits, cfg.activation_bits, cfg.kv_bits, cfg.ln_bits) > 8:
            raise ValidationError(
                "integer forward supports at most 8-bit operands")


def _fake_quant_site(x: np.ndarray, plan: ReorderPlan, params,
                     trace: dict | None, site: str):
    """Quantize a reordered site tensor; returns (codes, dequantized)."""
    codes = quantize_clusters(x, plan, list(params))
    deq = dequantize_clusters(codes, plan, list(params))
    if trace is not None:
        trace[site] = trace.get(site, 0.0) + float(((x - deq) ** 2).mean())
    return codes, deq


def _linear_out(qlin: ClusteredQuantLinear, codes: np.ndarray | None,
                x_float: np.ndarray, params, forward: str) -> np.ndarray:
    """Apply a quantized linear to either quantized codes or float input."""
    if codes is None:
        w_hat = dequantize_weights(qlin.wq.data, qlin.in_plan,
                                   qlin.w_scales, qlin.w_zeros)
        return x_float @ w_hat.T + qlin.bias
    xq = IntTensor(codes, bits=params[0].bits)
    if forward == "integer":
        return forward_integer(xq, params, qlin).data.astype(np.float64)
    return forward_dequant(xq, params, qlin).data.astype(np.float64)


def _int_qk_scores(q_codes, k_codes, q_params, k_params, plan: ReorderPlan,
                   past: int) -> np.ndarray:
    """Integer-domain QK^T per shared cluster with zero-point corrections."""
    n, t = q_codes.shape[-2], k_codes.shape[-2]
    out = np.zeros(q_codes.shape[:-2] + (n, t), dtype=np.float64)
    for sl, pq, pk in zip(plan.cluster_slices(), q_params, k_params):
        a = q_codes[..., sl].astype(np.int64)
        b = k_codes[..., sl].astype(np.int64)
        c = a.shape[-1]
        zq, zk = pq.zero_point, pk.zero_point
        prod = a @ b.swapaxes(-1, -2)
        yq = (prod - zk * a.sum(axis=-1)[..., None]
              - zq * b.sum(axis=-1)[..., None, :] + c * zq * zk)
        out += pq.scale * pk.scale * yq
    dh = plan.num_channels
    scores = out / np.sqrt(dh)
    mask = np.arange(t)[None, :] > past + np.arange(n)[:, None]
    return np.where(mask, -np.inf, scores)


def _int_pv_ctx(p_codes, p_param: QuantParams, v_codes, v_params,
                plan: ReorderPlan) -> np.ndarray:
    """Integer-domain probs @ V; V clusters partition the output columns."""
    t = v_codes.shape[-2]
    out = np.zeros(p_codes.shape[:-1] + (plan.num_channels,), dtype=np.float64)
    a = p_codes.astype(np.int64)
    zp = p_param.zero_point
    row_a = a.sum(axis=-1)
    for sl, pv in zip(plan.cluster_slices(), v_params):
        b = v_codes[..., sl].astype(np.int64)
        zv = pv.zero_point
        yq = (a @ b - zv * row_a[..., None] - zp * b.sum(axis=-2)[..., None, :]
              + t * zp * zv)
        out[..., sl] = p_param.scale * pv.scale * yq
    return out


def run_layer(qlayer: QuantizedLayer, x: np.ndarray, cache: KVCache,
              layer_idx: int, forward: str = "dequant",
              trace: dict | None = None) -> np.ndarray:
    """One quantized decoder layer step; extends the cache by N tokens.

    `x` arrives and leaves in original (unreordered) channel order. In
    KV-only modes every activation flows in float and only the cache tensors
    are quantized.
    """
    validate_forward_mode(qlayer.cfg, forward)
    cfg = qlayer.cfg
    quant_acts = not cfg.kv_only
    x = np.asarray(x, dtype=np.float64)
    plan = qlayer.plan
    heads, dh = qlayer.heads, plan.r2_heads[0].num_channels

    h1 = layernorm_forward(qlayer.ln1, x)
    if quant_acts:
        codes_r1, h1_deq = _fake_quant_site(h1, plan.r1, qlayer.sites.r1, trace, "r1")
        q = _linear_out(qlayer.q_lin, codes_r1, h1_deq, qlayer.sites.r1, forward)
        k = _linear_out(qlayer.k_lin, codes_r1, h1_deq, qlayer.sites.r1, forward)
        v = _linear_out(qlayer.v_lin, codes_r1, h1_deq, qlayer.sites.r1, forward)
    else:
        q = _linear_out(qlayer.q_lin, None, h1, qlayer.sites.r1, forward)
        k = _linear_out(qlayer.k_lin, None, h1, qlayer.sites.r1, forward)
        v = _linear_out(qlayer.v_lin, None, h1, qlayer.sites.r1, forward)
    q4, k4, v4 = (_split_heads(t, heads) for t in (q, k, v))

    # Key/value quantization (per head, shared R2 / R3 cluster structure);
    # the cache always stores codes under the static calibration parameters.
    k_codes = np.empty(k4.shape, dtype=np.int64)
    v_codes = np.empty(v4.shape, dtype=np.int64)
    for h in range(heads):
        kc, kd = _fake_quant_site(k4[:, h], plan.r2_heads[h],
                                  qlayer.sites.k_heads[h], trace, "k")
        vc, vd = _fake_quant_site(v4[:, h], plan.r3_heads[h],
                                  qlayer.sites.v_heads[h], trace, "v")
        k_codes[:, h], v_codes[:, h] = kc, vc
    past = cache.tokens(layer_idx)
    cache.append(layer_idx, k_codes, v_codes)
    k_all_codes, v_all_codes = cache.get(layer_idx)

    ctx4 = np.empty(q4.shape, dtype=np.float64)
    for h in range(heads):
        r2, r3 = plan.r2_heads[h], plan.r3_heads[h]
        k_hat = dequantize_clusters(k_all_codes[:, h], r2, list(qlayer.sites.k_heads[h]))
        v_hat = dequantize_clusters(v_all_codes[:, h], r3, list(qlayer.sites.v_heads[h]))
        if quant_acts:
            q_codes, q_hat = _fake_quant_site(q4[:, h], r2,
                                              qlayer.sites.q_heads[h], trace, "q")
            if forward == "integer":
                scores = _int_qk_scores(q_codes, k_all_codes[:, h],
                                        qlayer.sites.q_heads[h],
                                        qlayer.sites.k_heads[h], r2, past)
            else:
                scores = _causal_scores(q_hat, k_hat, past)
            probs = _softmax(scores)
            sp = qlayer.sites.softmax
            p_codes = quantize_array(probs, sp.scale, sp.zero_point, sp.bits)
            p_hat = dequantize_array(p_codes, sp.scale, sp.zero_point)
            if trace is not None:
                trace["softmax"] = trace.get("softmax", 0.0) + float(((probs - p_hat) ** 2).mean())
            if forward == "integer":
                ctx4[:, h] = _int_pv_ctx(p_codes, sp, v_all_codes[:, h],
                                         qlayer.sites.v_heads[h], r3)
            else:
                ctx4[:, h] = p_hat @ v_hat
        else:
            probs = _softmax(_causal_scores(q4[:, h], k_hat, past))
            ctx4[:, h] = probs @ v_hat

    if quant_acts:
        ctx_codes = np.empty(ctx4.shape, dtype=np.int64)
        ctx_deq = np.empty(ctx4.shape, dtype=np.float64)
        for h in range(heads):
            cc, cd = _fake_quant_site(ctx4[:, h], plan.r3_heads[h],
                                      qlayer.sites.ctx_heads[h], trace, "ctx")
            ctx_codes[:, h], ctx_deq[:, h] = cc, cd
        ctx_flat = _merge_heads(ctx_codes)
        ctx_params = tuple(p for head in qlayer.sites.ctx_heads for p in head)
        attn_out = _linear_out(qlayer.out_lin, ctx_flat, _merge_heads(ctx_deq),
                               ctx_params, forward)
    else:
        attn_out = _linear_out(qlayer.out_lin, None, _merge_heads(ctx4),
                               None, forward)

    r1_res = x + attn_out
    h2 = layernorm_forward(qlayer.ln2, r1_res)
    if quant_acts:
        codes_r4, h2_deq = _fake_quant_site(h2, plan.r4, qlayer.sites.r4, trace, "r4")
        hidden = np.maximum(_linear_out(qlayer.fc1, codes_r4, h2_deq,
                                        qlayer.sites.r4, forward), 0.0)
        codes_r5, hid_deq = _fake_quant_site(hidden, plan.r5, qlayer.sites.r5,
                                             trace, "r5")
        y = _linear_out(qlayer.fc2, codes_r5, hid_deq, qlayer.sites.r5, forward)
    else:
        hidden = np.maximum(_linear_out(qlayer.fc1, None, h2, None, forward), 0.0)
        y = _linear_out(qlayer.fc2, None, hidden, None, forward)
    return r1_res + y


def run_model(qmodel: QuantizedModel, x: np.ndarray, forward: str = "dequant",
              cache: KVCache | None = None,
              fp_reference: ToyModel | None = None):
    """Run the quantized stack; optionally report per-layer/site error vs FP.

    Returns (output, cache, report). The report maps layer index to its
    output MSE against the FP trajectory and the mean per-site quantization
    MSE accumulated during the run.
    """
    x = np.asarray(x, dtype=np.float64)
    if cache is None:
        cache = KVCache(len(qmodel.layers))
    fp_traces = None
    if fp_reference is not None:
        _, _, fp_traces = reference_model_forward(fp_reference, x)
    report: dict = {"layers": []}
    cur = x
    for i, qlayer in enumerate(qmodel.layers):
        site_trace: dict = {}
        cur = run_layer(qlayer, cur, cache, i, forward=forward, trace=site_trace)
        entry: dict = {"layer": i, "sites": {k: site_trace[k] for k in sorted(site_trace)}}
        if fp_traces is not None:
            ref = fp_traces[i].out
            entry["output_mse"] = float(((cur - ref) ** 2).mean())
        report["layers"].append(entry)
    return cur, cache, report

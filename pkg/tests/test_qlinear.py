from fractions import Fraction

import numpy as np
import pytest

from rptq.calibration import ChannelStats, collect_stats
from rptq.errors import ValidationError
from rptq.qlinear import (ClusteredQuantLinear, cluster_params_from_stats,
                          dequantize_clusters, dequantize_weights,
                          forward_dequant, forward_integer,
                          load_quant_linear, quantize_activations,
                          quantize_weights_rtn, save_quant_linear)
from rptq.quant import QuantParams, dequantize, minmax_params, quantize
from rptq.reorder import ReorderPlan, identity_plan
from rptq.tensor import IntTensor
from util import random_plan, random_quant_linear, rel_err


def _stats_from(x):
    return collect_stats(ChannelStats.empty(x.shape[-1]), x[None, ...])


def test_single_cluster_equals_per_tensor():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 3, (20, 6))
    stats = _stats_from(x)
    codes, params = quantize_activations(x, identity_plan(6), stats, 4)
    assert len(params) == 1
    ref = minmax_params(float(x.min()), float(x.max()), 4)
    assert params[0] == ref
    assert np.array_equal(codes.data, np.asarray(quantize(x, ref), dtype=np.int32))


def test_two_cluster_scales_from_disjoint_ranges():
    # one cluster spans [-100, 100], the other [80, 100]
    plan = ReorderPlan(perm=np.arange(4), cluster_sizes=np.array([2, 2]),
                       centroids=np.zeros((2, 2)))
    stats = ChannelStats(mins=np.array([-100.0, -50.0, 80.0, 85.0]),
                         maxs=np.array([100.0, 60.0, 100.0, 95.0]),
                         samples_seen=1)
    params = cluster_params_from_stats(stats, plan, 4)
    assert params[0].scale == 12.5
    assert params[1].scale == 1.25


def test_per_channel_when_g_equals_c():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, (10, 3)) * np.array([1.0, 10.0, 100.0])
    stats = _stats_from(x)
    plan = ReorderPlan(perm=np.arange(3), cluster_sizes=np.ones(3, dtype=np.int64),
                       centroids=np.zeros((3, 2)))
    codes, params = quantize_activations(x, plan, stats, 4)
    for c in range(3):
        ref = minmax_params(float(x[:, c].min()), float(x[:, c].max()), 4)
        assert params[c] == ref


def test_activation_error_bounded_by_cluster_scale():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 5, (40, 12))
    stats = _stats_from(x)
    plan = random_plan(12, 3, rng)
    xr = x[..., plan.perm]
    sr = ChannelStats(stats.mins[plan.perm], stats.maxs[plan.perm], 1)
    codes, params = quantize_activations(xr, plan, sr, 4)
    deq = dequantize_clusters(codes.data, plan, list(params))
    for sl, p in zip(plan.cluster_slices(), params):
        assert np.abs(xr[..., sl] - deq[..., sl]).max() <= p.scale * (1 + 1e-9)


def test_stats_plan_mismatch():
    stats = ChannelStats(np.zeros(3), np.ones(3), 1)
    with pytest.raises(ValidationError):
        cluster_params_from_stats(stats, identity_plan(4), 4)


# ---------------------------------------------------------------------------
# RTN weights
# ---------------------------------------------------------------------------

def test_rtn_interior_grid_points_roundtrip_exactly():
    # values on the refit grid and strictly inside the representable window
    # reconstruct exactly; the slice extremes keep the one-step slack
    plan = identity_plan(6)
    anchors = np.array([-4.0, 4.0])
    scale = 8.0 / 2**4  # the refit scale this weight row will produce
    interior = scale * np.array([-6.0, -2.0, 1.0, 5.0])
    w = np.concatenate([anchors, interior])[None, :]
    wq, scales, zeros = quantize_weights_rtn(w, plan, 4)
    assert scales[0, 0] == scale
    w_hat = dequantize_weights(wq.data, plan, scales, zeros)
    assert np.array_equal(w_hat[0, 2:], interior)
    assert np.all(np.abs(w_hat - w) <= scale * (1 + 1e-9))


def test_rtn_single_row_single_cluster_is_per_tensor():
    rng = np.random.default_rng(3)
    w = rng.normal(0, 1, (1, 8))
    wq, scales, zeros = quantize_weights_rtn(w, identity_plan(8), 4)
    ref = minmax_params(float(w.min()), float(w.max()), 4)
    assert scales[0, 0] == ref.scale
    assert zeros[0, 0] == ref.zero_point
    assert np.array_equal(wq.data[0],
                          np.asarray(quantize(w[0], ref), dtype=np.int32))


def test_rtn_error_bound_random():
    rng = np.random.default_rng(4)
    w = rng.normal(0, 1, (4, 8))
    plan = random_plan(8, 2, rng)
    wr = w[:, plan.perm]
    wq, scales, zeros = quantize_weights_rtn(wr, plan, 4)
    w_hat = dequantize_weights(wq.data, plan, scales, zeros)
    for i, sl in enumerate(plan.cluster_slices()):
        err = np.abs(wr[:, sl] - w_hat[:, sl])
        assert np.all(err <= scales[i][:, None] * (1 + 1e-9))


# ---------------------------------------------------------------------------
# Forward paths
# ---------------------------------------------------------------------------

def test_forward_zero_activations_gives_bias():
    rng = np.random.default_rng(5)
    layer, _, _ = random_quant_linear(rng, c1=8, c2=3, g=2, bits=4)
    # codes equal to each cluster's zero point dequantize to exactly zero
    codes = np.empty((5, 8), dtype=np.int64)
    for sl, p in zip(layer.in_plan.cluster_slices(), layer.act_params):
        codes[:, sl] = p.zero_point
    out = forward_dequant(IntTensor(codes, bits=4), layer.act_params, layer)
    assert np.allclose(out.data, layer.bias, atol=1e-6)


def test_16bit_close_to_float_matmul():
    rng = np.random.default_rng(6)
    c1, c2 = 16, 5
    plan = identity_plan(c1)
    w = rng.normal(0, 1, (c2, c1))
    bias = rng.normal(0, 0.1, c2)
    x = rng.normal(0, 1, (30, c1))
    stats = _stats_from(x)
    xq, act_params = quantize_activations(x, plan, stats, 16)
    from rptq.qlinear import build_quant_linear
    layer = build_quant_linear(w, bias, plan, identity_plan(c2), act_params,
                               weight_bits=16, method="rtn")
    out = forward_dequant(xq, act_params, layer)
    ref = x @ w.T + bias
    assert rel_err(out.data, ref) < 1e-3


def test_plain_per_tensor_reference():
    # g=1 with identity plans matches a hand-written per-tensor quantized linear
    rng = np.random.default_rng(7)
    c1, c2 = 8, 4
    w = rng.normal(0, 1, (c2, c1))
    bias = rng.normal(0, 0.1, c2)
    x = rng.normal(0, 2, (12, c1))
    stats = _stats_from(x)
    xq, act_params = quantize_activations(x, identity_plan(c1), stats, 4)
    from rptq.qlinear import build_quant_linear
    layer = build_quant_linear(w, bias, identity_plan(c1), identity_plan(c2),
                               act_params, weight_bits=4, method="rtn")
    out = forward_dequant(xq, act_params, layer).data

    pa = minmax_params(float(x.min()), float(x.max()), 4)
    x_hat = dequantize(quantize(x, pa), pa)
    w_hat = np.empty_like(w)
    for r in range(c2):
        pw = minmax_params(float(w[r].min()), float(w[r].max()), 4)
        w_hat[r] = dequantize(quantize(w[r], pw), pw)
    ref = x_hat @ w_hat.T + bias
    assert rel_err(out, ref) < 1e-6  # float32 output storage rounding


@pytest.mark.parametrize("g", [1, 2, 4, 32])
def test_integer_equals_dequant(g):
    rng = np.random.default_rng(100 + g)
    layer, xq, act_params = random_quant_linear(rng, c1=64, c2=6, g=g, bits=4)
    a = forward_dequant(xq, act_params, layer)
    b = forward_integer(xq, act_params, layer)
    assert rel_err(a.data, b.data) < 1e-5


def test_integer_zero_zero_points_pure_product():
    rng = np.random.default_rng(8)
    c1, c2 = 6, 3
    plan = identity_plan(c1)
    w_codes = rng.integers(-8, 8, (c2, c1))
    x_codes = rng.integers(-8, 8, (4, c1))
    sx, sw = 0.5, 0.25
    layer = ClusteredQuantLinear(
        wq=IntTensor(w_codes, bits=4),
        w_scales=np.full((1, c2), sw), w_zeros=np.zeros((1, c2), dtype=np.int64),
        act_params=(QuantParams(scale=sx, zero_point=0, bits=4),),
        in_plan=plan, out_plan=identity_plan(c2), bias=np.zeros(c2))
    out = forward_integer(IntTensor(x_codes, bits=4), layer.act_params, layer)
    ref = sx * sw * (x_codes @ w_codes.T)
    assert np.array_equal(out.data, ref.astype(np.float32))


def test_integer_1x1x1_hand_expansion():
    # one sample, one input channel, one output channel
    xq, zx, sx = 3, 1, 0.5
    wq, zw, sw = -2, 2, 0.25
    layer = ClusteredQuantLinear(
        wq=IntTensor(np.array([[wq]]), bits=4),
        w_scales=np.array([[sw]]), w_zeros=np.array([[zw]]),
        act_params=(QuantParams(scale=sx, zero_point=zx, bits=4),),
        in_plan=identity_plan(1), out_plan=identity_plan(1), bias=np.zeros(1))
    codes = IntTensor(np.array([[xq]]), bits=4)
    want = sx * sw * (xq * wq - zx * wq - zw * xq + 1 * zx * zw)
    a = forward_dequant(codes, layer.act_params, layer)
    b = forward_integer(codes, layer.act_params, layer)
    assert a.data[0, 0] == pytest.approx(want, rel=1e-12)
    assert b.data[0, 0] == pytest.approx(want, rel=1e-12)


def test_integer_and_dequant_agree_with_rational_oracle():
    # both forward formulas, evaluated in exact rational arithmetic, are the
    # same number; the float paths sit within rounding of it
    rng = np.random.default_rng(9)
    for _ in range(5):
        layer, xq, act_params = random_quant_linear(rng, c1=6, c2=2, g=2,
                                                    bits=3, rows=4)
        x_codes, w_codes = xq.data, layer.wq.data
        rows, c2 = x_codes.shape[0], w_codes.shape[0]
        slices = layer.in_plan.cluster_slices()
        for i_row in range(rows):
            for r in range(c2):
                dequant_sum = Fraction(0)
                integer_sum = Fraction(0)
                for i, sl in enumerate(slices):
                    sx = Fraction(act_params[i].scale)
                    zx = act_params[i].zero_point
                    sw = Fraction(layer.w_scales[i, r])
                    zw = int(layer.w_zeros[i, r])
                    a = [int(v) for v in x_codes[i_row, sl]]
                    b = [int(v) for v in w_codes[r, sl]]
                    n = len(a)
                    dequant_sum += sum(sx * (ai - zx) * sw * (bi - zw)
                                       for ai, bi in zip(a, b))
                    yq = (sum(ai * bi for ai, bi in zip(a, b))
                          - zx * sum(b) - zw * sum(a) + n * zx * zw)
                    integer_sum += sx * sw * yq
                assert dequant_sum == integer_sum  # exact rational identity
                got = forward_integer(xq, act_params, layer).data[i_row, r]
                want = float(integer_sum + Fraction(layer.bias[r]))
                assert got == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_integer_envelope_enforced():
    rng = np.random.default_rng(10)
    layer, xq, act_params = random_quant_linear(rng, c1=8, c2=3, g=2, bits=16)
    with pytest.raises(ValidationError, match="integer forward"):
        forward_integer(xq, act_params, layer)


def test_cluster_structure_validation():
    rng = np.random.default_rng(11)
    layer, xq, act_params = random_quant_linear(rng, c1=8, c2=3, g=2, bits=4)
    with pytest.raises(ValidationError):
        forward_dequant(IntTensor(np.zeros((2, 9), dtype=np.int64), bits=4),
                        act_params, layer)
    with pytest.raises(ValidationError):
        forward_dequant(xq, act_params[:1], layer)


def test_quant_linear_bundle_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    layer, xq, act_params = random_quant_linear(rng, c1=8, c2=3, g=2, bits=4)
    save_quant_linear(layer, tmp_path, "lin")
    back = load_quant_linear(tmp_path, "lin")
    assert np.array_equal(back.wq.data, layer.wq.data)
    assert np.array_equal(back.w_scales, layer.w_scales)
    assert np.array_equal(back.w_zeros, layer.w_zeros)
    assert back.act_params == layer.act_params
    a = forward_dequant(xq, act_params, layer)
    b = forward_dequant(xq, act_params, back)
    assert np.array_equal(a.data, b.data)

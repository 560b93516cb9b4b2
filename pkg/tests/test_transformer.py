import numpy as np
import pytest

from rptq.config import BitConfig, parse_mode
from rptq.errors import ValidationError
from rptq.fusion import check_alignment
from rptq.transformer import (ClusterCounts, KVCache, ToyDims,
                              build_toy_model, calibrate_model,
                              fused_layer_forward, plan_layer, quantize_model,
                              reference_layer_forward, reference_model_forward,
                              run_model, validate_forward_mode)
from util import rel_err

DIMS = ToyDims(layers=2, hidden=64, heads=4, ffn=128)


@pytest.fixture(scope="module")
def small_setup():
    model = build_toy_model(0, DIMS)
    rng = np.random.default_rng(1)
    channel_scale = np.exp(rng.normal(0, 1, 64))
    calib = rng.normal(0, 1, (6, 12, 64)) * channel_scale
    # causal attention makes a (sequence, token) prefix of the calibration
    # batch reproduce its calibration-time intermediates exactly, so this
    # evaluation set is guaranteed to stay within the calibrated ranges
    evald = calib[:2, :8]
    stats = calibrate_model(model, [calib])
    counts = ClusterCounts(r1=8, r2=2, r3=2, r4=8, r5=8)
    plans = [plan_layer(s, counts, seed=0) for s in stats]
    return model, calib, evald, stats, plans


def test_mode_parsing():
    cfg = parse_mode("W4A4")
    assert (cfg.weight_bits, cfg.activation_bits, cfg.kv_bits, cfg.kv_only) == (4, 4, 4, False)
    cfg = parse_mode("W4A3KV")
    assert (cfg.weight_bits, cfg.activation_bits, cfg.kv_bits, cfg.kv_only) == (4, 16, 3, True)
    assert cfg.mode == "W4A3KV"
    assert parse_mode("W16A16").mode == "W16A16"
    with pytest.raises(ValidationError):
        parse_mode("A4W4")
    with pytest.raises(ValidationError):
        parse_mode("W1A4")


def test_ln_softmax_floor():
    assert parse_mode("W4A4").ln_bits == 8
    assert parse_mode("W4A8").ln_bits == 8
    assert parse_mode("W4A16").ln_bits == 16


def test_build_deterministic_and_dims():
    a = build_toy_model(7, DIMS)
    b = build_toy_model(7, DIMS)
    for la, lb in zip(a.layers, b.layers):
        assert la.wq.tobytes() == lb.wq.tobytes()
        assert la.gamma1.tobytes() == lb.gamma1.tobytes()
    assert ToyDims(layers=1, hidden=64, heads=4, ffn=256).head_dim == 16
    with pytest.raises(ValidationError, match="not divisible"):
        ToyDims(layers=1, hidden=65, heads=4, ffn=256)


def test_plan_layer_alignment_and_counts(small_setup):
    model, _, _, stats, plans = small_setup
    for plan in plans:
        assert check_alignment(plan.wiring()) == []
        assert plan.r1.g == 8
        assert all(p.g == 2 for p in plan.r2_heads)
    with pytest.raises(ValidationError):
        plan_layer(stats[0], ClusterCounts(r1=65, r2=2, r3=2, r4=8, r5=8), seed=0)


def test_all_counts_one_degenerates_to_per_tensor(small_setup):
    model, calib, _, stats, _ = small_setup
    counts = ClusterCounts(r1=1, r2=1, r3=1, r4=1, r5=1)
    plans = [plan_layer(s, counts, seed=0) for s in stats]
    for plan in plans:
        assert plan.r1.g == 1
        assert all(p.g == 1 for p in plan.r2_heads)
    cfg = parse_mode("W4A4")
    qm = quantize_model(build_toy_model(0, DIMS), stats, plans, cfg,
                        weight_method="rtn")
    for ql in qm.layers:
        assert len(ql.sites.r1) == 1


def test_fused_equals_unfused(small_setup):
    model, _, _, stats, plans = small_setup
    rng = np.random.default_rng(2)
    for seed in range(5):
        x = rng.normal(0, 1, (2, 10, 64))
        for i, p in enumerate(model.layers):
            ref, _, _ = reference_layer_forward(p, x, DIMS.heads)
            fused, _ = fused_layer_forward(p, plans[i], x, DIMS.heads)
            assert rel_err(fused, ref) < 1e-5


def test_incremental_matches_prefill_fp():
    model = build_toy_model(3, DIMS)
    rng = np.random.default_rng(4)
    x = rng.normal(0, 1, (2, 12, 64))
    full, _, _ = reference_model_forward(model, x)
    # two-step: prefill 7 tokens, then decode 5 more with the cache
    y1, past, _ = reference_model_forward(model, x[:, :7])
    y2, _, _ = reference_model_forward(model, x[:, 7:], past=past)
    assert rel_err(np.concatenate([y1, y2], axis=1), full) < 1e-5


def test_single_token_steps_match_prefill():
    model = build_toy_model(5, ToyDims(layers=1, hidden=32, heads=2, ffn=64))
    rng = np.random.default_rng(5)
    x = rng.normal(0, 1, (1, 2, 32))
    full, _, _ = reference_model_forward(model, x)
    y1, past, _ = reference_model_forward(model, x[:, :1])
    y2, _, _ = reference_model_forward(model, x[:, 1:2], past=past)
    assert rel_err(np.concatenate([y1, y2], axis=1), full) < 1e-5


def test_quantized_cache_consistency(small_setup):
    model, _, _, stats, plans = small_setup
    cfg = parse_mode("W4A8")
    qm = quantize_model(model, stats, plans, cfg, weight_method="rtn")
    rng = np.random.default_rng(6)
    x = rng.normal(0, 1, (2, 8, 64))
    full, _, _ = run_model(qm, x)
    y1, cache, _ = run_model(qm, x[:, :3])
    y2, cache, _ = run_model(qm, x[:, 3:], cache=cache)
    assert rel_err(np.concatenate([y1, y2], axis=1), full) < 1e-9
    assert cache.tokens(0) == 8


def test_kv_only_mode_quantizes_only_cache(small_setup):
    model, _, _, stats, plans = small_setup
    cfg = parse_mode("W4A4KV")
    qm = quantize_model(model, stats, plans, cfg, weight_method="rtn")
    x = np.random.default_rng(7).normal(0, 1, (2, 8, 64))
    _, cache, report = run_model(qm, x, fp_reference=model)
    for entry in report["layers"]:
        assert set(entry["sites"]) == {"k", "v"}
    k_codes, v_codes = cache.get(0)
    assert k_codes.dtype == np.int64 and v_codes.dtype == np.int64


def test_w16a16_is_nearly_lossless(small_setup):
    model, _, evald, stats, plans = small_setup
    cfg = parse_mode("W16A16")
    qm = quantize_model(model, stats, plans, cfg, weight_method="rtn")
    out, _, _ = run_model(qm, evald)
    ref, _, _ = reference_model_forward(model, evald)
    assert rel_err(out, ref) < 1e-3


def test_integer_forward_validation():
    validate_forward_mode(parse_mode("W4A4"), "integer")
    with pytest.raises(ValidationError):
        validate_forward_mode(parse_mode("W4A4KV"), "integer")
    with pytest.raises(ValidationError):
        validate_forward_mode(parse_mode("W4A16"), "integer")
    with pytest.raises(ValidationError):
        validate_forward_mode(parse_mode("W4A4"), "nonsense")


def test_integer_forward_matches_dequant_full_layer(small_setup):
    model, _, _, stats, plans = small_setup
    cfg = parse_mode("W4A4")
    qm = quantize_model(model, stats, plans, cfg, weight_method="rtn")
    x = np.random.default_rng(9).normal(0, 1, (2, 8, 64))
    a, _, _ = run_model(qm, x, forward="dequant")
    b, _, _ = run_model(qm, x, forward="integer")
    assert rel_err(a, b) < 1e-5


def test_gptq_weights_full_pipeline(small_setup):
    model, calib, _, stats, plans = small_setup
    cfg = parse_mode("W4A4")
    qm_rtn = quantize_model(model, stats, plans, cfg, weight_method="rtn")
    qm_gptq = quantize_model(model, stats, plans, cfg, weight_method="gptq",
                             calib_batches=[calib])
    x = np.random.default_rng(10).normal(0, 1, (2, 8, 64))
    _, _, rep_rtn = run_model(qm_rtn, x, fp_reference=model)
    _, _, rep_gptq = run_model(qm_gptq, x, fp_reference=model)
    assert rep_gptq["layers"][-1]["output_mse"] > 0
    # both produce finite, comparable errors; gptq is usually at least as good
    assert rep_gptq["layers"][-1]["output_mse"] < 5 * rep_rtn["layers"][-1]["output_mse"]


def test_cache_validation():
    cache = KVCache(1)
    with pytest.raises(ValidationError):
        cache.get(0)
    cache.append(0, np.zeros((1, 2, 3, 4), dtype=np.int64),
                 np.zeros((1, 2, 3, 4), dtype=np.int64))
    assert cache.tokens(0) == 3
    with pytest.raises(ValidationError):
        cache.append(0, np.zeros((2, 2, 1, 4), dtype=np.int64),
                     np.zeros((2, 2, 1, 4), dtype=np.int64))


def test_calibration_requires_samples():
    model = build_toy_model(0, ToyDims(layers=1, hidden=32, heads=2, ffn=64))
    with pytest.raises(ValidationError, match="zero calibration samples"):
        calibrate_model(model, [])

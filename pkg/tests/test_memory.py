import csv
from pathlib import Path

import numpy as np
import pytest

from rptq.config import parse_mode
from rptq.errors import ValidationError
from rptq.memory import (ModelShape, estimate, load_shapes, sweep,
                         sweep_csv_lines)

GOLDEN = Path(__file__).parent / "data" / "table3_golden.csv"
SHAPES = {s.name: s for s in load_shapes()}
ALL_MODES = ["W16A16", "W4A16", "W4A8", "W4A4", "W4A4KV", "W4A3KV", "W3A3KV"]


def _total_gib(model, mode, batch, seqlen):
    est = estimate(SHAPES[model], parse_mode(mode), batch, seqlen)
    return est.in_unit("gib")[3]


def test_flagship_cells():
    assert _total_gib("OPT-30b", "W16A16", 1, 2048) == pytest.approx(59.4, rel=0.10)
    assert _total_gib("OPT-175b", "W16A16", 1, 2048) == pytest.approx(335.4, rel=0.10)
    assert _total_gib("OPT-175b", "W3A3KV", 64, 8192) == pytest.approx(593.7, rel=0.10)


def test_golden_table_reproduction():
    rows = list(csv.DictReader(GOLDEN.open()))
    assert len(rows) == 189  # three models x 63 cells each
    per_model = {}
    for r in rows:
        got = _total_gib(r["model"], r["mode"], int(r["batch"]), int(r["seqlen"]))
        rel = abs(got - float(r["total_gb"])) / float(r["total_gb"])
        per_model.setdefault(r["model"], []).append(rel <= 0.10)
    for model, oks in per_model.items():
        assert len(oks) == 63
        assert sum(oks) / len(oks) >= 0.80, f"{model} below 80% within 10%"


def test_kv_fraction_appendix_cell():
    est = estimate(SHAPES["OPT-175b"], parse_mode("W4A16"), 64, 8192)
    kv_frac = est.proportions[1]
    assert abs(kv_frac * 100 - 91.95) <= 5.0


def test_kv_dominates_at_scale():
    for mode in ALL_MODES:
        cfg = parse_mode(mode)
        small = estimate(SHAPES["OPT-175b"], cfg, 1, 2048).proportions[1]
        large = estimate(SHAPES["OPT-175b"], cfg, 64, 8192).proportions[1]
        assert large > small
    big = estimate(SHAPES["OPT-175b"], parse_mode("W4A16"), 64, 8192)
    assert big.proportions[1] > 0.80


def test_kv_bytes_halve_with_kv_bits():
    a = estimate(SHAPES["OPT-30b"], parse_mode("W4A8"), 8, 2048)
    b = estimate(SHAPES["OPT-30b"], parse_mode("W4A4"), 8, 2048)
    assert b.kv_bytes == pytest.approx(a.kv_bytes / 2, rel=1e-12)


def test_weight_bytes_ratio_exact():
    for b in (1, 8, 64):
        for s in (2048, 8192):
            w4 = estimate(SHAPES["OPT-66b"], parse_mode("W4A16"), b, s)
            w16 = estimate(SHAPES["OPT-66b"], parse_mode("W16A16"), b, s)
            assert w4.weight_bytes / w16.weight_bytes == 0.25


def test_total_monotone_in_batch_seq_and_bits():
    shape = SHAPES["OPT-30b"]
    cfg = parse_mode("W4A8")
    t = [estimate(shape, cfg, b, 2048).total_bytes for b in (1, 2, 8, 64)]
    assert all(x < y for x, y in zip(t, t[1:]))
    t = [estimate(shape, cfg, 1, s).total_bytes for s in (512, 2048, 8192)]
    assert all(x < y for x, y in zip(t, t[1:]))
    modes = ["W3A3KV", "W4A3KV", "W4A4KV"]
    t = [estimate(shape, parse_mode(m), 8, 2048).total_bytes for m in modes]
    assert all(x < y for x, y in zip(t, t[1:]))


def test_kv_linearity():
    shape = SHAPES["OPT-13b"]
    cfg = parse_mode("W4A8")
    base = estimate(shape, cfg, 1, 1024).kv_bytes
    assert estimate(shape, cfg, 4, 1024).kv_bytes == pytest.approx(4 * base)
    assert estimate(shape, cfg, 1, 4096).kv_bytes == pytest.approx(4 * base)
    assert base == 2 * shape.layers * 1024 * shape.hidden * cfg.kv_bits / 8


def test_proportions_sum_to_one():
    est = estimate(SHAPES["OPT-6.7b"], parse_mode("W4A4"), 8, 4096)
    assert sum(est.proportions) == pytest.approx(1.0, abs=1e-9)


def test_sweep_singleton_matches_estimate():
    rows = sweep([SHAPES["OPT-30b"]], [parse_mode("W16A16")], [1], [2048])
    assert len(rows) == 1
    assert rows[0]["total_gb"] == pytest.approx(_total_gib("OPT-30b", "W16A16", 1, 2048))
    lines = sweep_csv_lines(rows)
    assert lines[0].startswith("model,mode,batch,seqlen")
    assert len(lines) == 2


def test_sweep_validation():
    with pytest.raises(ValidationError):
        sweep([], [parse_mode("W4A4")], [1], [2048])


def test_unit_flag():
    est = estimate(SHAPES["OPT-30b"], parse_mode("W16A16"), 1, 2048)
    gib = est.in_unit("gib")[3]
    gb = est.in_unit("gb")[3]
    assert gb / gib == pytest.approx(2**30 / 10**9, rel=1e-12)
    with pytest.raises(ValidationError):
        est.in_unit("mib")


def test_shape_validation():
    with pytest.raises(ValidationError):
        ModelShape(name="x", param_count=0, layers=1, hidden=8, heads=2,
                   ffn=32, max_positions=10)
    with pytest.raises(ValidationError):
        ModelShape(name="x", param_count=10, layers=1, hidden=9, heads=2,
                   ffn=32, max_positions=10)


def test_shapes_file_roundtrip(tmp_path):
    path = tmp_path / "shapes.json"
    path.write_text('[{"name": "tiny", "param_count": 1000, "layers": 2, '
                    '"hidden": 8, "heads": 2, "ffn": 32, "max_positions": 16}]')
    shapes = load_shapes(path)
    assert shapes[0].name == "tiny"
    assert shapes[0].param_count == 1000

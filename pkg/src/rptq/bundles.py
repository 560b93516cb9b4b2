"""Directory layouts for the pipeline stages.

Every stage reads and writes plain files so any step can be rerun in
isolation: a model bundle (config.json + weight tensors), a stats directory
(one JSON per activation site per layer), a plans directory, and a quantized
bundle (manifest + weight codes + parameter JSONs per linear).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .calibration import (load_qk_stats, load_stats, save_qk_stats,
                          save_stats)
from .config import BitConfig, parse_mode
from .errors import ValidationError
from .fusion import LayerNormOp
from .qlinear import load_quant_linear, save_quant_linear
from .quant import QuantParams
from .reorder import load_plan, save_plan
from .tensor import Tensor, load_tensor, save_tensor
from .testkit import ChannelProfile, profile_from_dict, profile_to_dict
from .transformer import (ClusterCounts, DecoderLayerPlan, LayerParams,
                          LayerStats, QuantizedLayer, QuantizedModel,
                          SiteParams, ToyDims, ToyModel)

_WEIGHT_FIELDS = ["gamma1", "beta1", "wq", "bq", "wk", "bk", "wv", "bv",
                  "wo", "bo", "gamma2", "beta2", "w1", "b1", "w2", "b2"]


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def _read_json(path: Path):
    if not path.exists():
        raise ValidationError(f"missing file {path}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------

def save_toy_model(model: ToyModel, directory: str | Path,
                   profile: ChannelProfile | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "dims": {"layers": model.dims.layers, "hidden": model.dims.hidden,
                 "heads": model.dims.heads, "ffn": model.dims.ffn},
        "seed": model.seed,
    }
    if profile is not None:
        doc["profile"] = profile_to_dict(profile)
    _write_json(directory / "config.json", doc)
    for i, layer in enumerate(model.layers):
        ldir = directory / "weights" / f"layer{i:02d}"
        ldir.mkdir(parents=True, exist_ok=True)
        for name in _WEIGHT_FIELDS:
            save_tensor(Tensor(getattr(layer, name)), ldir / f"{name}.bin")


def load_toy_model(directory: str | Path) -> tuple[ToyModel, ChannelProfile | None]:
    directory = Path(directory)
    doc = _read_json(directory / "config.json")
    dims = ToyDims(**doc["dims"])
    layers = []
    for i in range(dims.layers):
        ldir = directory / "weights" / f"layer{i:02d}"
        fields = {}
        for name in _WEIGHT_FIELDS:
            t = load_tensor(ldir / f"{name}.bin")
            fields[name] = t.data
        layers.append(LayerParams(**fields))
    profile = None
    if "profile" in doc:
        profile = profile_from_dict(doc["profile"])
    return ToyModel(dims=dims, seed=int(doc["seed"]), layers=tuple(layers)), profile


# ---------------------------------------------------------------------------
# Stats directory
# ---------------------------------------------------------------------------

def save_layer_stats(stats: list[LayerStats], directory: str | Path) -> None:
    directory = Path(directory)
    for i, ls in enumerate(stats):
        ldir = directory / f"layer{i:02d}"
        ldir.mkdir(parents=True, exist_ok=True)
        save_stats(ls.r1, ldir / "r1.json")
        save_qk_stats(ls.qk, ldir / "qk.json")
        for h, s in enumerate(ls.v_heads):
            save_stats(s, ldir / f"v_h{h}.json")
        for h, s in enumerate(ls.ctx_heads):
            save_stats(s, ldir / f"ctx_h{h}.json")
        save_stats(ls.r4, ldir / "r4.json")
        save_stats(ls.r5, ldir / "r5.json")


def load_layer_stats(directory: str | Path, layers: int,
                     heads: int) -> list[LayerStats]:
    directory = Path(directory)
    out = []
    for i in range(layers):
        ldir = directory / f"layer{i:02d}"
        if not ldir.exists():
            raise ValidationError(f"missing stats for layer {i} under {directory}")
        out.append(LayerStats(
            r1=load_stats(ldir / "r1.json"),
            qk=load_qk_stats(ldir / "qk.json"),
            v_heads=tuple(load_stats(ldir / f"v_h{h}.json") for h in range(heads)),
            ctx_heads=tuple(load_stats(ldir / f"ctx_h{h}.json") for h in range(heads)),
            r4=load_stats(ldir / "r4.json"),
            r5=load_stats(ldir / "r5.json"),
        ))
    return out


# ---------------------------------------------------------------------------
# Plans directory
# ---------------------------------------------------------------------------

def save_layer_plans(plans: list[DecoderLayerPlan], directory: str | Path) -> None:
    directory = Path(directory)
    for i, plan in enumerate(plans):
        ldir = directory / f"layer{i:02d}"
        ldir.mkdir(parents=True, exist_ok=True)
        save_plan(plan.r1, ldir / "r1.json")
        for h, p in enumerate(plan.r2_heads):
            save_plan(p, ldir / f"r2_h{h}.json")
        for h, p in enumerate(plan.r3_heads):
            save_plan(p, ldir / f"r3_h{h}.json")
        save_plan(plan.r4, ldir / "r4.json")
        save_plan(plan.r5, ldir / "r5.json")
        _write_json(ldir / "counts.json", {
            "r1": plan.counts.r1, "r2": plan.counts.r2, "r3": plan.counts.r3,
            "r4": plan.counts.r4, "r5": plan.counts.r5,
        })


def load_layer_plans(directory: str | Path, layers: int,
                     heads: int) -> list[DecoderLayerPlan]:
    directory = Path(directory)
    out = []
    for i in range(layers):
        ldir = directory / f"layer{i:02d}"
        if not ldir.exists():
            raise ValidationError(f"missing plans for layer {i} under {directory}")
        counts = ClusterCounts(**_read_json(ldir / "counts.json"))
        out.append(DecoderLayerPlan(
            r1=load_plan(ldir / "r1.json"),
            r2_heads=tuple(load_plan(ldir / f"r2_h{h}.json") for h in range(heads)),
            r3_heads=tuple(load_plan(ldir / f"r3_h{h}.json") for h in range(heads)),
            r4=load_plan(ldir / "r4.json"),
            r5=load_plan(ldir / "r5.json"),
            counts=counts,
        ))
    return out


# ---------------------------------------------------------------------------
# Quantized bundle
# ---------------------------------------------------------------------------

def _params_doc(params) -> list[dict]:
    return [{"scale": p.scale, "zero_point": p.zero_point, "bits": p.bits}
            for p in params]


def _params_from(doc) -> tuple:
    return tuple(QuantParams(scale=p["scale"], zero_point=p["zero_point"],
                             bits=p["bits"]) for p in doc)


def save_quantized_model(qmodel: QuantizedModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_json(directory / "config.json", {
        "dims": {"layers": qmodel.dims.layers, "hidden": qmodel.dims.hidden,
                 "heads": qmodel.dims.heads, "ffn": qmodel.dims.ffn},
        "mode": qmodel.cfg.mode,
        "weight_method": qmodel.weight_method,
    })
    for i, ql in enumerate(qmodel.layers):
        ldir = directory / f"layer{i:02d}"
        ldir.mkdir(parents=True, exist_ok=True)
        save_layer_plans([ql.plan], ldir / "plans")
        _write_json(ldir / "layernorm.json", {
            "gamma1": ql.ln1.gamma.tolist(), "beta1": ql.ln1.beta.tolist(),
            "gamma2": ql.ln2.gamma.tolist(), "beta2": ql.ln2.beta.tolist(),
            "eps": ql.ln1.eps,
        })
        for name in ("q_lin", "k_lin", "v_lin", "out_lin", "fc1", "fc2"):
            save_quant_linear(getattr(ql, name), ldir, name)
        _write_json(ldir / "site_params.json", {
            "r1": _params_doc(ql.sites.r1),
            "q_heads": [_params_doc(h) for h in ql.sites.q_heads],
            "k_heads": [_params_doc(h) for h in ql.sites.k_heads],
            "v_heads": [_params_doc(h) for h in ql.sites.v_heads],
            "ctx_heads": [_params_doc(h) for h in ql.sites.ctx_heads],
            "softmax": _params_doc([ql.sites.softmax]),
            "r4": _params_doc(ql.sites.r4),
            "r5": _params_doc(ql.sites.r5),
        })


def load_quantized_model(directory: str | Path) -> QuantizedModel:
    directory = Path(directory)
    doc = _read_json(directory / "config.json")
    dims = ToyDims(**doc["dims"])
    cfg = parse_mode(doc["mode"])
    layers = []
    for i in range(dims.layers):
        ldir = directory / f"layer{i:02d}"
        plan = load_layer_plans(ldir / "plans", 1, dims.heads)[0]
        ln = _read_json(ldir / "layernorm.json")
        sp = _read_json(ldir / "site_params.json")
        sites = SiteParams(
            r1=_params_from(sp["r1"]),
            q_heads=tuple(_params_from(h) for h in sp["q_heads"]),
            k_heads=tuple(_params_from(h) for h in sp["k_heads"]),
            v_heads=tuple(_params_from(h) for h in sp["v_heads"]),
            ctx_heads=tuple(_params_from(h) for h in sp["ctx_heads"]),
            softmax=_params_from(sp["softmax"])[0],
            r4=_params_from(sp["r4"]),
            r5=_params_from(sp["r5"]),
        )
        layers.append(QuantizedLayer(
            plan=plan, cfg=cfg,
            ln1=LayerNormOp(np.asarray(ln["gamma1"]), np.asarray(ln["beta1"]),
                            eps=ln["eps"], out_plan=plan.r1),
            ln2=LayerNormOp(np.asarray(ln["gamma2"]), np.asarray(ln["beta2"]),
                            eps=ln["eps"], out_plan=plan.r4),
            q_lin=load_quant_linear(ldir, "q_lin"),
            k_lin=load_quant_linear(ldir, "k_lin"),
            v_lin=load_quant_linear(ldir, "v_lin"),
            out_lin=load_quant_linear(ldir, "out_lin"),
            fc1=load_quant_linear(ldir, "fc1"),
            fc2=load_quant_linear(ldir, "fc2"),
            sites=sites, heads=dims.heads,
        ))
    return QuantizedModel(dims=dims, cfg=cfg, layers=tuple(layers),
                          weight_method=doc["weight_method"])

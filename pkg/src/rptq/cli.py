"""Command-line pipeline: init-model -> calibrate -> plan -> quantize -> run,
plus the ablation sweep, the memory estimator and stats dumps.

Every stage reads and writes files only, so stages are rerunnable in
isolation and byte-identical under identical inputs and seeds. Exit codes:
0 success, 1 validation error, 2 runtime error; errors go to stderr as JSON.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import click
import numpy as np

from . import bundles, memory
from .config import parse_mode
from .errors import ValidationError
from .testkit import ChannelProfile, gen_activations, load_profile
from .transformer import (ClusterCounts, ToyDims, build_toy_model,
                          calibrate_model, plan_layer, quantize_model,
                          run_model)

DEFAULT_CLUSTERS = (32, 4, 4, 32, 32)
ABLATE_SWEEP = (1, 2, 4, 8, 32)
_EVAL_SEED_OFFSET = 999983
_SITE_TRACE_KEYS = {"r1": ("r1",), "r2": ("q", "k"), "r3": ("v", "ctx"),
                    "r4": ("r4",), "r5": ("r5",)}


@dataclass(frozen=True)
class RunConfig:
    bundle: str = "bundle"
    out: str = "out"
    mode: str = "W4A4"
    clusters: tuple[int, int, int, int, int] = DEFAULT_CLUSTERS
    calib_samples: int = 256
    calib_tokens: int = 32
    eval_samples: int = 8
    eval_tokens: int = 32
    seed: int = 0
    weights: str = "gptq"
    forward: str = "dequant"
    damp: float = 0.01

    def counts(self) -> ClusterCounts:
        r1, r2, r3, r4, r5 = self.clusters
        return ClusterCounts(r1=r1, r2=r2, r3=r3, r4=r4, r5=r5)


def _load_config(path: str | None, **overrides) -> RunConfig:
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file {path} does not exist")
        doc = json.loads(p.read_text())
    if "clusters" in doc:
        doc["clusters"] = tuple(int(c) for c in doc["clusters"])
    cfg = RunConfig(**doc)
    clean = {k: v for k, v in overrides.items() if v is not None}
    if "clusters" in clean:
        clean["clusters"] = _parse_clusters(clean["clusters"])
    return replace(cfg, **clean)


def _parse_clusters(text: str) -> tuple[int, ...]:
    parts = [p for p in text.split(",") if p]
    if len(parts) != 5:
        raise ValidationError("--clusters takes five values: r1,r2,r3,r4,r5")
    return tuple(int(p) for p in parts)


def _config_options(f):
    f = click.option("--config", "config_path", type=str, default=None,
                     help="JSON config file mirroring RunConfig.")(f)
    f = click.option("--seed", type=int, default=None)(f)
    f = click.option("--out", type=str, default=None)(f)
    f = click.option("--mode", type=str, default=None,
                     help="Bit configuration, e.g. W4A4, W4A8, W4A3KV.")(f)
    f = click.option("--clusters", type=str, default=None,
                     help="Cluster counts r1,r2,r3,r4,r5.")(f)
    f = click.option("--weights", type=click.Choice(["rtn", "gptq"]),
                     default=None)(f)
    f = click.option("--forward", type=click.Choice(["dequant", "integer"]),
                     default=None)(f)
    return f


def _bundle_model(cfg: RunConfig):
    bundle = Path(cfg.bundle)
    if not bundle.exists():
        raise ValidationError(f"missing bundle {bundle}; run init-model first")
    model, profile = bundles.load_toy_model(bundle)
    if profile is None:
        raise ValidationError(f"bundle {bundle} has no calibration profile")
    return model, profile


def _calib_batches(profile: ChannelProfile, samples: int, tokens: int, seed: int,
                   chunk: int = 64):
    if samples < 1:
        raise ValidationError("zero samples requested")
    batches = []
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        batches.append(gen_activations(profile, n, tokens, seed + done))
        done += n
    return batches


@click.group()
def cli() -> None:
    """Reorder-based post-training quantization toolkit."""


@cli.command("init-model")
@click.option("--out", type=str, default="bundle")
@click.option("--seed", type=int, default=0)
@click.option("--dims", type=str, default="2,128,4,512",
              help="layers,hidden,heads,ffn")
@click.option("--profile", "profile_path", type=str, default=None,
              help="Channel profile JSON; default is the outlier-heavy profile.")
def cmd_init_model(out, seed, dims, profile_path):
    """Create a deterministic toy model bundle."""
    parts = [int(p) for p in dims.split(",")]
    if len(parts) != 4:
        raise ValidationError("--dims takes layers,hidden,heads,ffn")
    d = ToyDims(layers=parts[0], hidden=parts[1], heads=parts[2], ffn=parts[3])
    if profile_path is not None:
        profile = load_profile(profile_path)
        if profile.channels != d.hidden:
            raise ValidationError("profile channel count must equal hidden size")
    else:
        profile = ChannelProfile(channels=d.hidden, outlier_fraction=0.03,
                                 outlier_multiplier=200.0, offset_spread=2.0,
                                 base_scale=1.0, seed=seed)
    model = build_toy_model(seed, d)
    bundles.save_toy_model(model, out, profile)
    click.echo(f"wrote model bundle to {out}")


@cli.command("calibrate")
@_config_options
def cmd_calibrate(config_path, **overrides):
    """Collect per-site channel statistics over synthetic calibration data."""
    cfg = _load_config(config_path, **overrides)
    model, profile = _bundle_model(cfg)
    batches = _calib_batches(profile, cfg.calib_samples, cfg.calib_tokens, cfg.seed)
    stats = calibrate_model(model, batches)
    out = Path(cfg.out)
    bundles.save_layer_stats(stats, out / "stats")
    (out / "calib_meta.json").write_text(json.dumps({
        "samples": cfg.calib_samples, "tokens": cfg.calib_tokens,
        "seed": cfg.seed}, sort_keys=True, indent=1))
    click.echo(f"wrote stats for {len(stats)} layers to {out / 'stats'}")


@cli.command("plan")
@_config_options
def cmd_plan(config_path, **overrides):
    """Cluster channel ranges and build the reorder plans."""
    cfg = _load_config(config_path, **overrides)
    model, _ = _bundle_model(cfg)
    out = Path(cfg.out)
    stats = bundles.load_layer_stats(out / "stats", model.dims.layers,
                                     model.dims.heads)
    plans = [plan_layer(s, cfg.counts(), cfg.seed) for s in stats]
    bundles.save_layer_plans(plans, out / "plans")
    click.echo(f"wrote plans to {out / 'plans'}")


@cli.command("quantize")
@_config_options
def cmd_quantize(config_path, **overrides):
    """Fuse reorders into weights and quantize weights and parameters."""
    cfg = _load_config(config_path, **overrides)
    model, profile = _bundle_model(cfg)
    out = Path(cfg.out)
    stats = bundles.load_layer_stats(out / "stats", model.dims.layers,
                                     model.dims.heads)
    plans = bundles.load_layer_plans(out / "plans", model.dims.layers,
                                     model.dims.heads)
    bitcfg = parse_mode(cfg.mode)
    calib = None
    if cfg.weights == "gptq":
        meta_path = out / "calib_meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {
            "samples": cfg.calib_samples, "tokens": cfg.calib_tokens,
            "seed": cfg.seed}
        calib = _calib_batches(profile, meta["samples"], meta["tokens"],
                               meta["seed"])
    qmodel = quantize_model(model, stats, plans, bitcfg,
                            weight_method=cfg.weights, damp=cfg.damp,
                            calib_batches=calib)
    bundles.save_quantized_model(qmodel, out / "quant")
    click.echo(f"wrote quantized bundle to {out / 'quant'}")


def _evaluate(cfg: RunConfig, qmodel, model, profile):
    data = gen_activations(profile, cfg.eval_samples, cfg.eval_tokens,
                           cfg.seed + _EVAL_SEED_OFFSET)
    _, _, report = run_model(qmodel, data.data, forward=cfg.forward,
                             fp_reference=model)
    return report


@cli.command("run")
@_config_options
def cmd_run(config_path, **overrides):
    """Run the quantized model and report MSE against the FP reference."""
    cfg = _load_config(config_path, **overrides)
    model, profile = _bundle_model(cfg)
    out = Path(cfg.out)
    qdir = out / "quant"
    if not qdir.exists():
        raise ValidationError(f"missing quantized bundle {qdir}; run quantize first")
    qmodel = bundles.load_quantized_model(qdir)
    report = _evaluate(cfg, qmodel, model, profile)
    report["mode"] = qmodel.cfg.mode
    report["forward"] = cfg.forward
    report["weights"] = qmodel.weight_method
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    for entry in report["layers"]:
        sites = " ".join(f"{k}={v:.3e}" for k, v in entry["sites"].items())
        click.echo(f"layer {entry['layer']}: output_mse={entry['output_mse']:.3e} {sites}")
    click.echo(f"wrote report to {out / 'report.json'}")


@cli.command("ablate")
@_config_options
@click.option("--sweep", type=str, default="1,2,4,8,32",
              help="Cluster counts to sweep per reorder site.")
def cmd_ablate(config_path, sweep, **overrides):
    """Vary the cluster count of one site at a time; emit an MSE table."""
    cfg = _load_config(config_path, **overrides)
    model, profile = _bundle_model(cfg)
    out = Path(cfg.out)
    stats = bundles.load_layer_stats(out / "stats", model.dims.layers,
                                     model.dims.heads)
    sweep_values = [int(s) for s in sweep.split(",") if s]
    if not sweep_values:
        raise ValidationError("empty sweep")
    bitcfg = parse_mode(cfg.mode)
    calib = None
    if cfg.weights == "gptq":
        calib = _calib_batches(profile, cfg.calib_samples, cfg.calib_tokens,
                               cfg.seed)
    lines = ["site,clusters,site_mse,output_mse"]
    base = cfg.counts()
    for site in ("r1", "r2", "r3", "r4", "r5"):
        for g in sweep_values:
            counts = replace(base, **{site: g})
            plans = [plan_layer(s, counts, cfg.seed) for s in stats]
            qmodel = quantize_model(model, stats, plans, bitcfg,
                                    weight_method=cfg.weights, damp=cfg.damp,
                                    calib_batches=calib)
            report = _evaluate(cfg, qmodel, model, profile)
            keys = _SITE_TRACE_KEYS[site]
            site_mses = [entry["sites"][k] for entry in report["layers"]
                         for k in keys if k in entry["sites"]]
            site_mse = float(np.mean(site_mses)) if site_mses else float("nan")
            output_mse = report["layers"][-1]["output_mse"]
            lines.append(f"{site},{g},{site_mse:.9e},{output_mse:.9e}")
    (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    click.echo(f"wrote {out / 'ablate.csv'}")


@cli.command("memest")
@click.option("--shapes", "shapes_path", type=str, default=None,
              help="Model shapes JSON; defaults to the bundled OPT family.")
@click.option("--modes", type=str,
              default="W16A16,W4A16,W4A8,W4A4,W4A4KV,W4A3KV,W3A3KV")
@click.option("--batches", type=str, default="1,8,64")
@click.option("--seqlens", type=str, default="2048,4096,8192")
@click.option("--unit", type=click.Choice(["gib", "gb"]), default="gib")
@click.option("--proportions", is_flag=True, default=False,
              help="Emit only the per-part fraction columns.")
@click.option("--out", type=str, default="memest.csv")
def cmd_memest(shapes_path, modes, batches, seqlens, unit, proportions, out):
    """Memory sweep over (model, mode, batch, seqlen) cells."""
    shapes = memory.load_shapes(shapes_path)
    cfgs = [parse_mode(m) for m in modes.split(",") if m]
    b_list = [int(b) for b in batches.split(",") if b]
    s_list = [int(s) for s in seqlens.split(",") if s]
    rows = memory.sweep(shapes, cfgs, b_list, s_list, unit=unit)
    if proportions:
        lines = ["model,mode,batch,seqlen,weight_frac,kv_frac,dynamic_frac"]
        for r in rows:
            lines.append(f"{r['model']},{r['mode']},{r['batch']},{r['seqlen']},"
                         f"{r['weight_frac']:.6f},{r['kv_frac']:.6f},"
                         f"{r['dynamic_frac']:.6f}")
    else:
        lines = memory.sweep_csv_lines(rows)
    Path(out).write_text("\n".join(lines) + "\n")
    click.echo(f"wrote {len(rows)} rows to {out}")


@cli.command("stats-dump")
@_config_options
def cmd_stats_dump(config_path, **overrides):
    """Dump per-site (channel, min, max) CSVs for range scatter plots."""
    from .calibration import stats_csv_lines
    cfg = _load_config(config_path, **overrides)
    model, _ = _bundle_model(cfg)
    out = Path(cfg.out)
    stats = bundles.load_layer_stats(out / "stats", model.dims.layers,
                                     model.dims.heads)
    dump = out / "stats_csv"
    dump.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, ls in enumerate(stats):
        named = {"r1": ls.r1, "r4": ls.r4, "r5": ls.r5}
        for h in range(model.dims.heads):
            named[f"q_h{h}"] = ls.qk.q_heads[h]
            named[f"k_h{h}"] = ls.qk.k_heads[h]
            named[f"v_h{h}"] = ls.v_heads[h]
            named[f"ctx_h{h}"] = ls.ctx_heads[h]
        for name, s in named.items():
            path = dump / f"layer{i:02d}_{name}.csv"
            path.write_text("\n".join(stats_csv_lines(s)) + "\n")
            count += 1
    click.echo(f"wrote {count} CSV files to {dump}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except (ValidationError, click.UsageError) as exc:
        _emit_error("validation", exc)
        return 1
    except click.exceptions.Exit as exc:  # --help
        return int(exc.exit_code)
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        _emit_error("runtime", exc)
        return 2


def _emit_error(kind: str, exc: Exception) -> None:
    doc = {"error": {"type": kind, "class": type(exc).__name__,
                     "message": str(exc)}}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())

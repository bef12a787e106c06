"""Command-line harness: gen-data, train, eval, ablate, visualize.

Every run directory gets a manifest.json that snapshots the configuration and
seed; re-running from a manifest reproduces the metric logs byte for byte.
Exit codes: 0 ok, 2 usage, 3 I/O, 4 config, 5 numeric.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config as config_mod, data, train as train_mod, viz
from .adapter import CROSS_ATTENTION, FUSION, GUIDED_GATE, PARALLEL, SERIAL, SamplerOptions
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, build_run_config
from .data import GeoConfig
from .model import ConfigError as ModelConfigError
from .model import PaSam

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_NUMERIC = 5

ABLATION_AXES = {
    "crm": [("crm", GUIDED_GATE), ("crm", CROSS_ATTENTION)],
    "nsample": [("n_sample", 0), ("n_sample", 1), ("n_sample", 4), ("n_sample", 8)],
    "connection": [("connection", SERIAL), ("connection", PARALLEL), ("connection", FUSION)],
    "blocks": [("adapter_blocks", "second_only"), ("adapter_blocks", "both")],
}


def _default_seed():
    return int(os.environ.get("PAADAPT_SEED", "0"))


def _git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _write_manifest(out_dir, command, cfg, seed, args_dict, outputs):
    manifest = {
        "command": command,
        "seed": seed,
        "config": cfg.to_dict() if cfg is not None else None,
        "args": args_dict,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "git_describe": _git_describe(),
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve_config(args):
    overrides = _overrides(getattr(args, "set", None))
    manifest_cfg = None
    if getattr(args, "from_manifest", None):
        manifest = _load_manifest(args.from_manifest)
        manifest_cfg = manifest.get("config")
    if manifest_cfg is not None:
        base = RunConfig(**manifest_cfg)
        values = {**base.to_dict()}
        for k, v in overrides.items():
            values[k] = v
        return build_run_config(None, values)
    cfg = build_run_config(getattr(args, "config", None), overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _split_samples(samples, val_samples):
    if val_samples is not None:
        return samples, val_samples
    n_val = max(1, len(samples) // 4)
    return samples[:-n_val], samples[-n_val:]


def _load_split(args, cfg):
    samples = data.load_dataset(args.data, dilation_d=cfg.dilation_d)
    val = data.load_dataset(args.val, dilation_d=cfg.dilation_d) if getattr(args, "val", None) else None
    return _split_samples(samples, val)


def _build_model(cfg, with_adapter, seed):
    return PaSam(cfg.model_config(), seed=seed, with_adapter=with_adapter)


def _save_checkpoint(model, cfg, path, backbone_only=False):
    params = model.parameters()
    if backbone_only:
        params = {k: v for k, v in params.items() if not k.startswith("adapter.")}
    checkpoint.save(params, path)
    config_mod.write_config_file(f"{path}.config", cfg)


def _model_from_checkpoint(ckpt_path, config_path=None):
    sidecar = config_path or f"{ckpt_path}.config"
    cfg = build_run_config(sidecar if Path(sidecar).exists() else None, None)
    stored = checkpoint.load(ckpt_path)
    with_adapter = any(k.startswith("adapter.") for k in stored)
    model = _build_model(cfg, with_adapter, seed=cfg.seed)
    if not with_adapter:
        params = {k: v for k, v in model.parameters().items() if not k.startswith("adapter.")}
        _assign(params, stored, ckpt_path)
    else:
        checkpoint.load_into(model, ckpt_path)
    return model, cfg


def _assign(params, stored, path):
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter names do not match (missing {missing[:3]}, extra {extra[:3]})"
        )
    for name, p in params.items():
        if stored[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: checkpoint {stored[name].shape}, model {p.data.shape}"
            )
        p.data = stored[name].astype(np.float32)


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    seed = args.seed if args.seed is not None else _default_seed()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geo = GeoConfig(resolution=args.resolution)
    samples = data.generate_dataset(args.n, geo, seed=seed)
    data.save_dataset(samples, out)
    _write_manifest(
        out,
        "gen-data",
        None,
        seed,
        {"n": args.n, "resolution": args.resolution},
        {"dataset": out},
    )
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _train_one_phase(model, phase, cfg, train_samples, val_samples, out_dir, csv_name):
    csv_path = Path(out_dir) / csv_name
    rows, _ = train_mod.run_phase(
        model, phase, train_samples, val_samples, cfg.train_config(phase), csv_path=csv_path
    )
    return rows, csv_path


def cmd_train(args):
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_samples, val_samples = _load_split(args, cfg)

    if args.phase == "adapter":
        if not args.baseline:
            raise ConfigError("--phase adapter requires --baseline CHECKPOINT")
        if not Path(args.baseline).exists():
            raise FileNotFoundError(f"baseline checkpoint not found: {args.baseline}")
        model = _build_model(cfg, with_adapter=True, seed=cfg.seed)
        backbone = {k: v for k, v in model.parameters().items() if not k.startswith("adapter.")}
        _assign(backbone, checkpoint.load(args.baseline), args.baseline)
    else:
        model = _build_model(cfg, with_adapter=False, seed=cfg.seed)

    rows, csv_path = _train_one_phase(
        model, args.phase, cfg, train_samples, val_samples, out, "metrics.csv"
    )
    ckpt_path = out / "checkpoint.paadapt"
    _save_checkpoint(model, cfg, ckpt_path, backbone_only=args.phase == "baseline")
    _write_manifest(
        out,
        "train",
        cfg,
        cfg.seed,
        {
            "phase": args.phase,
            "data": args.data,
            "val": args.val,
            "baseline": args.baseline,
        },
        {"checkpoint": ckpt_path, "metrics": csv_path},
    )
    last = rows[-1] if rows else (0, "val", 0.0, 0.0, float("nan"))
    print(f"phase={args.phase} final epoch={last[0]} val miou={rows[-1][2]:.6f} mbiou={rows[-1][3]:.6f}")
    return EXIT_OK


def cmd_eval(args):
    model, cfg = _model_from_checkpoint(args.checkpoint, getattr(args, "config", None))
    samples = data.load_dataset(args.data, dilation_d=cfg.dilation_d)
    use_adapter = model.adapter is not None
    miou, mbiou, _ = train_mod.evaluate(model, samples, use_adapter, cfg.train_config("adapter"))
    line = f"miou={miou:.6f} mbiou={mbiou:.6f}"
    print(line)
    out_path = Path(args.out) if args.out else Path(f"{args.checkpoint}.eval.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("dataset,miou,mbiou\n")
        fh.write(f"{args.data},{miou:.6f},{mbiou:.6f}\n")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r} (choices: {sorted(ABLATION_AXES)})")
    train_samples, val_samples = _load_split(args, cfg)

    if args.baseline:
        baseline_path = Path(args.baseline)
        if not baseline_path.exists():
            raise FileNotFoundError(f"baseline checkpoint not found: {baseline_path}")
    else:
        base_model = _build_model(cfg, with_adapter=False, seed=cfg.seed)
        _train_one_phase(base_model, "baseline", cfg, train_samples, val_samples, out, "baseline_metrics.csv")
        baseline_path = out / "baseline.paadapt"
        _save_checkpoint(base_model, cfg, baseline_path, backbone_only=True)

    stored_backbone = checkpoint.load(baseline_path)
    rows = []
    for key, value in ABLATION_AXES[args.axis]:
        variant = build_run_config(None, {**cfg.to_dict(), key: value})
        model = _build_model(variant, with_adapter=True, seed=variant.seed)
        backbone = {k: v for k, v in model.parameters().items() if not k.startswith("adapter.")}
        _assign(backbone, stored_backbone, baseline_path)
        run_dir = out / f"{args.axis}_{value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        _train_one_phase(model, "adapter", variant, train_samples, val_samples, run_dir, "metrics.csv")
        _save_checkpoint(model, variant, run_dir / "checkpoint.paadapt")
        miou, mbiou, _ = train_mod.evaluate(
            model, val_samples, True, variant.train_config("adapter")
        )
        rows.append((args.axis, value, miou, mbiou))
        print(f"{args.axis}={value}: miou={miou:.6f} mbiou={mbiou:.6f}")

    table = out / "ablation.csv"
    with open(table, "w", encoding="utf-8") as fh:
        fh.write("axis,value,miou,mbiou\n")
        for axis, value, miou, mbiou in rows:
            fh.write(f"{axis},{value},{miou:.6f},{mbiou:.6f}\n")
    _write_manifest(
        out,
        "ablate",
        cfg,
        cfg.seed,
        {"axis": args.axis, "data": args.data, "baseline": str(baseline_path)},
        {"table": table, "baseline": baseline_path},
    )
    return EXIT_OK


def cmd_visualize(args):
    model, cfg = _model_from_checkpoint(args.checkpoint, getattr(args, "config", None))
    if model.adapter is None:
        raise ConfigError("visualize needs an adapter checkpoint (intermediate masks)")
    samples = data.load_dataset(args.data, dilation_d=cfg.dilation_d)
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"--index {args.index} out of range for {len(samples)} samples")
    sample = samples[args.index]
    opts = SamplerOptions(
        n_sample=cfg.n_sample, temperature=cfg.temperature, mode="infer_deterministic",
        st_mode=cfg.st_mode,
    )
    output = model.forward(
        sample.image,
        points=sample.points,
        box=sample.box,
        coarse_mask=sample.coarse_mask[None].astype(np.float32),
        sampler_opts=opts,
    )
    paths = viz.write_visualization(args.out, sample, output)
    ratio = viz.uncertain_band_ratio(
        output.intermediates.masks.m_u.data, sample.gt_mask, cfg.dilation_d
    )
    print(f"wrote {len(paths)} files to {args.out} (uncertain-band ratio {ratio:.3f})")
    return EXIT_OK


# --------------------------------------------------------------------------

def _parser():
    parser = argparse.ArgumentParser(prog="paadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset split")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resolution", type=int, default=128)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one phase")
    p.add_argument("--phase", choices=["baseline", "adapter"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--baseline", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--from-manifest", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis from a shared baseline")
    p.add_argument("--axis", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--baseline", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--from-manifest", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="write intermediate-mask PNGs for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_visualize)
    return parser


def _fail(code, exc):
    message = str(exc).replace("\n", " ")
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
        return code
    try:
        return args.func(args)
    except (ConfigError, ModelConfigError, CheckpointError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except train_mod.NumericsError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (OSError, FileNotFoundError) as exc:
        return _fail(EXIT_IO, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())

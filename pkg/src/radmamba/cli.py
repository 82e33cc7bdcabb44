"""Command-line entry point: ``radmamba <subcommand> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import data as D
from .analysis import AblationGrid, ablation_csv, calibrate_dim, count_flops, count_params, run_ablation
from .model import CAPTURE_POINTS, ConfigError, ModelConfig, corr_avg, load_checkpoint, save_checkpoint
from .tensor import no_grad
from .train import TrainConfig, config_hash, eval_continuous, evaluate, train

PRESETS = ("diat", "ci4r", "uog20", "synthetic")


class CliError(Exception):
    def __init__(self, message: str, problems: Sequence[str] = ()):
        super().__init__(message)
        self.problems = list(problems)


# ----------------------------------------------------------------------------
# Configuration


def load_config_file(ref: str | None) -> dict:
    """Read a preset by name or a JSON file by path (``None`` gives the synthetic preset)."""
    ref = ref or "synthetic"
    if ref in PRESETS and not Path(ref).exists():
        text = resources.files("radmamba.presets").joinpath(f"{ref}.json").read_text()
    else:
        p = Path(ref)
        if not p.is_file():
            raise CliError(f"config file {ref} not found (presets: {', '.join(PRESETS)})")
        text = p.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError(f"config {ref} is not valid JSON: {e}") from e
    unknown = sorted(set(cfg) - {"name", "model", "train", "data", "window", "reference"})
    if unknown:
        raise CliError("unknown top-level config keys", [f"unknown key {k!r}" for k in unknown])
    return cfg


MODEL_FLAGS = {
    "dim": "dim",
    "d_state": "d_state",
    "dt_rank": "dt_rank",
    "projection": "projection",
    "depth": "depth",
    "n_classes": "n_classes",
    "discretization": "discretization",
    "scan": "scan",
}
TRAIN_FLAGS = {
    "lr": "lr0",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "weight_decay": "weight_decay",
    "patience": "patience",
    "monitor": "monitor",
}


def effective_config(args) -> dict:
    """Config file merged with command-line overrides (flags win)."""
    cfg = load_config_file(getattr(args, "config", None))
    model = dict(cfg.get("model", {}))
    for flag, key in MODEL_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            model[key] = v
    if getattr(args, "geometry", None):
        model["geometry"] = {"kind": args.geometry}
        if args.geometry == "rectangular":
            model["geometry"]["size"] = list(args.rect_size or cfg.get("reference", {}).get("rect_size", (7, 7)))
    if getattr(args, "ds_factors", None):
        model.setdefault("chan_ds", {})
        model["chan_ds"] = dict(model["chan_ds"], factors=list(args.ds_factors))
    train_cfg = dict(cfg.get("train", {}))
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            train_cfg[key] = v
    cfg["model"] = model
    cfg["train"] = train_cfg
    return cfg


def _model_config_or_problems(cfg: Mapping) -> tuple[ModelConfig | None, list[str]]:
    try:
        mc = ModelConfig.from_dict(cfg.get("model", {}))
    except ConfigError as e:
        return None, e.problems
    except (TypeError, ValueError) as e:
        return None, [str(e)]
    return mc, mc.problems()


def _train_config_or_problems(cfg: Mapping) -> tuple[TrainConfig | None, list[str]]:
    try:
        tc = TrainConfig.from_dict(cfg.get("train", {}))
    except (TypeError, ValueError) as e:
        return None, [str(e)]
    return tc, tc.problems()


def build_model_config(cfg: Mapping) -> ModelConfig:
    mc, probs = _model_config_or_problems(cfg)
    if probs:
        raise ConfigError(probs)
    return mc


def build_configs(cfg: Mapping) -> tuple[ModelConfig, TrainConfig]:
    """Validate model and training sections together, reporting every problem at once."""
    mc, p1 = _model_config_or_problems(cfg)
    tc, p2 = _train_config_or_problems(cfg)
    if p1 or p2:
        raise ConfigError(p1 + p2)
    return mc, tc


def _data_for(args, cfg: Mapping, mc: ModelConfig) -> tuple[D.Dataset, D.Dataset]:
    if getattr(args, "data", None):
        dcfg = cfg.get("data", {})
        tr, te = D.read_dataset(args.data, dcfg.get("split_ratio", 0.8), dcfg.get("seed", 0), mc.input_shape)
    else:
        dcfg = cfg.get("data")
        if dcfg is None:
            raise CliError("no --data directory given and the config has no synthetic 'data' section")
        classes = D.DEFAULT_CLASSES[: dcfg.get("n_classes", len(D.DEFAULT_CLASSES))]
        tr, te = D.make_dataset(classes, dcfg.get("n_per_class", 60), dcfg.get("split_ratio", 0.8), dcfg.get("seed", 0))
    if tr.X.shape[1:] != mc.input_shape:
        raise ConfigError([f"data samples have shape {tuple(tr.X.shape[1:])} but model input_shape is {mc.input_shape}"])
    if tr.n_classes != mc.n_classes:
        raise ConfigError([f"data has {tr.n_classes} classes but model n_classes is {mc.n_classes}"])
    return tr, te


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(obj, as_json: bool, text: str) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True) if as_json else text)


# ----------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    n = args.classes if args.classes is not None else len(D.DEFAULT_CLASSES)
    if not 2 <= n <= len(D.DEFAULT_CLASSES):
        raise CliError(f"--classes must be between 2 and {len(D.DEFAULT_CLASSES)}")
    classes = D.DEFAULT_CLASSES[:n]
    tr, te = D.make_dataset(classes, args.n_per_class, args.split_ratio, args.seed)
    out = Path(args.out)
    D.write_dataset(out, tr, te, args.seed, args.format, {"synth_classes": [D.synth_class_to_dict(c) for c in classes], "n_per_class": args.n_per_class})
    if args.sequence_segments:
        rng = np.random.default_rng(args.seed)
        order = rng.integers(0, n, size=args.sequence_segments).tolist()
        seq = D.synth_sequence(classes, order, args.segment_bins, args.seed)
        D.write_sequence(seq, out / f"sequence.{args.format}", out / "labels.csv")
    counts_tr, counts_te = tr.class_counts(), te.class_counts()
    for i, c in enumerate(classes):
        print(f"{c.name:<8} train {counts_tr[i]:>4}  test {counts_te[i]:>4}")
    print(f"wrote {len(tr) + len(te)} spectrograms to {out}")
    return 0


def _limit_threads():
    n = os.environ.get("RADMAMBA_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        k = int(n)
        if k < 1:
            raise ValueError
    except ValueError:
        raise CliError(f"RADMAMBA_THREADS must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=k)


def cmd_train(args) -> int:
    cfg = effective_config(args)
    mc, tc = build_configs(cfg)
    tr, te = _data_for(args, cfg, mc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else tc.seeds[0]
    history: list[dict] = []

    def progress(entry):
        history.append(entry)
        if not args.quiet:
            acc = entry["test_accuracy"]
            print(f"epoch {entry['epoch']:>3}  loss {entry['train_loss']:.4f}  acc {'-' if acc is None else f'{acc:.4f}'}  lr {entry['lr']:.2e}", file=sys.stderr)

    data_hash = hashlib.sha256((tr.content_hash() + te.content_hash()).encode()).hexdigest()[:16]
    try:
        report, model = train(mc, tr, te, tc, seed, progress, data_hash)
    except KeyboardInterrupt:
        partial = {"interrupted": True, "seed": seed, "config_hash": config_hash(mc, tc, seed, data_hash), "history": history, "model_config": mc.to_dict(), "train_config": tc.to_dict()}
        _write_json(out / "report.partial.json", partial)
        print(f"interrupted; partial report in {out / 'report.partial.json'}", file=sys.stderr)
        return 130
    report.save(out / "report.json")
    _write_json(out / "timing.json", {"config_hash": report.config_hash, "wall_time_s": report.wall_time_s})
    save_checkpoint(model, out / "checkpoint.zip", {"config_hash": report.config_hash, "train_config": tc.to_dict(), "class_names": report.class_names, "best_epoch": report.best_epoch})
    print(json.dumps({"config_hash": report.config_hash, "best_accuracy": report.best_accuracy, "best_epoch": report.best_epoch, "final_accuracy": report.final_accuracy, "n_params": report.n_params, "out": str(out)}, indent=2))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    mc = model.cfg
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    result: dict[str, Any] = {"checkpoint": str(args.checkpoint), "config_hash": _checkpoint_hash(model), "model_config": mc.to_dict()}
    if args.sequence:
        seq = D.read_sequence(args.sequence, args.labels)
        res = eval_continuous(model, seq, D.WindowSpec(args.frame_len or mc.input_shape[2], args.stride))
        result.update({"mode": "continuous", "windows": int(len(res.predictions)), "frame_accuracy": res.accuracy})
        if out:
            res.write_csv(out / "track.csv")
    else:
        if not args.data:
            raise CliError("eval needs --data DIR or --sequence FILE")
        tr, te = D.read_dataset(args.data, expected_shape=mc.input_shape)
        ds = te if args.split == "test" else tr
        acc, cm, _ = evaluate(model, ds)
        result.update({"mode": "classification", "split": args.split, "n_samples": len(ds), "accuracy": acc, "confusion": cm.tolist(), "class_names": ds.class_names})
        if out:
            with open(out / "confusion.csv", "w") as fh:
                fh.write("true\\pred," + ",".join(ds.class_names) + "\n")
                for name, row in zip(ds.class_names, cm):
                    fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
    if out:
        _write_json(out / "metrics.json", result)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_count(args) -> int:
    cfg = effective_config(args)
    mc = build_model_config(cfg)
    rep = count_params(mc)
    obj = dict(rep.as_dict(), config_hash=_model_hash(mc), reference=cfg.get("reference", {}).get("params"))
    _emit(obj, args.json, rep.format())
    return 0


def cmd_flops(args) -> int:
    cfg = effective_config(args)
    mc = build_model_config(cfg)
    rep = count_flops(mc, strict=args.strict)
    obj = dict(rep.as_dict(), config_hash=_model_hash(mc), reference=cfg.get("reference", {}).get("flops"))
    _emit(obj, args.json, rep.format())
    return 0


def _model_hash(mc: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(mc.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _checkpoint_hash(model) -> str:
    return model.extra.get("config_hash") or _model_hash(model.cfg)


def cmd_corr(args) -> int:
    model = load_checkpoint(args.checkpoint)
    tr, te = D.read_dataset(args.data, expected_shape=model.cfg.input_shape)
    ds = te if args.split == "test" else tr
    if len(ds) == 0:
        raise CliError(f"the {args.split} split is empty")
    capture: dict = {}
    dtype = model.params["head.weight"].dtype
    with no_grad():
        for i in range(0, len(ds), 32):
            model(np.asarray(ds.X[i : i + 32], dtype=dtype), capture=capture)
    vals = {k: corr_avg(np.concatenate(capture[k], axis=0)) for k in CAPTURE_POINTS}
    table = {p: {"input": vals[f"{p}.in"], "output": vals[f"{p}.out"]} for p in ("p1", "p2", "p3")}
    obj = {"corr_avg": table, "split": args.split, "n_samples": len(ds), "config_hash": _checkpoint_hash(model)}
    text = "            at input      at output\n" + "\n".join(f"{p.upper():<10}{table[p]['input']:>12.4f}{table[p]['output']:>15.4f}" for p in table)
    if args.out:
        _write_json(Path(args.out), obj)
    _emit(obj, args.json, text)
    return 0


def _parse_factor(s: str) -> tuple[int, int]:
    try:
        a, b = s.lower().replace("(", "").replace(")", "").replace(" ", "").replace(",", "x").split("x")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a factor like 2x32, got {s!r}") from None


def cmd_ablate(args) -> int:
    cfg = effective_config(args)
    mc, tc = build_configs(cfg)
    tr, te = _data_for(args, cfg, mc)
    grid = AblationGrid(
        projections=args.projections,
        geometries=args.geometries,
        factors=args.factors or [mc.chan_ds.factors],
        seeds=args.seeds if args.seeds is not None else tc.seeds,
        rect_size=tuple(args.rect_size or cfg.get("reference", {}).get("rect_size", (7, 7))),
        reference_factors=mc.chan_ds.factors,
    )

    def progress(ev):
        if not args.quiet:
            acc = ev["accuracy"]
            print(f"{ev['cell']:<40} seed {ev['seed']:>2}  {'FAILED ' + ev['error'] if acc is None else f'{acc:.4f}'}", file=sys.stderr)

    with _limit_threads():
        rows = run_ablation(grid, mc, tr, te, tc, workers=args.workers, progress=progress)
    text = ablation_csv(rows, args.out)
    if args.out:
        meta = {"model_config": mc.to_dict(), "train_config": tc.to_dict(), "seeds": list(grid.seeds), "config_hash": config_hash(mc, tc, -1)}
        _write_json(Path(str(args.out) + ".json"), meta)
    sys.stdout.write(text)
    return 0


def cmd_calibrate(args) -> int:
    cfg = effective_config(args)
    mc = build_model_config(cfg)
    ref = cfg.get("reference", {})
    target = args.target_params if args.target_params is not None else ref.get("params")
    if target is None:
        raise CliError("no --target-params given and the config has no reference parameter count")
    sweep = args.sweep or ref.get("dim_sweep") or [8, 16, 32, 64]
    best, table = calibrate_dim(mc, target, sweep)
    rows = [{"dim": d, "params": p, "rel_diff": p / target - 1} for d, p in table]
    obj = {"target_params": target, "best_dim": best, "sweep": rows}
    text = "\n".join(f"dim {r['dim']:>4}  params {r['params']:>8}  {100 * r['rel_diff']:+7.1f}%{'  <-' if r['dim'] == best else ''}" for r in rows)
    _emit(obj, args.json, text)
    return 0


# ----------------------------------------------------------------------------
# Parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"preset name ({', '.join(PRESETS)}) or path to a JSON config")
    p.add_argument("--dim", type=int)
    p.add_argument("--d-state", dest="d_state", type=int)
    p.add_argument("--dt-rank", dest="dt_rank", type=int)
    p.add_argument("--projection", choices=["linear1", "linear3", "conv1d_k3"])
    p.add_argument("--geometry", choices=["doppler_aligned", "rectangular", "time_aligned"])
    p.add_argument("--rect-size", dest="rect_size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--ds-factors", dest="ds_factors", type=int, nargs=2, metavar=("RH", "RW"))
    p.add_argument("--depth", type=int)
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--discretization", choices=["zoh", "euler"])
    p.add_argument("--scan", choices=["parallel", "sequential"])


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--monitor", choices=["test", "val"])
    p.add_argument("--data", help="dataset directory (default: synthesize from the config's data section)")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radmamba", description="Radar micro-Doppler classification with a selective state-space model.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic spectrogram dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, help="number of built-in activity classes (2-4)")
    p.add_argument("--n-per-class", dest="n_per_class", type=int, default=60)
    p.add_argument("--split-ratio", dest="split_ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["rmt", "png"], default="rmt")
    p.add_argument("--sequence-segments", dest="sequence_segments", type=int, default=0, help="also write a continuous recording with this many segments")
    p.add_argument("--segment-bins", dest="segment_bins", type=int, default=224)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train one model and write checkpoint + report")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="run")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset or continuous recording")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--sequence", help="continuous spectrogram file")
    p.add_argument("--labels", help="per-bin label CSV (default: labels.csv next to the sequence)")
    p.add_argument("--frame-len", dest="frame_len", type=int)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", help="directory for metrics.json, confusion.csv and track.csv")
    p.set_defaults(fn=cmd_eval)

    for name, fn, helptext in (("count", cmd_count, "parameter count per layer"), ("flops", cmd_flops, "FLOPs per inference per layer")):
        p = sub.add_parser(name, help=helptext)
        _add_model_flags(p)
        p.add_argument("--json", action="store_true")
        if name == "flops":
            p.add_argument("--strict", action="store_true", help="also count normalisation, activation and pooling ops")
        p.set_defaults(fn=fn)

    p = sub.add_parser("corr", help="averaged cross-correlation between patches at P1/P2/P3")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_corr)

    p = sub.add_parser("ablate", help="projection x patch geometry x downsampling grid")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--projections", nargs="+", default=["linear1", "linear3", "conv1d_k3"])
    p.add_argument("--geometries", nargs="+", default=["rectangular", "time_aligned", "doppler_aligned"], choices=["rectangular", "time_aligned", "doppler_aligned"])
    p.add_argument("--factors", nargs="+", type=_parse_factor, help="reduction factors like 1x1 8x2 2x32 (default: the config's)")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--workers", type=int, default=int(os.environ.get("RADMAMBA_THREADS", "1") or 1))
    p.add_argument("--out", help="CSV path (a .json sidecar records the config)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("calibrate-dim", help="pick the swept dim whose parameter count is nearest a target")
    _add_model_flags(p)
    p.add_argument("--target-params", dest="target_params", type=float)
    p.add_argument("--sweep", type=int, nargs="+")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_calibrate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            with _limit_threads():
                return args.fn(args)
        return args.fn(args)
    except ConfigError as e:
        print(json.dumps({"error": "ConfigError", "message": "invalid configuration", "problems": e.problems}), file=sys.stderr)
        return 2
    except CliError as e:
        print(json.dumps({"error": "CliError", "message": str(e), "problems": e.problems}), file=sys.stderr)
        return 2
    except (D.DataError, OSError, ValueError, RuntimeError, KeyError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e), "problems": []}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

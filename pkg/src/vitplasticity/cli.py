"""Command-line entry point: ``vitplasticity <command> [flags]``.

Commands write JSON reports (full-precision, schema-versioned) plus a
``*.run.json`` manifest recording the invocation, resolved configuration,
input hashes and timestamps. Reports themselves carry no timestamps, so
repeated invocations produce identical bytes.
"""

from __future__ import annotations

import argparse
import contextlib
import glob
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import BoundInputs, embedding_norm, estimate_sigma_min, evaluate_all_bounds, image_energy
from .data_io import TASKS, Dataset, atomic_write_bytes, generate_synthetic, load_dataset, load_model, save_model
from .data_io import split as split_indices
from .finetune import (
    GROUPS,
    DegenerateSampleError,
    FinetuneConfig,
    Split,
    TrainLog,
    relative_gain,
    run_finetune,
    wilcoxon_signed_rank,
)
from .plasticity import PairSampler, ProbeMode, compute_radius, estimate_plasticity
from .transformer import (
    INIT_SCHEMES,
    PRESETS,
    LazyParams,
    ParameterStore,
    ViTConfig,
    count_parameters,
    embed_images,
    init_params,
    preset,
)

SUMMARY_SCHEMA = "vitplasticity.summary/1"
SWEEP_SCHEMA = "vitplasticity.sweep/1"
RUN_SCHEMA = "vitplasticity.run/1"
MAX_MATERIALISED_BYTES = 2 * 2**30
EXIT_USAGE = 2
EXIT_PRECONDITION = 3


class UsageError(Exception):
    """Bad or missing command-line inputs."""


# --------------------------------------------------------------------------
# helpers


def _threads():
    """Cap BLAS threads from PLASTICITY_THREADS (0 or unset = library default)."""
    raw = os.environ.get("PLASTICITY_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PLASTICITY_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("PLASTICITY_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dataset_hashes(manifest_path: str) -> dict[str, str]:
    from .data_io import DatasetManifest

    man = DatasetManifest.load(manifest_path)
    return {
        manifest_path: _sha256(manifest_path),
        str(man.resolve(man.images)): _sha256(man.resolve(man.images)),
        str(man.resolve(man.labels)): _sha256(man.resolve(man.labels)),
    }


def _write_json(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _dumps(data) -> str:
    return json.dumps(data, indent=1, sort_keys=True) + "\n"


def run_manifest_path(out: str | os.PathLike, stem: str = "run") -> Path:
    out = Path(out)
    return out / f"{stem}.json" if out.suffix == "" else out.with_suffix(".run.json")


def write_run_manifest(args, argv, started: str, inputs: dict, outputs: list[str], seeds: dict, stem: str = "run") -> Path:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {
        "schema": RUN_SCHEMA,
        "command": args.command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "input_hashes": inputs,
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": outputs,
    }
    path = run_manifest_path(args.out, stem)
    _write_json(path, _dumps(doc))
    return path


def parse_model_spec(spec: str):
    """``random:<preset>[:<init>[:<seed>]]`` or a checkpoint path → (cfg, params | None)."""
    if spec.startswith("random:"):
        parts = spec.split(":")[1:]
        if not parts or parts[0] not in PRESETS or len(parts) > 3:
            raise UsageError(f"bad model spec {spec!r}; use random:<{'|'.join(PRESETS)}>[:<init>[:<seed>]]")
        overrides = {}
        if len(parts) > 1 and parts[1]:
            if parts[1] not in INIT_SCHEMES:
                raise UsageError(f"unknown init {parts[1]!r}; choose from {INIT_SCHEMES}")
            overrides["init"] = parts[1]
        if len(parts) > 2:
            try:
                overrides["seed"] = int(parts[2])
            except ValueError:
                raise UsageError(f"bad seed in model spec {spec!r}") from None
        return preset(parts[0], **overrides), None
    if not os.path.exists(spec):
        raise UsageError(f"model checkpoint {spec!r} not found")
    return load_model(spec)


def _materialise(cfg: ViTConfig, params):
    if params is not None:
        return params
    size = count_parameters(cfg) * 8
    if size > MAX_MATERIALISED_BYTES:
        raise UsageError(f"model needs {size / 2**30:.1f} GiB in memory; only bounds can be evaluated for it")
    return init_params(cfg)


def _load_data(path: str | None, flag: str) -> Dataset:
    if not path:
        raise UsageError(f"{flag} is required")
    if not os.path.exists(path):
        raise UsageError(f"{flag}: {path!r} not found")
    return load_dataset(path)


def _check_images(cfg: ViTConfig, ds: Dataset, flag: str) -> None:
    if ds.images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise UsageError(f"{flag}: images of shape {ds.images.shape[1:]} do not fit the model "
                         f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")


def _auto_or_float(value: str, flag: str) -> float | None:
    if value == "auto":
        return None
    try:
        return float(value)
    except ValueError:
        raise UsageError(f"{flag} must be 'auto' or a number, got {value!r}") from None


def _lr_tag(lr: float) -> str:
    return repr(float(lr)).replace(".", "p").replace("-", "m").replace("+", "")


# --------------------------------------------------------------------------
# commands


def cmd_generate_data(args, argv) -> int:
    started = _now()
    man = generate_synthetic(args.out, args.task, args.n, args.image_size, args.seed, args.classes, args.patch_size)
    outputs = [str(Path(args.out) / n) for n in ("manifest.json", man.images, man.labels)]
    write_run_manifest(args, argv, started, {}, outputs, {"seed": args.seed})
    return 0


def cmd_plasticity(args, argv) -> int:
    started = _now()
    cfg, params = parse_model_spec(args.model)
    params = _materialise(cfg, params)
    data_a = _load_data(args.data_a, "--data-a")
    data_b = _load_data(args.data_b or args.data_a, "--data-b")
    _check_images(cfg, data_a, "--data-a")
    _check_images(cfg, data_b, "--data-b")
    sampler = PairSampler(data_a, data_b, args.pairs, args.batch, args.seed)
    report = estimate_plasticity(cfg, params, sampler, ProbeMode(args.mode))
    report.metadata["model_spec"] = args.model
    _write_json(args.out, report.to_json(args.sample_cap))
    outputs = [args.out]
    if args.figures:
        from .plotting import plot_plasticity

        outputs.append(plot_plasticity(report.to_dict(args.sample_cap), Path(args.out).with_suffix(".png")))
    inputs = {}
    for p in {args.data_a, args.data_b or args.data_a}:
        inputs.update(_dataset_hashes(p))
    if not args.model.startswith("random:"):
        inputs[args.model] = _sha256(args.model)
    write_run_manifest(args, argv, started, inputs, outputs, {"pair_seed": args.seed, "model_seed": cfg.seed})
    return 0


def cmd_bounds(args, argv) -> int:
    started = _now()
    cfg, params = parse_model_spec(args.model)
    params = LazyParams(cfg) if params is None else params
    r = _auto_or_float(args.radius, "--radius")
    sigma = _auto_or_float(args.sigma, "--sigma")
    alpha = _auto_or_float(args.alpha, "--alpha")
    energy = _auto_or_float(args.energy, "--energy")
    need_data = r is None or sigma is None or (args.tighter and energy is None)
    inputs_hash = {}
    images = None
    if need_data:
        ds = _load_data(args.data, "--data (needed for automatic constants)")
        _check_images(cfg, ds, "--data")
        images = ds.images[: args.probe_count]
        inputs_hash.update(_dataset_hashes(args.data))
    if args.tighter:
        alpha = embedding_norm(params) if alpha is None else alpha
        energy = image_energy(images) if energy is None else energy
    else:
        alpha = energy = None
    if r is None or sigma is None:
        seqs = embed_images(cfg, params, images)
        r = compute_radius(seqs) if r is None else r
        sigma = estimate_sigma_min(seqs) if sigma is None else sigma
    inputs = BoundInputs(cfg.seq_len, r, sigma, alpha, energy)
    report = evaluate_all_bounds(cfg, params, inputs, tighter=args.tighter)
    report.metadata["model_spec"] = args.model
    _write_json(args.out, report.to_json())
    outputs = [args.out]
    if args.figures:
        from .plotting import plot_bounds

        outputs.append(plot_bounds(report.to_dict(), Path(args.out).with_suffix(".png")))
    if not args.model.startswith("random:"):
        inputs_hash[args.model] = _sha256(args.model)
    write_run_manifest(args, argv, started, inputs_hash, outputs, {"model_seed": cfg.seed})
    return 0


def _finetune_splits(args, cfg: ViTConfig) -> tuple[Split, Split, Split, str]:
    pool = _load_data(args.data, "--data")
    _check_images(cfg, pool, "--data")
    if args.test_data:
        test = _load_data(args.test_data, "--test-data")
        _check_images(cfg, test, "--test-data")
    else:
        keep, held = split_indices(len(pool), args.test_fraction, args.data_seed)
        pool, test = pool.subset(keep), pool.subset(held)
    tr, va = split_indices(len(pool), args.val_fraction, args.data_seed)
    return (Split(pool.images[tr], pool.labels[tr]), Split(pool.images[va], pool.labels[va]),
            Split(test.images, test.labels), pool.name)


def cmd_finetune(args, argv) -> int:
    started = _now()
    cfg, params = parse_model_spec(args.model)
    pool_classes = _load_data(args.data, "--data").num_classes
    if cfg.num_classes != pool_classes:
        if params is not None:
            raise UsageError(f"checkpoint has {cfg.num_classes} classes, data has {pool_classes}")
        cfg = ViTConfig.from_dict({**cfg.to_dict(), "num_classes": pool_classes})
    if args.head_tap:
        cfg = ViTConfig.from_dict({**cfg.to_dict(), "head_tap": args.head_tap})
    params = _materialise(cfg, params)
    if not isinstance(params, ParameterStore):
        params = ParameterStore(dict(params))
    train, val, test, task = _finetune_splits(args, cfg)
    lrs = [args.lr] if args.sweep is None else args.sweep
    out = Path(args.out)
    outputs: list[str] = []
    runs = []
    logs = []
    for lr in lrs:
        ft = FinetuneConfig(group=args.group, lr=lr, steps=args.steps, batch_size=args.batch, seed=args.seed,
                            eval_every=args.eval_every, val_fraction=args.val_fraction, schedule=args.schedule,
                            clip_norm=args.clip_norm, momentum=args.momentum, weight_decay=args.weight_decay)
        log, best = run_finetune(cfg, params, train, val, test, ft)
        log.metadata.update({"task": task, "model_spec": args.model, "data_seed": args.data_seed})
        stem = f"{ft.group}_lr{_lr_tag(lr)}_seed{args.seed}"
        log_path = out / f"trainlog_{stem}.json"
        _write_json(log_path, log.to_json())
        outputs.append(str(log_path))
        if not args.no_checkpoint:
            ckpt = out / f"model_{stem}.vckp"
            save_model(ckpt, cfg, best)
            outputs.append(str(ckpt))
        runs.append({"lr": lr, "log": log_path.name, "best_val_accuracy": log.best_val_accuracy,
                     "test_accuracy": log.test_accuracy, "best_eval_step": log.evals[log.best_eval].step})
        logs.append(log)
    if args.sweep is not None:
        best_i = max(range(len(runs)), key=lambda i: (runs[i]["best_val_accuracy"], -i))
        summary = {"schema": SWEEP_SCHEMA, "group": args.group.upper(), "seed": args.seed, "task": task,
                   "runs": runs, "best_lr": runs[best_i]["lr"], "best_test_accuracy": runs[best_i]["test_accuracy"]}
        path = out / f"sweep_{args.group.upper()}_seed{args.seed}.json"
        _write_json(path, _dumps(summary))
        outputs.append(str(path))
    if args.figures:
        from .plotting import plot_training

        outputs.append(plot_training([l.to_dict() for l in logs], out / f"training_{args.group.upper()}_seed{args.seed}.png"))
    inputs = _dataset_hashes(args.data)
    if args.test_data:
        inputs.update(_dataset_hashes(args.test_data))
    if not args.model.startswith("random:"):
        inputs[args.model] = _sha256(args.model)
    write_run_manifest(args, argv, started, inputs, outputs,
                       {"train_seed": args.seed, "data_seed": args.data_seed, "model_seed": cfg.seed},
                       stem=f"run_{args.group.upper()}_seed{args.seed}")
    return 0


def select_runs(logs: list[TrainLog]) -> dict[str, dict[tuple[str, int], TrainLog]]:
    """Per group and pairing unit (task, seed), the run with the best validation accuracy.

    Ties go to the smaller learning rate.
    """
    chosen: dict[str, dict[tuple[str, int], TrainLog]] = {}
    for log in sorted(logs, key=lambda l: (l.group, l.metadata.get("task", ""), l.config["seed"], l.config["lr"])):
        unit = (str(log.metadata.get("task", "")), int(log.config["seed"]))
        slot = chosen.setdefault(log.group, {})
        if unit not in slot or log.best_val_accuracy > slot[unit].best_val_accuracy:
            slot[unit] = log
    return chosen


def summarise(logs: list[TrainLog], probe_logs: list[TrainLog], baseline: str, alpha: float = 0.05) -> tuple[dict, list[str]]:
    """Accuracy table, relative gains and Wilcoxon comparisons against ``baseline``."""
    chosen = select_runs(logs + probe_logs)
    problems: list[str] = []
    groups = {}
    for g, units in sorted(chosen.items()):
        accs = [units[u].test_accuracy for u in sorted(units)]
        groups[g] = {
            "units": [{"task": u[0], "seed": u[1], "lr": units[u].config["lr"], "test_accuracy": units[u].test_accuracy,
                       "best_val_accuracy": units[u].best_val_accuracy} for u in sorted(units)],
            "mean_test_accuracy": float(np.mean(accs)),
            "num_trainable": units[sorted(units)[0]].num_trainable,
        }
    probe_group = "HEAD"
    if probe_group in groups:
        probe = groups[probe_group]["mean_test_accuracy"]
        for g, entry in groups.items():
            entry["relative_gain_vs_probe"] = relative_gain(entry["mean_test_accuracy"], probe) if probe > 0 else None
    else:
        problems.append("no linear-probing (HEAD) runs supplied; relative gains omitted")

    comparisons = {}
    if baseline not in chosen:
        problems.append(f"baseline group {baseline} has no runs")
    else:
        base_units = chosen[baseline]
        for g, units in sorted(chosen.items()):
            if g == baseline:
                continue
            shared = sorted(set(base_units) & set(units))
            diffs = [base_units[u].test_accuracy - units[u].test_accuracy for u in shared]
            entry = {"num_pairs": len(shared), "decrease": float(np.mean(diffs)) if diffs else None, "diffs": diffs}
            try:
                res = wilcoxon_signed_rank(diffs, alpha)
                entry.update({"statistic": res.statistic, "p_value": res.p_value, "significant": res.significant,
                              "method": res.method, "diagnostic": None})
            except DegenerateSampleError as exc:
                all_zero = bool(diffs) and all(d == 0 for d in diffs)
                entry.update({"statistic": None, "p_value": None, "significant": False, "method": None,
                              "diagnostic": str(exc)})
                if not all_zero:
                    problems.append(f"{baseline} vs {g}: {exc}")
            comparisons[g] = entry
    summary = {
        "schema": SUMMARY_SCHEMA,
        "baseline": baseline,
        "alpha": alpha,
        "groups": groups,
        "wilcoxon": comparisons,
        "diagnostics": problems,
    }
    return summary, problems


def summary_table(summary: dict) -> str:
    """Tab-separated per-group table mirroring the JSON summary."""
    rows = ["group\tmean_test_accuracy\trelative_gain_vs_probe\tdecrease_vs_baseline\tp_value\tsignificant"]
    for g, e in summary["groups"].items():
        w = summary["wilcoxon"].get(g, {})
        cells = [g, repr(e["mean_test_accuracy"]), repr(e.get("relative_gain_vs_probe")),
                 repr(w.get("decrease")), repr(w.get("p_value")), repr(w.get("significant"))]
        rows.append("\t".join(cells))
    return "\n".join(rows) + "\n"


def _read_logs(pattern: str | None, flag: str) -> tuple[list[TrainLog], dict[str, str]]:
    if not pattern:
        return [], {}
    paths = sorted(set(glob.glob(pattern)))
    if not paths:
        raise UsageError(f"{flag}: no files match {pattern!r}")
    logs, hashes = [], {}
    for p in paths:
        with open(p) as fh:
            data = json.load(fh)
        if data.get("schema") != "vitplasticity.trainlog/1":
            continue
        logs.append(TrainLog.from_dict(data))
        hashes[p] = _sha256(p)
    if not logs:
        raise UsageError(f"{flag}: no training logs among {len(paths)} files")
    return logs, hashes


def cmd_report(args, argv) -> int:
    started = _now()
    logs, hashes = _read_logs(args.logs, "--logs")
    probe_logs, probe_hashes = _read_logs(args.probe_log, "--probe-log")
    hashes.update(probe_hashes)
    key, _, baseline = args.wilcoxon.partition("=")
    if key != "baseline" or baseline.upper() not in GROUPS:
        raise UsageError(f"--wilcoxon must look like baseline=<group>, got {args.wilcoxon!r}")
    summary, problems = summarise(logs, probe_logs, baseline.upper(), args.alpha)
    _write_json(args.out, _dumps(summary))
    table = Path(args.out).with_suffix(".tsv")
    _write_json(table, summary_table(summary))
    outputs = [args.out, str(table)]
    if args.figures:
        from .plotting import plot_summary

        outputs.append(plot_summary(summary, Path(args.out).with_suffix(".png")))
    write_run_manifest(args, argv, started, hashes, outputs, {})
    for p in problems:
        print(f"vitplasticity report: {p}", file=sys.stderr)
    wilcoxon_failed = any(c["diagnostic"] and not all(d == 0 for d in c["diffs"]) for c in summary["wilcoxon"].values())
    return EXIT_PRECONDITION if wilcoxon_failed or baseline.upper() not in {g for g in summary["groups"]} else 0


# --------------------------------------------------------------------------
# parser


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0 or math.isinf(v):
        raise argparse.ArgumentTypeError(f"expected a finite number >= 0, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitplasticity", description="Plasticity analysis of vision-transformer components.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    model_help = "checkpoint path or random:<preset>[:<init>[:<seed>]] with preset in " + ", ".join(PRESETS)

    g = sub.add_parser("generate-data", help="write a synthetic image dataset")
    g.add_argument("--task", choices=TASKS, default="patch_color")
    g.add_argument("--n", type=int, default=1000, help="number of images")
    g.add_argument("--image-size", type=int, default=16)
    g.add_argument("--patch-size", type=int, default=4, help="grid cell holding the class colour")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("plasticity", help="estimate per-component plasticity")
    p.add_argument("--model", required=True, help=model_help)
    p.add_argument("--data-a", required=True, help="dataset manifest for the first element of each pair")
    p.add_argument("--data-b", help="dataset manifest for the second element (default: --data-a)")
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--mode", choices=[m.value for m in ProbeMode], default=ProbeMode.EMBEDDING.value)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-cap", type=int, default=10_000, help="raw samples stored per site")
    p.add_argument("--figures", action="store_true", help="also render a PNG next to the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plasticity)

    b = sub.add_parser("bounds", help="evaluate plasticity upper bounds")
    b.add_argument("--model", required=True, help=model_help)
    b.add_argument("--data", help="dataset manifest of probe images (needed for automatic constants)")
    b.add_argument("--probe-count", type=int, default=64)
    b.add_argument("--radius", default="auto", help="token ball radius r, or auto")
    b.add_argument("--sigma", default="auto", help="minimal token std for the LayerNorm bound, or auto")
    b.add_argument("--alpha", default="auto", help="embedding spectral norm, or auto")
    b.add_argument("--energy", default="auto", help="total image energy bound, or auto")
    b.add_argument("--tighter", action="store_true", help="also evaluate the energy-based attention bound")
    b.add_argument("--figures", action="store_true")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bounds)

    f = sub.add_parser("finetune", help="selectively finetune one component group")
    f.add_argument("--model", required=True, help=model_help)
    f.add_argument("--data", required=True, help="training pool manifest (validation is split off)")
    f.add_argument("--test-data", help="test manifest (default: hold out --test-fraction of --data)")
    f.add_argument("--test-fraction", type=float, default=0.2)
    f.add_argument("--group", type=str.upper, choices=GROUPS, required=True)
    f.add_argument("--lr", type=_nonneg_float, default=1e-2)
    f.add_argument("--sweep", type=_float_list, help="comma-separated learning rates; one log per rate")
    f.add_argument("--steps", type=int, default=300)
    f.add_argument("--batch", type=int, default=32)
    f.add_argument("--eval-every", type=int, default=25)
    f.add_argument("--val-fraction", type=float, default=0.2)
    f.add_argument("--schedule", choices=["cosine", "constant"], default="cosine")
    f.add_argument("--momentum", type=float, default=0.9)
    f.add_argument("--weight-decay", type=float, default=0.0)
    f.add_argument("--clip-norm", type=float, default=1.0)
    f.add_argument("--head-tap", choices=["block", "attention"], help="feature fed to the head")
    f.add_argument("--seed", type=int, default=0, help="batch order and head initialisation")
    f.add_argument("--data-seed", type=int, default=0, help="train/val/test split")
    f.add_argument("--no-checkpoint", action="store_true")
    f.add_argument("--figures", action="store_true")
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_finetune)

    r = sub.add_parser("report", help="summarise finetuning logs")
    r.add_argument("--logs", required=True, help="glob of training logs")
    r.add_argument("--probe-log", help="glob of linear-probing (HEAD) logs")
    r.add_argument("--wilcoxon", default="baseline=MHA")
    r.add_argument("--alpha", type=float, default=0.05)
    r.add_argument("--figures", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _threads():
            return args.func(args, argv)
    except UsageError as exc:
        print(f"vitplasticity {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

All paths are resolved against ``--workdir`` so a work directory can be
moved or archived as a unit. Layout::

    <workdir>/teacher.ckpt
    <workdir>/data/{train,eval}/manifest.txt, data/trials.txt
    <workdir>/runs/<name>/   one run directory per train invocation
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import shutil
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import trainer
from .checkpoint import CheckpointError, load_checkpoint
from .config import MODES, ConfigFileError, RunConfig, dump_config, load_config, parse_config
from .data import load_trials, read_corpus, save_trials, write_corpus
from .evaluation import compute_eer, format_eer_report, score_trials
from .init import init_student_from_teacher
from .model import ParameterStore, adapter_param_count, backbone_param_count, ssl_forward
from .speaker_head import extract_embedding

log = logging.getLogger("oskdft")

# Table-2 ablation arms in experiment order, then the remaining modes
ARM_ORDER = ("KDFT", "KDFT (AS param)", "OS-KDFT (AS)", "OS-KDFT (AS, LR)",
             "ft_only", "kd_then_freeze", "kdft_sequential", "tuned_teacher_kl")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing

def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(_path(args, args.config), cfg)
    overrides = "\n".join(args.set or [])
    if overrides:
        cfg = parse_config(overrides, "--set", cfg)
    if getattr(args, "mode", None):
        cfg = cfg.replace(mode=args.mode)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _run_name(cfg: RunConfig) -> str:
    slug = cfg.arm.lower().replace(" ", "").replace("(", "_").replace(")", "").replace(",", "_")
    if cfg.mode in ("kdft_sequential", "kd_then_freeze"):
        slug += f"_{cfg.kd_ft_ratio[0]}-{cfg.kd_ft_ratio[1]}"
    return f"{slug}_seed{cfg.seed}"


def _schedule_text(cfg: RunConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "phase", "lr_classifier", "lr_backbone", "lr_adapter"])
    epoch = 0
    for ph in trainer.plan_phases(cfg):
        for tau in range(1, ph.epochs + 1):
            epoch += 1
            lrs = trainer.phase_lrs(cfg, ph, tau)
            w.writerow([epoch, ph.name, repr(lrs["classifier"]), repr(lrs["backbone"]), repr(lrs["adapter"])])
    return buf.getvalue()


def _dry_run(cfg: RunConfig, out) -> int:
    out.write(dump_config(cfg))
    out.write("\n")
    out.write(_schedule_text(cfg))
    return 0


def _latest_store(path: Path) -> ParameterStore:
    """A checkpoint file, or the newest ``ckpt/epoch_<k>`` of a run directory."""
    if path.is_dir():
        k = trainer._latest_ckpt(path)
        if not k:
            raise CliError(f"{path}: no checkpoints found")
        path = trainer._ckpt_path(path, k)
    if not path.exists():
        raise CliError(f"{path} not found")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, out) -> int:
    cfg = _resolve_config(args)
    if args.dry_run:
        return _dry_run(cfg, out)
    root = _path(args, "data")
    if root.exists() and any(root.iterdir()):
        raise CliError(f"{root} already exists and is not empty")
    ds = trainer.build_dataset(cfg)
    write_corpus(ds.train, root / "train")
    write_corpus(ds.eval, root / "eval")
    save_trials(root / "trials.txt", ds.trials)
    (root / "config.txt").write_text(dump_config(cfg))
    out.write(f"train: {len(ds.train)} utterances, {len(ds.train.speakers)} speakers\n"
              f"eval: {len(ds.eval)} utterances, {len(ds.eval.speakers)} speakers\n"
              f"trials: {len(ds.trials)}\n")
    return 0


def cmd_pretrain_teacher(args, out) -> int:
    cfg = _resolve_config(args).replace(mode="teacher_pretrain")
    if args.dry_run:
        return _dry_run(cfg, out)
    target = _path(args, args.teacher)
    if target.exists():
        raise CliError(f"{target} already exists; remove it to pretrain a new teacher")
    run_dir = _path(args, Path("runs") / f"teacher_seed{cfg.seed}")
    rec = trainer.run(cfg, trainer.RunContext(cfg, run_dir), resume=args.resume)
    shutil.copyfile(run_dir / "teacher.ckpt", target)
    out.write(format_eer_report(rec.final)[0])
    return 0


def cmd_train(args, out) -> int:
    cfg = _resolve_config(args)
    if cfg.mode == "teacher_pretrain":
        raise CliError("use the pretrain-teacher command for mode teacher_pretrain")
    if args.dry_run:
        return _dry_run(cfg, out)
    run_dir = _path(args, Path("runs") / (args.name or _run_name(cfg)))
    ctx = trainer.RunContext(cfg, run_dir, teacher_path=_path(args, args.teacher))
    if cfg.mode != "ft_only":
        ctx.require_teacher()  # fail before creating the run directory
    rec = trainer.run(cfg, ctx, resume=args.resume)
    out.write(f"run directory: {run_dir}\n")
    out.write(format_eer_report(rec.final)[0])
    return 0


def cmd_evaluate(args, out) -> int:
    run_dir = _path(args, args.run)
    cfg = load_config(run_dir / "config.txt")
    store = _latest_store(run_dir).to(torch.float64 if cfg.dtype == "float64" else torch.float32)
    if args.manifest:
        corpus = read_corpus(_path(args, args.manifest))
    else:
        corpus = trainer.build_dataset(cfg).eval
    trials = load_trials(_path(args, args.trials)) if args.trials else trainer.build_dataset(cfg).trials
    if store.head is None:
        raise CliError(f"{run_dir}: checkpoint has no speaker head")
    use_adapters = store.has_adapters and trainer.step_spec(cfg, trainer.plan_phases(cfg)[-1]).use_adapters

    def embed(samples):
        return extract_embedding(samples, store.entries, store.config, store.head, store.n_layers,
                                 with_adapters=use_adapters)

    _, scores = score_trials(trials, corpus, embed, cfg.eval_segment_seconds, cfg.eval_segments)
    table, _ = format_eer_report({"run": str(args.run), "trials": len(trials), "eer": compute_eer(scores)})
    out.write(table)
    return 0


def _time_forwards(models: list[tuple[ParameterStore, int, bool]], x: torch.Tensor, warmup: int,
                   reps: int) -> list[list[float]]:
    """Per-model forward wall-clock (ms); models alternate each repetition so load drift hits all alike."""
    times = [[] for _ in models]
    with torch.no_grad():
        for i in range(warmup + reps):
            for (store, n_layers, adapters), ts in zip(models, times):
                t0 = time.perf_counter()
                ssl_forward(x, store.entries, store.config, n_layers, with_adapters=adapters)
                if i >= warmup:
                    ts.append((time.perf_counter() - t0) * 1e3)
    return times


def benchmark(teacher: ParameterStore, student: ParameterStore, seconds: float = 3.0, sample_rate: int = 4000,
              warmup: int = 10, reps: int = 100) -> dict:
    """Batch-1 encoder latency of teacher and student (ms) plus parameter accounting."""
    tc, sc = teacher.config, student.config
    for field in ("d_model", "n_heads", "ffn_mult", "cnn_strides"):
        if getattr(tc, field) != getattr(sc, field):
            raise CliError(f"checkpoint mismatch: teacher {field}={getattr(tc, field)}, "
                           f"student {field}={getattr(sc, field)}")
    dtype = next(iter(teacher.entries.values())).dtype
    student = student.to(dtype)
    x = torch.as_tensor(np.random.default_rng(0).standard_normal((1, int(seconds * sample_rate))), dtype=dtype)
    t_times, s_times = _time_forwards([(teacher, teacher.n_layers, False),
                                       (student, student.n_layers, student.has_adapters)], x, warmup, reps)
    student_params = student.num_params("cnn.*") + student.num_params("encoder.*")
    report = {
        "teacher_layers": teacher.n_layers,
        "student_layers": student.n_layers,
        "teacher_mean_ms": statistics.fmean(t_times),
        "teacher_std_ms": statistics.stdev(t_times),
        "student_mean_ms": statistics.fmean(s_times),
        "student_std_ms": statistics.stdev(s_times),
        "teacher_params": teacher.num_params("cnn.*") + teacher.num_params("encoder.*"),
        "student_params": student_params,
        "student_adapter_params": student_params + student.num_params("adapter.*"),
        "adapter_params": student.num_params("adapter.*"),
        "reps": reps,
        "warmup": warmup,
    }
    report["latency_ratio"] = report["student_mean_ms"] / report["teacher_mean_ms"]
    if student.has_adapters and report["adapter_params"] != adapter_param_count(sc):
        raise CliError("adapter parameter count disagrees with the configuration")
    if student_params != backbone_param_count(sc, "student"):
        raise CliError("student parameter count disagrees with the configuration")
    return report


def cmd_benchmark(args, out) -> int:
    cfg = _resolve_config(args)
    if args.dry_run:
        return _dry_run(cfg, out)
    teacher = _latest_store(_path(args, args.teacher))
    if args.student:
        student = _latest_store(_path(args, args.student))
    else:
        student_cfg = dataclasses.replace(teacher.config, n_layers_student=cfg.n_layers_student)
        student = init_student_from_teacher(teacher, student_cfg, cfg.seed)
    seconds = args.seconds if args.seconds is not None else cfg.eval_segment_seconds
    report = benchmark(teacher, student, seconds, cfg.sample_rate, args.warmup, args.reps)
    table, kv = format_eer_report({k: round(v, 4) if isinstance(v, float) else v for k, v in report.items()})
    out.write(table)
    if args.out:
        _path(args, args.out).write_text(kv)
    return 0


def _read_kv(path: Path) -> dict[str, str]:
    return dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)


def _label(cfg: RunConfig) -> str:
    if cfg.mode in ("kdft_sequential", "kd_then_freeze"):
        return f"{cfg.mode} {cfg.kd_ft_ratio[0]}:{cfg.kd_ft_ratio[1]}"
    return cfg.arm


def _order_key(label: str):
    base = label.split(" ")[0] if label.split(" ")[0] in ARM_ORDER else label
    rank = ARM_ORDER.index(base) if base in ARM_ORDER else len(ARM_ORDER)
    ratio = tuple(-int(p) for p in label.split(" ")[1].split(":")) if ":" in label else ()
    return rank, ratio, label


def compare(run_dirs: list[Path], latency: dict[str, str] | None = None) -> tuple[str, str]:
    """(text table, per-arm plot CSV) over completed run directories."""
    groups: dict[str, list[dict]] = {}
    skipped = []
    for d in run_dirs:
        if not (d / "eer.txt").exists() or not (d / "config.txt").exists():
            log.warning("skipping incomplete run directory %s", d)
            skipped.append(d.name)
            continue
        cfg = load_config(d / "config.txt")
        kv = _read_kv(d / "eer.txt")
        if "eer" not in kv:
            skipped.append(d.name)
            continue
        groups.setdefault(_label(cfg), []).append({"cfg": cfg, "eer": float(kv["eer"]),
                                                   "ssl_params": int(kv["ssl_params"])})
    labels = sorted(groups, key=_order_key)
    rows = []
    for label in labels:
        g = sorted(groups[label], key=lambda r: r["cfg"].seed)
        eers = [r["eer"] for r in g]
        std = statistics.pstdev(eers) if len(eers) > 1 else 0.0
        lat = latency.get("student_mean_ms", "-") if latency else "-"
        rows.append((label, g[0]["ssl_params"], statistics.fmean(eers), std, len(eers), lat, g[0]["cfg"]))
    header = ("mode", "params", "EER mean", "EER std", "seeds", "latency_ms")
    cells = [header] + [(r[0], str(r[1]), f"{100 * r[2]:.2f}%", f"{100 * r[3]:.2f}%", str(r[4]), str(r[5]))
                        for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = ["  ".join(c[i].ljust(widths[i]) for i in range(len(header))).rstrip() for c in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    if skipped:
        lines.append(f"skipped (incomplete): {', '.join(sorted(skipped))}")
    table = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "mode", "kd_ratio", "ft_ratio", "eer_mean", "eer_std", "n_seeds"])
    for label, _, mean, std, n, _, cfg in rows:
        kd, ft = cfg.kd_ft_ratio if cfg.mode in ("kdft_sequential", "kd_then_freeze") else ("", "")
        w.writerow([label, cfg.mode, kd, ft, repr(mean), repr(std), n])
    return table, buf.getvalue()


def cmd_compare(args, out) -> int:
    dirs = [_path(args, d) for d in args.runs]
    latency = _read_kv(_path(args, args.latency)) if args.latency else None
    table, plot = compare(dirs, latency)
    out.write(table)
    if args.csv:
        _path(args, args.csv).write_text(plot)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--workdir", default=".", help="root for every relative path (default: .)")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and schedule only")
    common.add_argument("--resume", action="store_true", help="continue an interrupted run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="oskdft", description="One-step distillation and fine-tuning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus and trial list")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain-teacher", parents=[common], help="masked-reconstruction teacher pretraining")
    s.add_argument("--teacher", default="teacher.ckpt", help="output checkpoint (default: teacher.ckpt)")
    s.set_defaults(func=cmd_pretrain_teacher)

    s = sub.add_parser("train", parents=[common], help="train one mode")
    s.add_argument("--mode", choices=[m for m in MODES if m != "teacher_pretrain"])
    s.add_argument("--teacher", default="teacher.ckpt")
    s.add_argument("--name", help="run directory name under runs/")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="score trials with a run's latest checkpoint")
    s.add_argument("run", help="run directory")
    s.add_argument("--trials", help="trial list (default: the run's synthetic trials)")
    s.add_argument("--manifest", help="evaluation corpus manifest (default: the run's synthetic eval set)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("benchmark", parents=[common], help="batch-1 encoder latency, teacher vs student")
    s.add_argument("--teacher", default="teacher.ckpt")
    s.add_argument("--student", help="student checkpoint or run directory (default: built from the teacher)")
    s.add_argument("--seconds", type=float, default=None, help="input length (default: eval_segment_seconds)")
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--out", help="also write the report as key=value")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("compare", parents=[common], help="tabulate completed runs")
    s.add_argument("runs", nargs="+", help="run directories")
    s.add_argument("--csv", help="write plot data here")
    s.add_argument("--latency", help="benchmark report (key=value) supplying the latency column")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, out)
    except (CliError, ConfigFileError, CheckpointError, trainer.MissingArtifactError,
            FileExistsError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"oskdft {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: train-teacher, synthesize, distill, eval, ablate, boundary.

Exit codes: 0 success, 1 runtime or numerical failure, 2 configuration or
usage error.  Any ``--section.key=value`` argument overrides the config file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, load_config
from .data import (
    LabeledDataset,
    export_decision_grid,
    gen_two_moons,
    load_checkpoint,
    load_mnist,
    load_synth,
    save_checkpoint,
    save_synth,
)
from .errors import CakeError, ConfigError
from .models import Network
from .synthesis import ExtractionConfig, SyntheticDataset, synthesize
from .training import Metrics, evaluate, train_classifier, train_student

log = logging.getLogger("cake")

# independent random streams derived from the run seed
DATA_STREAM, TEACHER_STREAM, STUDENT_STREAM = 0, 1, 2

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def stream(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), k])


def load_real(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Real (train, test) splits.  Two-moons is regenerated from the seed."""
    if cfg.dataset == "two_moons":
        rng = stream(cfg.seed, DATA_STREAM)
        train = gen_two_moons(cfg.n_train, cfg.noise_std, rng)
        return train, gen_two_moons(cfg.n_test, cfg.noise_std, rng, train.normalization)
    root = cfg.data_root() / "mnist"
    if not root.is_dir():
        raise FileNotFoundError(f"MNIST directory not found: {root} (set run.data_dir or $CAKE_DATA_DIR)")
    return load_mnist(root)


def _check_net(net: Network, cfg: RunConfig, what: str) -> Network:
    if tuple(net.input_shape) != cfg.input_shape or net.num_classes != cfg.num_classes:
        raise ConfigError(
            f"{what} takes {tuple(net.input_shape)} with {net.num_classes} classes, "
            f"dataset {cfg.dataset} needs {cfg.input_shape} with {cfg.num_classes}"
        )
    return net


def _write_report(path: Path, metrics: Metrics) -> Path:
    out = path.with_name(path.name + ".metrics.csv")
    out.write_text(metrics.report())
    return out


def _ensure_dir(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# pipeline steps, usable without the command line


def run_train_teacher(cfg: RunConfig, data: tuple[LabeledDataset, LabeledDataset] | None = None) -> tuple[Network, Metrics]:
    train, test = data if data is not None else load_real(cfg)
    net = cfg.teacher.build(cfg.input_shape, cfg.num_classes, stream(cfg.seed, TEACHER_STREAM))
    metrics = train_classifier(net, train, cfg.teacher_train, test)
    return net, metrics


def run_synthesize(cfg: RunConfig, teacher: Network, jobs: int = 1, extraction: ExtractionConfig | None = None) -> SyntheticDataset:
    return synthesize(_check_net(teacher, cfg, "teacher"), extraction or cfg.synthesis, cfg.seed, jobs=jobs)


def run_distill(cfg: RunConfig, teacher: Network, synth: SyntheticDataset, test: LabeledDataset) -> tuple[Network, Metrics]:
    if synth.num_classes != teacher.num_classes:
        raise ConfigError(f"synthetic data has {synth.num_classes} classes, teacher has {teacher.num_classes}")
    student = cfg.student.build(cfg.input_shape, cfg.num_classes, stream(cfg.seed, STUDENT_STREAM))
    metrics = train_student(student, teacher, synth, cfg.student_train, cfg.weights, test)
    return student, metrics


ROW_NAMES = ("baseline", "+KD", "+contr", "+KD+contr", "+KD+contr+TV")


def ablation_rows(cfg: RunConfig) -> list[tuple[str, ExtractionConfig]]:
    """Loss-term combinations from cross-entropy only up to the full loss.

    The TV row is only produced for image inputs.
    """
    base = cfg.synthesis
    w = base.weights
    rows = []
    for name in ROW_NAMES:
        kd = "KD" in name
        contr = "contr" in name
        tv = "TV" in name
        if tv and len(cfg.input_shape) != 3:
            continue
        weights = w.replace(
            tau_synth=w.tau_synth if kd else 1.0,
            lambda_contr=w.lambda_contr if contr else 0.0,
            lambda_tv=w.lambda_tv if tv else 0.0,
        )
        decay = 0.0 if name == "baseline" and cfg.baseline_fixed_step else base.decay_decades
        rows.append((name, replace(base, weights=weights, decay_decades=decay)))
    return rows


def run_ablation(
    cfg: RunConfig, jobs: int = 1, rows: Sequence[str] | None = None
) -> tuple[dict[str, list[float]], list[float]]:
    """Student accuracy per row and seed, plus the teacher accuracy per seed.

    ``rows`` restricts the run to a subset of :data:`ROW_NAMES`.
    """
    results: dict[str, list[float]] = {}
    teacher_accs: list[float] = []
    shared = _check_net(load_checkpoint(cfg.path("teacher")), cfg, "teacher") if cfg.reuse_teacher else None
    for seed in cfg.ablate_seeds:
        c = cfg.with_seed(seed)
        train, test = load_real(c)
        teacher = shared if shared is not None else run_train_teacher(c, (train, test))[0]
        teacher_accs.append(evaluate(teacher, test))
        log.info("seed %d: teacher test accuracy %.4f", seed, teacher_accs[-1])
        for name, ext in ablation_rows(c):
            if rows is not None and name not in rows:
                continue
            synth = run_synthesize(c, teacher, jobs, ext)
            _, m = run_distill(c, teacher, synth, test)
            results.setdefault(name, []).append(float(m.final_test_acc))
            log.info("seed %d %-14s student accuracy %.4f", seed, name, m.final_test_acc)
    return results, teacher_accs


def summarize(results: dict[str, list[float]]) -> list[tuple[str, float, float, list[float]]]:
    """(row, mean, std, per-seed); std is the sample deviation, 0 for one seed."""
    out = []
    for name, accs in results.items():
        a = np.asarray(accs)
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        out.append((name, float(a.mean()), std, list(accs)))
    return out


def ablation_table(summary) -> str:
    width = max(len("loss terms"), *(len(r[0]) for r in summary))
    lines = [f"{'loss terms':<{width}}  {'mean':>7}  {'std':>7}  seeds"]
    for name, mean, std, accs in summary:
        lines.append(f"{name:<{width}}  {mean:7.4f}  {std:7.4f}  " + " ".join(f"{a:.4f}" for a in accs))
    return "\n".join(lines) + "\n"


def ablation_csv(summary) -> str:
    lines = ["row,mean,std,accuracies"]
    for name, mean, std, accs in summary:
        lines.append(f"{name},{mean:.6f},{std:.6f}," + ";".join(f"{a:.6f}" for a in accs))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(cfg: RunConfig, args) -> None:
    net, metrics = run_train_teacher(cfg)
    path = _ensure_dir(cfg.path("teacher"))
    save_checkpoint(net, path)
    report = _write_report(path, metrics)
    print(f"teacher test accuracy {metrics.final_test_acc:.4f}  checkpoint {path}  report {report}")


def cmd_synthesize(cfg: RunConfig, args) -> None:
    teacher = load_checkpoint(cfg.path("teacher"))
    synth = run_synthesize(cfg, teacher, args.jobs)
    path = _ensure_dir(cfg.path("synth"))
    save_synth(synth, path)
    print(f"{len(synth)} synthetic samples ({synth.minibatches} x {synth.batch_size})  written to {path}")


def cmd_distill(cfg: RunConfig, args) -> None:
    teacher = _check_net(load_checkpoint(cfg.path("teacher")), cfg, "teacher")
    synth = load_synth(cfg.path("synth"))
    _, test = load_real(cfg)
    student, metrics = run_distill(cfg, teacher, synth, test)
    path = _ensure_dir(cfg.path("student"))
    save_checkpoint(student, path)
    report = _write_report(path, metrics)
    print(f"student test accuracy {metrics.final_test_acc:.4f}  checkpoint {path}  report {report}")


def cmd_eval(cfg: RunConfig, args) -> None:
    path = Path(args.checkpoint) if args.checkpoint else cfg.path("teacher")
    net = _check_net(load_checkpoint(path), cfg, str(path))
    _, test = load_real(cfg)
    print(f"{path}: test accuracy {evaluate(net, test):.4f} on {len(test)} samples")


def cmd_ablate(cfg: RunConfig, args) -> None:
    results, teacher_accs = run_ablation(cfg, args.jobs)
    summary = summarize(results)
    table = ablation_table(summary)
    table += f"teacher mean test accuracy {np.mean(teacher_accs):.4f}\n"
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.csv").write_text(ablation_csv(summary))
    print(table, end="")
    print(f"written to {out / 'ablation.txt'} and {out / 'ablation.csv'}")


def cmd_boundary(cfg: RunConfig, args) -> None:
    paths = [Path(p) for p in args.checkpoint] or [cfg.path("teacher"), cfg.path("student")]
    for p in paths:
        if not p.exists() and not args.checkpoint and p == cfg.path("student"):
            continue
        net = load_checkpoint(p)
        out = p.with_name(p.name + ".grid.csv")
        export_decision_grid(net, cfg.bounds, cfg.resolution, out)
        print(f"{cfg.resolution}x{cfg.resolution} grid for {p} written to {out}")


COMMANDS = {
    "train-teacher": (cmd_train_teacher, "train the teacher on real data and save a checkpoint"),
    "synthesize": (cmd_synthesize, "extract synthetic samples from the teacher"),
    "distill": (cmd_distill, "train the student on synthetic samples, score it on real test data"),
    "eval": (cmd_eval, "test accuracy of a checkpoint"),
    "ablate": (cmd_ablate, "student accuracy per loss-term combination over several seeds"),
    "boundary": (cmd_boundary, "decision grid CSV for 2-D checkpoints"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cake", description=__doc__.splitlines()[0])
    p.add_argument("-c", "--config", help="INI run config (defaults apply when omitted)")
    p.add_argument("-j", "--jobs", type=int, default=1, help="threads for synthesis mini-batches")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and results")
    p.add_argument("--print-config", action="store_true", help="print the resolved config before running")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        if name in ("eval", "boundary"):
            nargs = "?" if name == "eval" else "*"
            sp.add_argument("checkpoint", nargs=nargs, default=None if name == "eval" else [])
    return p


def parse_args(argv: Sequence[str]) -> tuple[argparse.Namespace, list[str]]:
    args, rest = build_parser().parse_known_args(argv)
    overrides, bad = [], []
    for a in rest:
        (overrides if a.startswith("--") and "." in a.split("=", 1)[0] and "=" in a else bad).append(a)
    if bad:
        raise UsageError(f"unrecognized arguments: {' '.join(bad)}")
    if args.jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {args.jobs}")
    return args, overrides


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, overrides = parse_args(argv)
        cfg = load_config(args.config, overrides)
    except (UsageError, ConfigError) as e:
        print(f"cake: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr, force=True
    )
    if args.print_config:
        print(cfg.to_ini())
    try:
        COMMANDS[args.command][0](cfg, args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"cake: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CakeError, OSError, ArithmeticError) as e:
        print(f"cake: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

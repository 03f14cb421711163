"""Command-line front end.

Commands:
  simulate   run episodes with no defense attached
  defend     run episodes with the detect-and-prune pipeline
  train      pre-fit the detector on a clean stream, save a checkpoint
  metrics    recompute a metrics report from exported episode JSONs
  export     convert an episode JSON into a graph export (json or dot)

Flags override config-file values; config-file keys mirror the
ExperimentConfig field names.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .detector import save_checkpoint
from .harness import (
    ExperimentConfig,
    HarnessError,
    compute_metrics,
    episode_from_json,
    export_episode_graph,
    metrics_csv,
    parse_config_file,
    run_experiment,
)

__all__ = ["main"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--agents", type=int, default=None, dest="n_agents")
    p.add_argument("--rounds", type=int, default=None, dest="max_rounds")
    p.add_argument("--min-rounds", type=int, default=None, dest="min_rounds")
    p.add_argument("--topology", type=float, default=None, choices=[0.25, 0.5, 0.75, 1.0])
    p.add_argument(
        "--attack", default=None, choices=["none", "hallucination", "agent", "comm"]
    )
    p.add_argument("--variant", default=None, choices=["temporal", "static"])
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--tasks", type=int, default=None, dest="n_tasks")
    p.add_argument("--corpus", default=None, help="TSV task corpus path")
    p.add_argument("--timing", action="store_const", const=True, default=None)
    p.add_argument("--out", type=Path, default=None, help="artifact output directory")


def _config_from_args(args: argparse.Namespace, defense: bool) -> ExperimentConfig:
    file_kv = parse_config_file(args.config) if args.config else None
    overrides = {
        "seed": args.seed,
        "n_agents": args.n_agents,
        "max_rounds": args.max_rounds,
        "min_rounds": args.min_rounds,
        "topology": args.topology,
        "attack": args.attack,
        "variant": args.variant,
        "trials": args.trials,
        "n_tasks": args.n_tasks,
        "corpus": args.corpus,
        "timing": args.timing,
    }
    cfg = ExperimentConfig.from_sources(file_kv, **overrides)
    cfg.defense = defense
    return cfg


def _report_lines(cfg: ExperimentConfig, report) -> str:
    def show(v):
        return "n/a" if v is None else f"{v:.4f}"

    return (
        f"episodes: {cfg.trials} trial(s) x corpus\n"
        f"accuracy:        {show(report.accuracy)}\n"
        f"detection_rate:  {show(report.detection_rate)}\n"
        f"fdr:             {show(report.fdr)}\n"
        f"api_calls_mean:  {show(report.api_calls_mean)}\n"
        f"runtime_seconds: {report.runtime_seconds:.3f}\n"
    )


def _cmd_run(args: argparse.Namespace, defense: bool) -> int:
    cfg = _config_from_args(args, defense=defense)
    report, _ = run_experiment(cfg, out_dir=args.out)
    sys.stdout.write(_report_lines(cfg, report))
    if args.out:
        sys.stdout.write(f"artifacts written to {args.out}\n")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    from .harness import build_pipeline, make_corpus, load_corpus
    from .pipeline import run_stream
    from .seeding import derive_seed
    from .simulator import AgentSpec, AttackPlan, run_episode

    cfg = _config_from_args(args, defense=True)
    cfg.attack = "none"
    tasks = load_corpus(cfg.corpus) if cfg.corpus else make_corpus(cfg.n_tasks, cfg.seed)
    stream_seed = derive_seed(cfg.seed, "trial", 0)
    state = build_pipeline(cfg, stream_seed)
    specs = [
        AgentSpec(id=i, p_correct=cfg.p_correct, p_follow=cfg.p_follow)
        for i in range(cfg.n_agents)
    ]
    plan = AttackPlan(kind="none", seed=derive_seed(stream_seed, "attack"))

    def _run(task, st):
        return run_episode(
            task,
            specs,
            cfg.topology,
            plan,
            pipeline=st,
            max_rounds=cfg.max_rounds,
            min_rounds=cfg.min_rounds,
            seed=derive_seed(stream_seed, "episode", task.id),
        )

    run_stream(state, tasks, _run)
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "guardian.ckpt"
    save_checkpoint(ckpt, state.det_cfg, state.params)
    sys.stdout.write(f"trained on {len(tasks)} clean episode(s); checkpoint: {ckpt}\n")
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args, defense=True)
    logs_dir = Path(args.logs)
    paths = sorted(logs_dir.glob("*.json"))
    if not paths:
        raise HarnessError(f"no episode JSON files under {logs_dir}")
    logs = [episode_from_json(p.read_text()) for p in paths]
    report = compute_metrics(
        logs, decay=cfg.decay, decay_lambda=cfg.decay_lambda, pooling=cfg.pooling
    )
    sys.stdout.write(_report_lines(cfg, report))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.csv").write_text(metrics_csv(cfg, report))
        sys.stdout.write(f"metrics written to {args.out / 'metrics.csv'}\n")
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    log = episode_from_json(Path(args.episode).read_text())
    rendered = export_episode_graph(log, fmt=args.format)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        target = args.out / f"{Path(args.episode).stem}.{args.format}"
        target.write_text(rendered)
        sys.stdout.write(f"graph written to {target}\n")
    else:
        sys.stdout.write(rendered)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="guardian", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (
        ("simulate", "run episodes without a defense"),
        ("defend", "run episodes with detection and pruning"),
        ("train", "pre-fit the detector on a clean stream"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_common(p)

    p_metrics = sub.add_parser("metrics", help="recompute metrics from episode logs")
    _add_common(p_metrics)
    p_metrics.add_argument("--logs", required=True, help="directory of episode JSON files")

    p_export = sub.add_parser("export", help="episode JSON -> graph export")
    p_export.add_argument("--episode", required=True, help="episode JSON file")
    p_export.add_argument("--format", default="json", choices=["json", "dot"])
    p_export.add_argument("--out", type=Path, default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_run(args, defense=False)
        if args.command == "defend":
            return _cmd_run(args, defense=True)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "metrics":
            return _cmd_metrics(args)
        if args.command == "export":
            return _cmd_export(args)
    except HarnessError as err:
        sys.stderr.write(f"error: {err}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands:
  validate   structural/budget checks over a trajectory corpus
  schedule   print a per-epoch subtask schedule
  emit       write per-role, per-epoch training JSONL files
  metrics    goal-completion rates and error-rate tables from run logs
  stats      token statistics from run logs
  pareto     cost/effectiveness points and the Pareto front
  convert    single-agent to multi-agent conversion through a chat endpoint

Every subcommand prints a machine-readable JSON report to stdout and
human-readable tables to stderr. Exit codes: 0 success, 1 findings
(validation/verification failures), 2 input or usage errors, 3 endpoint
failures. Options may also come from a JSON config file (``--config``);
explicit flags win, and paths in the file resolve relative to its
location.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .cost import (
    EmptyPointSet,
    UnknownAgent,
    aggregate_flops,
    cost_point_from_dict,
    cost_point_to_dict,
    format_flops,
    pareto_front,
    system_config_from_dict,
    CostPoint,
)
from .curriculum import (
    MissingSeed,
    Strategy,
    build_schedule,
    schedule_lines,
    schedule_to_dict,
)
from .masking import EmissionError, HistoryMode, emit_epoch_datasets, manifest_to_dict
from .metrics import (
    EmptyRunSet,
    RunLogError,
    error_rate_table_to_dicts,
    inference_error_rates,
    load_run_records,
    sgc,
    tgc,
    token_stats,
)
from .synthesis import (
    EndpointError,
    TemplateError,
    convert_corpus,
    endpoint_config_from_dict,
    parse_single_agent_trajectory,
    verify_step_preservation,
)
from .trajectory import (
    Budgets,
    PatternError,
    SchemaError,
    SubtaskKind,
    classify_steps,
    classify_subtasks,
    load_error_patterns,
    parse_trajectory,
    serialize_trajectory,
    validate_trajectory,
)

log = logging.getLogger(__name__)

KIND_ALIASES = {
    "ts": SubtaskKind.TASK_SPECIFIC,
    "other": SubtaskKind.OTHER_NON_TASK_SPECIFIC,
}

DEFAULTS = {
    "epochs": 5,
    "strategy": "ours",
    "max_subtasks": 12,
    "max_steps_per_subtask": 15,
    "min_successful": 5,
    "history_mode": "full_task",
}


class _Parser(argparse.ArgumentParser):
    # usage errors must print help and exit 2
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _emit_report(report: dict) -> None:
    print(json.dumps(report, ensure_ascii=False, indent=2, sort_keys=True))


def _table(headers: list[str], rows: list[list], title: str | None = None) -> None:
    out = sys.stderr
    if title:
        print(title, file=out)
    cells = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    for i, row in enumerate(cells):
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)), file=out)
        if i == 0:
            print("  ".join("-" * w for w in widths), file=out)


def _load_config(path: str | None) -> tuple[dict, Path | None]:
    if not path:
        return {}, None
    config_path = Path(path)
    config = json.loads(config_path.read_text(encoding="utf-8"))
    if not isinstance(config, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return config, config_path.parent


def _cfg_path(config: dict, base: Path | None, key: str):
    value = config.get(key)
    if value is None:
        return None
    resolved = Path(value)
    if base is not None and not resolved.is_absolute():
        resolved = base / resolved
    return resolved


def _pick(flag_value, config: dict, key: str, default=None):
    if flag_value is not None:
        return flag_value
    if config.get(key) is not None:
        return config[key]
    return DEFAULTS.get(key, default)


def _budgets(args, config: dict) -> Budgets:
    raw = config.get("budgets", {})
    max_subtasks = _pick(args.max_subtasks, raw, "max_subtasks")
    max_steps = _pick(args.max_steps, raw, "max_steps_per_subtask")
    return Budgets(
        max_subtasks=None if max_subtasks in (None, 0) else int(max_subtasks),
        max_steps_per_subtask=None if max_steps in (None, 0) else int(max_steps),
    )


def _corpus_files(corpus: Path) -> list[Path]:
    if corpus.is_dir():
        files = sorted(corpus.glob("*.json"))
        if not files:
            raise FileNotFoundError(f"no *.json trajectory files in {corpus}")
        return files
    if corpus.is_file():
        return [corpus]
    raise FileNotFoundError(f"corpus path {corpus} does not exist")


def _parse_kinds(text: str) -> list[SubtaskKind]:
    kinds = []
    for token in text.split(","):
        token = token.strip()
        if token in KIND_ALIASES:
            kinds.append(KIND_ALIASES[token])
        else:
            try:
                kinds.append(SubtaskKind(token))
            except ValueError:
                allowed = sorted(
                    list(KIND_ALIASES) + [k.value for k in SubtaskKind]
                )
                raise ValueError(
                    f"unknown subtask kind {token!r}; use one of {allowed}"
                ) from None
    return kinds


def _default_kinds(m: int) -> list[SubtaskKind]:
    if m == 1:
        return [SubtaskKind.COMPLETION]
    return (
        [SubtaskKind.LOGIN]
        + [SubtaskKind.TASK_SPECIFIC] * (m - 2)
        + [SubtaskKind.COMPLETION]
    )


def cmd_validate(args) -> int:
    config, base = _load_config(args.config)
    budgets = _budgets(args, config)
    corpus = Path(args.corpus) if args.corpus else _cfg_path(config, base, "corpus_dir")
    if corpus is None:
        raise ValueError("no corpus given (positional argument or config corpus_dir)")
    entries = []
    all_ok = True
    for path in _corpus_files(Path(corpus)):
        try:
            t = parse_trajectory(path.read_text(encoding="utf-8"))
            report = validate_trajectory(t, budgets)
            violations = [
                {
                    "code": v.code,
                    "subtask": v.subtask,
                    "step": v.step,
                    "message": v.message,
                }
                for v in report.violations
            ]
            entries.append(
                {"path": str(path), "ok": report.ok, "violations": violations}
            )
            all_ok = all_ok and report.ok
        except SchemaError as exc:
            entries.append(
                {
                    "path": str(path),
                    "ok": False,
                    "violations": [
                        {
                            "code": "SCHEMA_ERROR",
                            "subtask": None,
                            "step": None,
                            "message": str(exc),
                        }
                    ],
                }
            )
            all_ok = False
    _emit_report({"command": "validate", "ok": all_ok, "files": entries})
    _table(
        ["file", "ok", "findings"],
        [
            [Path(e["path"]).name, e["ok"], len(e["violations"])]
            for e in entries
        ],
        title="validation findings",
    )
    return 0 if all_ok else 1


def cmd_schedule(args) -> int:
    config, _ = _load_config(args.config)
    epochs = int(_pick(args.epochs, config, "epochs"))
    strategy = _pick(args.strategy, config, "strategy")
    seed = _pick(args.seed, config, "seed")
    if args.kinds:
        kinds = _parse_kinds(args.kinds)
        if args.subtasks is not None and args.subtasks != len(kinds):
            raise ValueError(
                f"--subtasks {args.subtasks} does not match {len(kinds)} kinds"
            )
    elif args.subtasks is not None:
        kinds = _default_kinds(args.subtasks)
    else:
        raise ValueError("give --kinds and/or --subtasks")
    schedule = build_schedule(
        strategy, kinds, epochs, seed=None if seed is None else int(seed)
    )
    _emit_report({"command": "schedule", **schedule_to_dict(schedule)})
    for line in schedule_lines(schedule):
        print(line, file=sys.stderr)
    return 0


def cmd_emit(args) -> int:
    config, base = _load_config(args.config)
    corpus_dir = Path(args.corpus) if args.corpus else _cfg_path(config, base, "corpus_dir")
    out_dir = Path(args.out) if args.out else _cfg_path(config, base, "output_dir")
    if corpus_dir is None or out_dir is None:
        raise ValueError("emit needs --corpus and --out (or config equivalents)")
    strategy = _pick(args.strategy, config, "strategy")
    epochs = int(_pick(args.epochs, config, "epochs"))
    seed = _pick(args.seed, config, "seed")
    history_mode = _pick(args.history_mode, config, "history_mode")
    pattern_path = (
        Path(args.error_patterns)
        if args.error_patterns
        else _cfg_path(config, base, "error_pattern_file")
    )
    patterns = load_error_patterns(pattern_path) if pattern_path else None
    corpus = []
    for path in _corpus_files(Path(corpus_dir)):
        t = parse_trajectory(path.read_text(encoding="utf-8"))
        t = classify_steps(t, patterns)
        t = classify_subtasks(t)
        corpus.append(t)
    manifest = emit_epoch_datasets(
        corpus,
        strategy,
        epochs,
        out_dir,
        seed=None if seed is None else int(seed),
        history_mode=history_mode,
        trainer_metadata=config.get("trainer_metadata"),
    )
    _emit_report({"command": "emit", **manifest_to_dict(manifest)})
    _table(
        ["role"] + [f"epoch{e}" for e in range(manifest.epochs)],
        [
            [role, *counts]
            for role, counts in manifest.record_counts.items()
        ],
        title=f"records emitted to {out_dir}",
    )
    return 0


def cmd_metrics(args) -> int:
    config, base = _load_config(args.config)
    runs = Path(args.runs) if args.runs else _cfg_path(config, base, "runs")
    if runs is None:
        raise ValueError("metrics needs --runs")
    min_successful = int(_pick(args.min_successful, config, "min_successful"))
    records = load_run_records(runs)
    if not records:
        raise EmptyRunSet(f"run log {runs} is empty")
    table = inference_error_rates(records, min_successful)
    report = {
        "command": "metrics",
        "records": len(records),
        "tgc_percent": tgc(records),
        "sgc_percent": sgc(records),
        "min_successful": min_successful,
        "inference_error_rates": error_rate_table_to_dicts(table),
    }
    _emit_report(report)
    _table(
        ["metric", "value"],
        [["TGC %", report["tgc_percent"]], ["SGC %", report["sgc_percent"]]],
        title=f"goal completion over {len(records)} records",
    )
    _table(
        ["position", "errors", "reached", "rate %"],
        [[r.position, r.numerator, r.denominator, r.rate_percent] for r in table.rows],
        title="error rates (successful runs)",
    )
    return 0


def cmd_stats(args) -> int:
    config, base = _load_config(args.config)
    runs = Path(args.runs) if args.runs else _cfg_path(config, base, "runs")
    if runs is None:
        raise ValueError("stats needs --runs")
    records = load_run_records(runs)
    if not records:
        raise EmptyRunSet(f"run log {runs} is empty")
    stats = token_stats(records)
    report = {
        "command": "stats",
        "records": len(records),
        "success_mean": stats.success_mean,
        "success_variance": stats.success_variance,
        "failure_mean": stats.failure_mean,
        "failure_variance": stats.failure_variance,
        "success_token_ratio_percent": stats.success_token_ratio_percent,
    }
    _emit_report(report)
    _table(
        ["partition", "mean tokens", "variance"],
        [
            ["success", stats.success_mean, stats.success_variance],
            ["failure", stats.failure_mean, stats.failure_variance],
        ],
        title=f"token stats ({stats.success_token_ratio_percent}% of tokens on successes)",
    )
    return 0


def _pareto_points(args, config: dict, base: Path | None) -> list[CostPoint]:
    if args.points:
        raw = json.loads(Path(args.points).read_text(encoding="utf-8"))
        if not isinstance(raw, list):
            raise ValueError("points file must hold a JSON list")
        return [cost_point_from_dict(obj) for obj in raw]
    if not args.runs or not args.system_config:
        raise ValueError("pareto needs --points, or --runs with --system-config")
    run_paths = [Path(p.strip()) for p in args.runs.split(",") if p.strip()]
    raw = json.loads(Path(args.system_config).read_text(encoding="utf-8"))
    systems = [system_config_from_dict(obj) for obj in raw.get("systems", [])]
    if len(systems) != len(run_paths):
        raise ValueError(
            f"{len(run_paths)} run files but {len(systems)} systems in config; "
            "they are matched by position"
        )
    points = []
    for path, system in zip(run_paths, systems):
        records = load_run_records(path)
        if not records:
            raise EmptyRunSet(f"run log {path} is empty")
        points.append(
            CostPoint(
                system_id=system.system_id,
                mean_flops_per_task=aggregate_flops(records, system),
                tgc_percent=tgc(records),
                sgc_percent=sgc(records),
            )
        )
    return points


def cmd_pareto(args) -> int:
    config, base = _load_config(args.config)
    points = _pareto_points(args, config, base)
    front = pareto_front(points, args.effectiveness)
    front_ids = {p.system_id for p in front}
    rows = [
        {**cost_point_to_dict(p), "on_front": p.system_id in front_ids,
         "flops_label": format_flops(p.mean_flops_per_task)}
        for p in sorted(points, key=lambda p: (p.mean_flops_per_task, p.system_id))
    ]
    report = {
        "command": "pareto",
        "effectiveness": args.effectiveness,
        "points": rows,
        "front": [p.system_id for p in front],
    }
    _emit_report(report)
    _table(
        ["system", "mean FLOPs", "TGC %", "SGC %", "front"],
        [
            [r["system_id"], r["flops_label"], r["tgc_percent"], r["sgc_percent"],
             "*" if r["on_front"] else ""]
            for r in rows
        ],
        title=f"pareto front by {args.effectiveness}",
    )
    if args.csv:
        lines = ["system_id,mean_flops_per_task,tgc_percent,sgc_percent,on_front"]
        for r in rows:
            lines.append(
                f"{r['system_id']},{r['mean_flops_per_task']},"
                f"{r['tgc_percent']},{r['sgc_percent']},{str(r['on_front']).lower()}"
            )
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_convert(args) -> int:
    config, base = _load_config(args.config)
    in_dir = Path(args.in_dir) if args.in_dir else _cfg_path(config, base, "corpus_dir")
    out_dir = Path(args.out) if args.out else _cfg_path(config, base, "output_dir")
    endpoint_path = (
        Path(args.endpoint_config)
        if args.endpoint_config
        else _cfg_path(config, base, "endpoint_config")
    )
    if in_dir is None or out_dir is None or endpoint_path is None:
        raise ValueError("convert needs --in, --out and --endpoint-config")
    if not args.exemplar:
        raise ValueError("convert needs --exemplar")
    endpoint_config = endpoint_config_from_dict(
        json.loads(endpoint_path.read_text(encoding="utf-8"))
    )
    exemplar = Path(args.exemplar).read_text(encoding="utf-8")
    template = (
        Path(args.template).read_text(encoding="utf-8") if args.template else None
    )
    sources = [
        parse_single_agent_trajectory(path.read_text(encoding="utf-8"))
        for path in _corpus_files(in_dir)
    ]
    out_dir.mkdir(parents=True, exist_ok=True)
    outcomes = convert_corpus(
        sources,
        endpoint_config,
        exemplar,
        template=template,
        audit_dir=out_dir / "audit",
    )
    results = []
    endpoint_failures = 0
    conversion_failures = 0
    preservation_failures = 0
    for source, outcome in zip(sources, outcomes):
        entry: dict = {"task_id": outcome.task_id}
        if outcome.trajectory is not None:
            target = out_dir / f"{outcome.task_id or 'unnamed'}.json"
            with open(target, "w", encoding="utf-8", newline="") as handle:
                handle.write(serialize_trajectory(outcome.trajectory))
            preservation = verify_step_preservation(source, outcome.trajectory)
            if not preservation.ok:
                preservation_failures += 1
            entry.update(
                {
                    "ok": preservation.ok,
                    "path": str(target),
                    "preserved": preservation.ok,
                    "mismatch_index": preservation.mismatch_index,
                    "message": preservation.message,
                }
            )
        else:
            if outcome.error_kind == "endpoint":
                endpoint_failures += 1
            else:
                conversion_failures += 1
            entry.update(
                {"ok": False, "error": outcome.error, "error_kind": outcome.error_kind}
            )
        results.append(entry)
    report = {
        "command": "convert",
        "converted": sum(1 for r in results if r.get("path")),
        "endpoint_failures": endpoint_failures,
        "conversion_failures": conversion_failures,
        "preservation_failures": preservation_failures,
        "results": results,
    }
    _emit_report(report)
    _table(
        ["task", "ok", "detail"],
        [
            [r["task_id"], r["ok"], r.get("error") or r.get("message") or ""]
            for r in results
        ],
        title="conversion outcomes",
    )
    if endpoint_failures:
        return 3
    if conversion_failures or preservation_failures:
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="prosub",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"prosub {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("validate", help="check a trajectory corpus")
    p.add_argument("corpus", nargs="?", help="corpus directory or single file")
    p.add_argument("--max-subtasks", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None,
                   help="max executor steps per subtask")
    add_common(p)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("schedule", help="print a per-epoch subtask schedule")
    p.add_argument("--subtasks", type=int, default=None, help="subtask count M")
    p.add_argument("--kinds", default=None,
                   help="comma list: login,ts,...,completion")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=None)
    p.add_argument("--seed", type=int, default=None)
    add_common(p)
    p.set_defaults(handler=cmd_schedule)

    p = sub.add_parser("emit", help="write per-role per-epoch training files")
    p.add_argument("--corpus", default=None, help="trajectory corpus directory")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--history-mode", choices=[m.value for m in HistoryMode],
                   default=None)
    p.add_argument("--error-patterns", default=None, help="pattern file")
    add_common(p)
    p.set_defaults(handler=cmd_emit)

    p = sub.add_parser("metrics", help="goal completion and error rates")
    p.add_argument("--runs", default=None, help="run-log JSONL file")
    p.add_argument("--min-successful", type=int, default=None)
    add_common(p)
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("stats", help="token statistics from run logs")
    p.add_argument("--runs", default=None, help="run-log JSONL file")
    add_common(p)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("pareto", help="cost points and the Pareto front")
    p.add_argument("--points", default=None, help="JSON file of precomputed points")
    p.add_argument("--runs", default=None, help="comma list of run-log files")
    p.add_argument("--system-config", default=None,
                   help="JSON file describing the systems behind --runs")
    p.add_argument("--effectiveness", choices=["tgc", "sgc"], default="tgc")
    p.add_argument("--csv", default=None, help="also write points as CSV")
    add_common(p)
    p.set_defaults(handler=cmd_pareto)

    p = sub.add_parser("convert", help="convert single-agent trajectories")
    p.add_argument("--in", dest="in_dir", default=None,
                   help="directory of single-agent trajectory JSON files")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--endpoint-config", default=None, help="endpoint JSON config")
    p.add_argument("--exemplar", default=None, help="worked-example file")
    p.add_argument("--template", default=None, help="custom prompt template file")
    add_common(p)
    p.set_defaults(handler=cmd_convert)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return 3
    except (
        SchemaError,
        PatternError,
        RunLogError,
        EmptyRunSet,
        EmptyPointSet,
        UnknownAgent,
        MissingSeed,
        TemplateError,
        EmissionError,
        json.JSONDecodeError,
        FileNotFoundError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Effectiveness metrics over evaluated run logs.

Task goal completion (share of passing tasks), scenario goal completion
(share of scenarios whose every task passes), per-subtask-position error
rates in both the inference and training-corpus variants, and token
statistics split by outcome. Percentages are reported to one decimal,
rounded half away from zero.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .trajectory import StepStatus, Trajectory


class EmptyRunSet(ValueError):
    pass


class RunLogError(ValueError):
    """A run-log line does not match the record schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class AgentCall:
    tokens_in: int
    tokens_out: int


@dataclass(frozen=True)
class AgentUsage:
    name: str
    params_billions: float
    calls: tuple[AgentCall, ...]


@dataclass(frozen=True)
class TraceEntry:
    position: int
    error_count: int


@dataclass(frozen=True)
class RunRecord:
    task_id: str
    scenario_id: str
    passed: bool
    agents: tuple[AgentUsage, ...]
    subtask_trace: tuple[TraceEntry, ...]
    max_position_reached: int


@dataclass(frozen=True)
class ErrorRateRow:
    position: int
    numerator: int
    denominator: int
    rate_percent: float


@dataclass(frozen=True)
class ErrorRateTable:
    rows: tuple[ErrorRateRow, ...]

    def rate_at(self, position: int) -> float | None:
        for row in self.rows:
            if row.position == position:
                return row.rate_percent
        return None


@dataclass(frozen=True)
class TokenStats:
    success_mean: float | None
    success_variance: float | None
    failure_mean: float | None
    failure_variance: float | None
    success_token_ratio_percent: float


def round1(value: float) -> float:
    """One decimal place, half away from zero (42.35 -> 42.4)."""
    return float(Decimal(repr(value)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _parse_record(obj: dict, line: int | None = None) -> RunRecord:
    def fail(message: str):
        raise RunLogError(message, line)

    for key in ("task_id", "scenario_id", "passed"):
        if key not in obj:
            fail(f"missing required key '{key}'")
    agents = []
    for agent in obj.get("agents", []):
        calls = []
        for call in agent.get("calls", []):
            tokens_in = int(call.get("tokens_in", 0))
            tokens_out = int(call.get("tokens_out", 0))
            if tokens_in < 0 or tokens_out < 0:
                fail("negative token count")
            calls.append(AgentCall(tokens_in=tokens_in, tokens_out=tokens_out))
        agents.append(
            AgentUsage(
                name=str(agent.get("name", "")),
                params_billions=float(agent.get("params_billions", 0.0)),
                calls=tuple(calls),
            )
        )
    max_position = int(obj.get("max_position_reached", 0))
    trace = tuple(
        TraceEntry(position=int(e["position"]), error_count=int(e["error_count"]))
        for e in obj.get("subtask_trace", [])
    )
    positions = [entry.position for entry in trace]
    if positions != list(range(1, max_position + 1)):
        fail(
            f"subtask_trace positions {positions} must run 1.."
            f"{max_position} contiguously"
        )
    if any(entry.error_count < 0 for entry in trace):
        fail("negative error count")
    return RunRecord(
        task_id=str(obj["task_id"]),
        scenario_id=str(obj["scenario_id"]),
        passed=bool(obj["passed"]),
        agents=tuple(agents),
        subtask_trace=trace,
        max_position_reached=max_position,
    )


def records_from_jsonl(lines: Iterable[str]) -> list[RunRecord]:
    records = []
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RunLogError(f"invalid JSON: {exc}", number) from exc
        records.append(_parse_record(obj, number))
    return records


def load_run_records(path: str | Path) -> list[RunRecord]:
    with open(path, encoding="utf-8") as handle:
        return records_from_jsonl(handle)


def record_tokens(record: RunRecord) -> int:
    return sum(
        call.tokens_in + call.tokens_out
        for agent in record.agents
        for call in agent.calls
    )


def tgc(records: Sequence[RunRecord]) -> float:
    """Percentage of records that passed."""
    if not records:
        raise EmptyRunSet("no run records")
    passed = sum(1 for r in records if r.passed)
    return round1(100.0 * passed / len(records))


def sgc(records: Sequence[RunRecord]) -> float:
    """Percentage of scenarios whose every record passed."""
    if not records:
        raise EmptyRunSet("no run records")
    scenarios: dict[str, bool] = {}
    for record in records:
        scenarios[record.scenario_id] = (
            scenarios.get(record.scenario_id, True) and record.passed
        )
    solved = sum(1 for ok in scenarios.values() if ok)
    return round1(100.0 * solved / len(scenarios))


def inference_error_rates(
    records: Sequence[RunRecord], min_successful: int = 5
) -> ErrorRateTable:
    """Error rate per subtask position over successful runs.

    For position i: numerator is the number of passed records with at least
    one error there, denominator the number of passed records that reached
    it. Positions reached by no more than ``min_successful`` passed records
    are omitted.
    """
    passed = [r for r in records if r.passed]
    if not passed:
        return ErrorRateTable(rows=())
    horizon = max(r.max_position_reached for r in passed)
    rows = []
    for position in range(1, horizon + 1):
        reached = [r for r in passed if r.max_position_reached >= position]
        denominator = len(reached)
        if denominator <= min_successful or denominator == 0:
            continue
        numerator = sum(
            1
            for r in reached
            if r.subtask_trace[position - 1].error_count > 0
        )
        rows.append(
            ErrorRateRow(
                position=position,
                numerator=numerator,
                denominator=denominator,
                rate_percent=round1(100.0 * numerator / denominator),
            )
        )
    return ErrorRateTable(rows=tuple(rows))


def training_error_rates(corpus: Sequence[Trajectory]) -> ErrorRateTable:
    """Error rate per subtask position over a training corpus.

    For position i: numerator is the number of tasks with at least one
    erroneous step in their i-th subtask, denominator the number of tasks
    that have an i-th subtask.
    """
    if not corpus:
        return ErrorRateTable(rows=())
    horizon = max(len(t.subtasks) for t in corpus)
    rows = []
    for position in range(1, horizon + 1):
        having = [t for t in corpus if len(t.subtasks) >= position]
        if not having:
            continue
        numerator = sum(
            1
            for t in having
            if any(
                step.status is StepStatus.ERRONEOUS
                for step in t.subtasks[position - 1].steps
            )
        )
        rows.append(
            ErrorRateRow(
                position=position,
                numerator=numerator,
                denominator=len(having),
                rate_percent=round1(100.0 * numerator / len(having)),
            )
        )
    return ErrorRateTable(rows=tuple(rows))


def token_stats(records: Sequence[RunRecord]) -> TokenStats:
    """Token totals split by outcome, plus the share spent on successes.

    Means and the ratio are rounded to one decimal; variances are
    population variances. A partition with no records reports ``None``.
    """
    if not records:
        raise EmptyRunSet("no run records")
    success = [record_tokens(r) for r in records if r.passed]
    failure = [record_tokens(r) for r in records if not r.passed]
    total = sum(success) + sum(failure)
    ratio = round1(100.0 * sum(success) / total) if total else 0.0
    return TokenStats(
        success_mean=round1(statistics.mean(success)) if success else None,
        success_variance=round1(statistics.pvariance(success)) if success else None,
        failure_mean=round1(statistics.mean(failure)) if failure else None,
        failure_variance=round1(statistics.pvariance(failure)) if failure else None,
        success_token_ratio_percent=ratio,
    )


def error_rate_table_to_dicts(table: ErrorRateTable) -> list[dict]:
    return [
        {
            "position": row.position,
            "numerator": row.numerator,
            "denominator": row.denominator,
            "rate_percent": row.rate_percent,
        }
        for row in table.rows
    ]

"""Multi-agent task trajectory model.

A trajectory records how an orchestrated agent team worked through one
task: an ordered list of subtasks, each holding the executor's
thought/action/observation steps. Critic feedback turns live in the same
step list with ``role="critic"``. This module parses trajectory documents,
validates them against structural rules and step budgets, classifies steps
by error status and subtasks by kind, and defines the canonical
serialization used wherever byte-stable output is required.

All types are immutable values; every operation returns a new value, so
distinct trajectories can be processed in parallel without coordination.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

EXIT_MARKER = "exit"
TASK_COMPLETION_CALL = "apis.supervisor.complete_task"

# Error patterns are a configuration guess, not ground truth: the runtime
# environment's message grammar is not fixed anywhere we can rely on.
DEFAULT_ERROR_PATTERNS: tuple[str, ...] = ("Traceback", "Exception", "Error:")

# Patterns are case-sensitive substrings unless prefixed with "re:", in
# which case the remainder is compiled as a regular expression.
REGEX_PATTERN_PREFIX = "re:"

_CODE_BLOCK = re.compile(r"<code>(.*?)</code>", re.DOTALL)


class SchemaError(ValueError):
    """A trajectory document does not match the expected schema."""

    def __init__(self, message: str, path: str = "$"):
        self.path = path
        super().__init__(f"{path}: {message}")


class PatternError(ValueError):
    """An error pattern is blank or has invalid regex syntax."""


class Source(str, Enum):
    NATIVE_MULTI_AGENT = "native_multi_agent"
    CONVERTED_FROM_SINGLE_AGENT = "converted_from_single_agent"


class StepRole(str, Enum):
    EXECUTOR = "executor"
    CRITIC = "critic"


class StepStatus(str, Enum):
    CORRECT = "correct"
    SELF_REFINED = "self_refined"
    ERRONEOUS = "erroneous"
    UNCLASSIFIED = "unclassified"


class SubtaskKind(str, Enum):
    LOGIN = "login"
    TASK_SPECIFIC = "task_specific"
    COMPLETION = "completion"
    OTHER_NON_TASK_SPECIFIC = "other_non_task_specific"


@dataclass(frozen=True)
class Step:
    """One thought/action/observation turn.

    ``extra_code_blocks`` counts code blocks beyond the first that were
    merged into ``action`` at parse time; anything above zero is surfaced
    as a WARN finding by :func:`validate_trajectory`.
    """

    index: int
    thought: str
    action: str
    observation: str = ""
    role: StepRole = StepRole.EXECUTOR
    status: StepStatus = StepStatus.UNCLASSIFIED
    extra_code_blocks: int = 0


@dataclass(frozen=True)
class Subtask:
    number: int
    description: str
    steps: tuple[Step, ...]
    kind: SubtaskKind = SubtaskKind.OTHER_NON_TASK_SPECIFIC
    final_report: str = ""


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    instruction: str
    subtasks: tuple[Subtask, ...]
    source: Source = Source.NATIVE_MULTI_AGENT

    @property
    def orchestrator_step_count(self) -> int:
        return len(self.subtasks)

    @property
    def total_turn_count(self) -> int:
        return sum(len(st.steps) for st in self.subtasks)

    @property
    def steps_classified(self) -> bool:
        return all(
            step.status is not StepStatus.UNCLASSIFIED
            for _, step in self.iter_steps()
        )

    def iter_steps(self) -> Iterator[tuple[Subtask, Step]]:
        for subtask in self.subtasks:
            for step in subtask.steps:
                yield subtask, step

    def subtask_kinds(self) -> tuple[SubtaskKind, ...]:
        return tuple(st.kind for st in self.subtasks)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    subtask: int | None = None
    step: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> tuple[str, ...]:
        return tuple(v.code for v in self.violations)


@dataclass(frozen=True)
class Budgets:
    """Validation budgets; ``None`` means unlimited."""

    max_subtasks: int | None = 12
    max_steps_per_subtask: int | None = 15


def _require(obj: Mapping, key: str, path: str):
    if key not in obj:
        raise SchemaError(f"missing required key '{key}'", path)
    return obj[key]


def _as_str(value, key: str, path: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(f"'{key}' must be a string", path)
    return value


def _as_int(value, key: str, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"'{key}' must be an integer", path)
    return value


def _enum_value(cls, value, key: str, path: str):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise SchemaError(
            f"'{key}' must be one of: {allowed} (got {value!r})", path
        ) from None


def split_plan_and_code(text: str, path: str = "$") -> tuple[str, str, int]:
    """Split a combined plan-and-code string into (thought, action, extras).

    The thought is everything before the first ``<code>`` tag; the action is
    the content of the ``<code>...</code>`` block(s). Several blocks are
    concatenated with newlines and reported via the third return value so
    callers can record a WARN finding.
    """
    blocks = _CODE_BLOCK.findall(text)
    if not blocks:
        raise SchemaError("no <code>...</code> block in plan_and_code", path)
    thought = text.split("<code>", 1)[0].strip()
    action = "\n".join(block.strip() for block in blocks)
    return thought, action, len(blocks) - 1


def _parse_step(obj, path: str) -> Step:
    if not isinstance(obj, dict):
        raise SchemaError("step must be an object", path)
    index = _as_int(_require(obj, "step_number", path), "step_number", path)
    role = _enum_value(StepRole, obj.get("role", StepRole.EXECUTOR.value), "role", path)
    status = _enum_value(
        StepStatus, obj.get("status", StepStatus.UNCLASSIFIED.value), "status", path
    )
    observation = _as_str(obj.get("observation", ""), "observation", path)
    if "plan_and_code" in obj:
        raw = _as_str(obj["plan_and_code"], "plan_and_code", path)
        thought, action, extra = split_plan_and_code(raw, path)
    else:
        action = _as_str(_require(obj, "action", path), "action", path)
        thought = _as_str(obj.get("thought", ""), "thought", path)
        extra = _as_int(obj.get("extra_code_blocks", 0), "extra_code_blocks", path)
    if not action.strip():
        raise SchemaError("empty action code", path)
    return Step(
        index=index,
        thought=thought,
        action=action,
        observation=observation,
        role=role,
        status=status,
        extra_code_blocks=extra,
    )


def _parse_subtask(obj, path: str) -> Subtask:
    if not isinstance(obj, dict):
        raise SchemaError("subtask must be an object", path)
    number = _as_int(
        _require(obj, "subtask_number", path), "subtask_number", path
    )
    description = _as_str(
        _require(obj, "subtask_description", path), "subtask_description", path
    )
    kind = _enum_value(
        SubtaskKind,
        obj.get("kind", SubtaskKind.OTHER_NON_TASK_SPECIFIC.value),
        "kind",
        path,
    )
    final_report = _as_str(obj.get("final_report", ""), "final_report", path)
    raw_steps = _require(obj, "executor_steps", path)
    if not isinstance(raw_steps, list) or not raw_steps:
        raise SchemaError("'executor_steps' must be a non-empty list", path)
    steps = tuple(
        _parse_step(raw, f"{path}.executor_steps[{i}]")
        for i, raw in enumerate(raw_steps)
    )
    return Subtask(
        number=number,
        description=description,
        steps=steps,
        kind=kind,
        final_report=final_report,
    )


def parse_trajectory(text: str) -> Trajectory:
    """Parse a JSON trajectory document.

    Accepts both the conversion output schema (``plan_and_code`` strings
    with ``<code>`` fences) and this module's canonical form (explicit
    ``thought``/``action`` fields). Raises :class:`SchemaError` naming the
    JSON path of the first problem found.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("top-level value must be an object")
    raw_subtasks = _require(doc, "subtasks", "$")
    if not isinstance(raw_subtasks, list) or not raw_subtasks:
        raise SchemaError("'subtasks' must be a non-empty list")
    subtasks = tuple(
        _parse_subtask(raw, f"$.subtasks[{i}]")
        for i, raw in enumerate(raw_subtasks)
    )
    numbers = [st.number for st in subtasks]
    if numbers != list(range(1, len(subtasks) + 1)):
        raise SchemaError(
            f"non-contiguous subtask numbering: {numbers}", "$.subtasks"
        )
    source = _enum_value(
        Source, doc.get("source", Source.NATIVE_MULTI_AGENT.value), "source", "$"
    )
    return Trajectory(
        task_id=_as_str(doc.get("task_id", ""), "task_id", "$"),
        instruction=_as_str(doc.get("instruction", ""), "instruction", "$"),
        subtasks=subtasks,
        source=source,
    )


def trajectory_to_dict(t: Trajectory) -> dict:
    """Plain-dict form of a trajectory, mirroring the canonical schema."""
    return {
        "task_id": t.task_id,
        "instruction": t.instruction,
        "source": t.source.value,
        "subtasks": [
            {
                "subtask_number": st.number,
                "subtask_description": st.description,
                "kind": st.kind.value,
                "final_report": st.final_report,
                "executor_steps": [
                    {
                        "step_number": step.index,
                        "role": step.role.value,
                        "thought": step.thought,
                        "action": step.action,
                        "observation": step.observation,
                        "status": step.status.value,
                        "extra_code_blocks": step.extra_code_blocks,
                    }
                    for step in st.steps
                ],
            }
            for st in t.subtasks
        ],
    }


def serialize_trajectory(t: Trajectory) -> str:
    """Canonical serialization: UTF-8, sorted keys, 2-space indent, LF.

    ``parse_trajectory(serialize_trajectory(t))`` returns a value equal to
    ``t``, and re-serializing it is byte-identical.
    """
    return json.dumps(
        trajectory_to_dict(t), ensure_ascii=False, indent=2, sort_keys=True
    ) + "\n"


def write_trajectory(t: Trajectory, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(serialize_trajectory(t))


def load_trajectory(path: str | Path) -> Trajectory:
    return parse_trajectory(Path(path).read_text(encoding="utf-8"))


def validate_trajectory(t: Trajectory, budgets: Budgets = Budgets()) -> ValidationReport:
    """Check budgets and structural rules, returning all findings.

    Findings are report entries, never exceptions: subtask/step budget
    overruns, a subtask whose last step is not the ``exit`` marker, a final
    subtask that never calls the task-completion API, and WARN entries for
    steps that packed several code blocks into one turn. Step budgets count
    executor turns only; critic feedback turns are free.
    """
    violations: list[Violation] = []
    if budgets.max_subtasks is not None and len(t.subtasks) > budgets.max_subtasks:
        violations.append(
            Violation(
                code="SUBTASK_BUDGET",
                message=(
                    f"{len(t.subtasks)} subtasks exceed the budget of "
                    f"{budgets.max_subtasks}"
                ),
            )
        )
    for st in t.subtasks:
        executor_steps = [s for s in st.steps if s.role is StepRole.EXECUTOR]
        if (
            budgets.max_steps_per_subtask is not None
            and len(executor_steps) > budgets.max_steps_per_subtask
        ):
            violations.append(
                Violation(
                    code="STEP_BUDGET",
                    message=(
                        f"{len(executor_steps)} executor steps exceed the "
                        f"budget of {budgets.max_steps_per_subtask}"
                    ),
                    subtask=st.number,
                )
            )
        last = st.steps[-1]
        if last.action.strip() != EXIT_MARKER:
            violations.append(
                Violation(
                    code="EXIT_MARKER",
                    message="last step of the subtask is not the exit marker",
                    subtask=st.number,
                    step=last.index,
                )
            )
        for step in st.steps:
            if step.extra_code_blocks > 0:
                violations.append(
                    Violation(
                        code="WARN_MULTIPLE_CODE_BLOCKS",
                        message=(
                            f"step merged {step.extra_code_blocks + 1} code "
                            "blocks into one action"
                        ),
                        subtask=st.number,
                        step=step.index,
                    )
                )
    final = t.subtasks[-1]
    if not any(TASK_COMPLETION_CALL in step.action for step in final.steps):
        violations.append(
            Violation(
                code="COMPLETION_CALL",
                message="final subtask never calls the task-completion API",
                subtask=final.number,
            )
        )
    return ValidationReport(violations=tuple(violations))


def _compile_pattern(pattern: str) -> Callable[[str], bool]:
    if not pattern or not pattern.strip():
        raise PatternError("blank error pattern")
    if pattern.startswith(REGEX_PATTERN_PREFIX):
        body = pattern[len(REGEX_PATTERN_PREFIX):]
        try:
            rx = re.compile(body)
        except re.error as exc:
            raise PatternError(f"invalid regex pattern {body!r}: {exc}") from exc
        return lambda text: rx.search(text) is not None
    return lambda text: pattern in text


def load_error_patterns(path: str | Path) -> tuple[str, ...]:
    """Read a pattern file: one pattern per line, ``#`` comments allowed."""
    patterns = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            patterns.append(stripped)
    return tuple(patterns)


def classify_steps(
    t: Trajectory, error_patterns: Sequence[str] | None = None
) -> Trajectory:
    """Assign a status to every step from its observation text.

    A step is erroneous when its observation matches any pattern; a clean
    step right after an erroneous one in the same subtask is self-refined;
    everything else is correct. Recomputed from scratch each call, so the
    operation is idempotent and a subtask's first step is never
    self-refined.
    """
    if error_patterns is None:
        error_patterns = DEFAULT_ERROR_PATTERNS
    matchers = [_compile_pattern(p) for p in error_patterns]

    def status_for(subtask: Subtask) -> list[StepStatus]:
        erroneous = [
            any(matcher(step.observation) for matcher in matchers)
            for step in subtask.steps
        ]
        statuses = []
        for i, is_error in enumerate(erroneous):
            if is_error:
                statuses.append(StepStatus.ERRONEOUS)
            elif i > 0 and erroneous[i - 1]:
                statuses.append(StepStatus.SELF_REFINED)
            else:
                statuses.append(StepStatus.CORRECT)
        return statuses

    new_subtasks = []
    for subtask in t.subtasks:
        statuses = status_for(subtask)
        new_steps = tuple(
            replace(step, status=status)
            for step, status in zip(subtask.steps, statuses)
        )
        new_subtasks.append(replace(subtask, steps=new_steps))
    return replace(t, subtasks=tuple(new_subtasks))


def classify_subtasks(
    t: Trajectory, overrides: Mapping[int, SubtaskKind | str] | None = None
) -> Trajectory:
    """Assign subtask kinds: first is login, last is completion, rest are
    task-specific. A single-subtask trajectory is all completion. Explicit
    overrides (by subtask number) win; numbers outside 1..M are ignored.
    """
    m = len(t.subtasks)
    kinds: dict[int, SubtaskKind] = {}
    for number in range(1, m + 1):
        if m == 1:
            kinds[number] = SubtaskKind.COMPLETION
        elif number == 1:
            kinds[number] = SubtaskKind.LOGIN
        elif number == m:
            kinds[number] = SubtaskKind.COMPLETION
        else:
            kinds[number] = SubtaskKind.TASK_SPECIFIC
    if overrides:
        for number, kind in overrides.items():
            if 1 <= number <= m:
                kinds[number] = SubtaskKind(kind)
    new_subtasks = tuple(
        replace(st, kind=kinds[st.number]) for st in t.subtasks
    )
    return replace(t, subtasks=new_subtasks)

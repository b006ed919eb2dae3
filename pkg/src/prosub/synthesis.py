"""Single-agent to multi-agent trajectory conversion via a chat endpoint.

The converter prompts a chat-completion endpoint to regroup a solved
single-agent coding session into orchestrated subtasks, parses the reply
against the trajectory schema, and retries with a repair instruction when
the reply cannot be used. A separate step-preservation check confirms the
conversion kept every original code step, in order, letter for letter.

Wire contract (kept minimal so any provider or local server can be
adapted): ``POST <url>`` with JSON body ``{"model": ..., "messages":
[{"role": ..., "content": ...}]}``. The response must be JSON carrying the
completion text either as a top-level ``"content"`` field or at the
OpenAI-compatible path ``choices[0].message.content``. Authentication,
when configured, is a bearer token read from the environment variable
named in the endpoint config; the token value itself is never stored.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from .trajectory import (
    Budgets,
    SchemaError,
    Source,
    StepRole,
    Subtask,
    Trajectory,
    parse_trajectory,
    validate_trajectory,
)

log = logging.getLogger(__name__)

EXIT_MARKER = "exit"

# Structural findings that make a converted trajectory unusable; WARN-level
# findings do not block acceptance.
_BLOCKING_CODES = ("EXIT_MARKER", "COMPLETION_CALL")

_PLACEHOLDERS = ("{task}", "{exemplar}", "{trajectory}")

# The schema block below is the contract the converted reply must satisfy;
# parse_trajectory enforces it.
DEFAULT_CONVERSION_TEMPLATE = """\
You are converting a single-agent coding session into an orchestrated
multi-agent record for the same task. The original session already solved
the task, so the converted record must also solve it when its steps are
replayed in order.

Supervisor and task:
{task}

Subtask rules:
- Group the original steps into ordered subtasks, each with one concrete
  goal, numbered from 1.
- Authentication/login work is always its own subtask.
- Describe each subtask's goal and the ordered steps to achieve it in
  natural language, naming candidate apps but never concrete API names;
  instruct the executor to discover APIs through the documentation helpers
  instead.
- Carry concrete names, paths, and values from the task into the
  descriptions rather than paraphrasing them away.
- The final subtask must instruct calling the task-completion API
  (apis.supervisor.complete_task), passing the answer when the task needs
  one.
- End every subtask description with an instruction to report back on
  completion.

Executor step rules:
- Copy every original step: its thought and its code, letter for letter.
  Do not drop a step and do not invent new code.
- Put the thought first, then the code inside <code> ... </code> tags, one
  code block per step.
- One exception: close each subtask with a short summary step whose code
  block is exactly <code>exit</code>.

Respond with a single JSON object and nothing else, matching exactly:

{
  "subtasks": [
    {
      "subtask_number": <integer>,
      "subtask_description": <string>,
      "executor_steps": [
        {
          "subtask_number": <integer>,
          "step_number": <integer>,
          "plan_and_code": <string followed by <code> code </code>>
        }
      ]
    }
  ]
}

Worked example:
{exemplar}

Single-agent session to convert:
{trajectory}
"""

_REPAIR_INSTRUCTION = """\
The previous response could not be used: {error}
Reply again with only the corrected JSON object, following the schema
exactly and preserving every original step.
"""


class TemplateError(ValueError):
    pass


class EndpointError(RuntimeError):
    """Transport or HTTP failure talking to the endpoint."""


class ConversionFailed(RuntimeError):
    """All attempts produced unusable output; carries the last raw reply."""

    def __init__(self, task_id: str, attempts: int, last_response: str):
        self.task_id = task_id
        self.attempts = attempts
        self.last_response = last_response
        super().__init__(
            f"task {task_id!r}: conversion failed after {attempts} attempts"
        )


@dataclass(frozen=True)
class Turn:
    thought: str
    action: str
    observation: str = ""


@dataclass(frozen=True)
class SingleAgentTrajectory:
    task_id: str
    instruction: str
    turns: tuple[Turn, ...]


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str
    token_env: str | None = None
    max_retries: int = 2
    timeout_s: float = 60.0
    max_concurrent: int = 4

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")


@dataclass(frozen=True)
class PreservationReport:
    ok: bool
    mismatch_index: int | None = None
    message: str = ""


def endpoint_config_from_dict(obj: dict) -> EndpointConfig:
    return EndpointConfig(
        url=str(obj["url"]),
        model=str(obj["model"]),
        token_env=obj.get("token_env"),
        max_retries=int(obj.get("max_retries", 2)),
        timeout_s=float(obj.get("timeout_s", 60.0)),
        max_concurrent=int(obj.get("max_concurrent", 4)),
    )


def parse_single_agent_trajectory(text: str) -> SingleAgentTrajectory:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("top-level value must be an object")
    raw_turns = doc.get("turns")
    if not isinstance(raw_turns, list) or not raw_turns:
        raise SchemaError("'turns' must be a non-empty list")
    turns = []
    for i, raw in enumerate(raw_turns):
        path = f"$.turns[{i}]"
        if not isinstance(raw, dict) or "action" not in raw:
            raise SchemaError("turn needs an 'action'", path)
        if not str(raw["action"]).strip():
            raise SchemaError("empty action code", path)
        turns.append(
            Turn(
                thought=str(raw.get("thought", "")),
                action=str(raw["action"]),
                observation=str(raw.get("observation", "")),
            )
        )
    return SingleAgentTrajectory(
        task_id=str(doc.get("task_id", "")),
        instruction=str(doc.get("instruction", "")),
        turns=tuple(turns),
    )


def serialize_turns(source: SingleAgentTrajectory) -> str:
    chunks = []
    for i, turn in enumerate(source.turns, 1):
        lines = [f"Step {i}:"]
        if turn.thought:
            lines.append(f"Thought: {turn.thought}")
        lines.append(f"<code>{turn.action}</code>")
        if turn.observation:
            lines.append(f"Observation: {turn.observation}")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks)


def build_conversion_prompt(
    source: SingleAgentTrajectory,
    exemplar: str,
    template: str | None = None,
) -> str:
    """Render the conversion prompt for one source trajectory.

    The exemplar is a worked conversion shown to the model. A custom
    template must contain all of ``{task}``, ``{exemplar}`` and
    ``{trajectory}``; substitution is literal, so other braces in the
    template are left alone.
    """
    if not exemplar or not exemplar.strip():
        raise TemplateError("exemplar must be non-empty")
    if template is None:
        template = DEFAULT_CONVERSION_TEMPLATE
    missing = [p for p in _PLACEHOLDERS if p not in template]
    if missing:
        raise TemplateError(f"template lacks placeholders: {', '.join(missing)}")
    prompt = template
    prompt = prompt.replace("{task}", source.instruction)
    prompt = prompt.replace("{exemplar}", exemplar)
    prompt = prompt.replace("{trajectory}", serialize_turns(source))
    return prompt


class ChatEndpoint(Protocol):
    def complete(self, messages: list[dict]) -> str: ...


class HttpChatEndpoint:
    """Minimal chat-completion client over the documented wire contract."""

    def __init__(self, config: EndpointConfig):
        self.config = config

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.token_env:
            token = os.environ.get(self.config.token_env)
            if not token:
                raise EndpointError(
                    f"auth token environment variable {self.config.token_env!r} "
                    "is not set"
                )
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, messages: list[dict]) -> str:
        body = {"model": self.config.model, "messages": messages}
        try:
            response = requests.post(
                self.config.url,
                json=body,
                headers=self._headers(),
                timeout=self.config.timeout_s,
            )
        except requests.RequestException as exc:
            raise EndpointError(f"transport failure: {exc}") from exc
        if response.status_code >= 400:
            raise EndpointError(
                f"HTTP {response.status_code}: {response.text[:200]}"
            )
        try:
            payload = response.json()
        except ValueError as exc:
            raise EndpointError("response body is not JSON") from exc
        content = _extract_content(payload)
        if content is None:
            raise EndpointError("response carries no completion text")
        return content


def _extract_content(payload) -> str | None:
    if isinstance(payload, dict):
        if isinstance(payload.get("content"), str):
            return payload["content"]
        choices = payload.get("choices")
        if isinstance(choices, list) and choices:
            message = choices[0].get("message", {})
            if isinstance(message, dict) and isinstance(
                message.get("content"), str
            ):
                return message["content"]
    return None


def _structural_problems(candidate: Trajectory) -> list[str]:
    report = validate_trajectory(candidate, Budgets(None, None))
    return [
        f"{v.code} (subtask {v.subtask}): {v.message}"
        for v in report.violations
        if v.code in _BLOCKING_CODES
    ]


def _write_audit(
    audit_dir: Path | None, task_id: str, attempt: int, messages: list[dict], reply: str
) -> None:
    if audit_dir is None:
        return
    target = audit_dir / (task_id or "unnamed")
    target.mkdir(parents=True, exist_ok=True)
    request_path = target / f"attempt{attempt}.request.json"
    with open(request_path, "w", encoding="utf-8", newline="") as handle:
        json.dump({"messages": messages}, handle, ensure_ascii=False, indent=2)
        handle.write("\n")
    (target / f"attempt{attempt}.response.txt").write_text(
        reply, encoding="utf-8"
    )


def convert(
    source: SingleAgentTrajectory,
    config: EndpointConfig,
    exemplar: str,
    *,
    endpoint: ChatEndpoint | None = None,
    template: str | None = None,
    audit_dir: str | Path | None = None,
) -> Trajectory:
    """Convert one single-agent trajectory through the endpoint.

    Replies that fail the schema or the structural checks (exit markers,
    completion call) are fed back as a repair instruction, up to
    ``config.max_retries`` extra attempts. Transport failures raise
    :class:`EndpointError` immediately; exhausting the attempts raises
    :class:`ConversionFailed` carrying the last raw reply.
    """
    if endpoint is None:
        endpoint = HttpChatEndpoint(config)
    audit_path = Path(audit_dir) if audit_dir is not None else None
    prompt = build_conversion_prompt(source, exemplar, template)
    messages = [{"role": "user", "content": prompt}]
    attempts = config.max_retries + 1
    last_reply = ""
    for attempt in range(1, attempts + 1):
        reply = endpoint.complete(messages)
        last_reply = reply
        _write_audit(audit_path, source.task_id, attempt, messages, reply)
        try:
            candidate = parse_trajectory(reply)
            problems = _structural_problems(candidate)
            if problems:
                raise SchemaError("; ".join(problems))
        except SchemaError as exc:
            log.info(
                "task %s attempt %d/%d rejected: %s",
                source.task_id, attempt, attempts, exc,
            )
            messages = messages + [
                {"role": "assistant", "content": reply},
                {
                    "role": "user",
                    "content": _REPAIR_INSTRUCTION.format(error=exc),
                },
            ]
            continue
        return replace(
            candidate,
            task_id=source.task_id,
            instruction=source.instruction,
            source=Source.CONVERTED_FROM_SINGLE_AGENT,
        )
    raise ConversionFailed(source.task_id, attempts, last_reply)


@dataclass(frozen=True)
class ConversionOutcome:
    task_id: str
    trajectory: Trajectory | None = None
    error: str | None = None
    error_kind: str | None = None  # "endpoint" | "conversion"


def convert_corpus(
    sources: Sequence[SingleAgentTrajectory],
    config: EndpointConfig,
    exemplar: str,
    *,
    endpoint: ChatEndpoint | None = None,
    endpoint_factory: Callable[[], ChatEndpoint] | None = None,
    template: str | None = None,
    audit_dir: str | Path | None = None,
) -> list[ConversionOutcome]:
    """Convert many trajectories with bounded concurrency.

    Results come back in input order. Failed tasks are logged and reported
    as outcomes rather than raised, mirroring a pipeline that keeps only
    validated conversions.
    """

    def run_one(source: SingleAgentTrajectory) -> ConversionOutcome:
        task_endpoint = endpoint_factory() if endpoint_factory else endpoint
        try:
            converted = convert(
                source,
                config,
                exemplar,
                endpoint=task_endpoint,
                template=template,
                audit_dir=audit_dir,
            )
            return ConversionOutcome(task_id=source.task_id, trajectory=converted)
        except EndpointError as exc:
            log.warning("task %s endpoint failure: %s", source.task_id, exc)
            return ConversionOutcome(
                task_id=source.task_id, error=str(exc), error_kind="endpoint"
            )
        except ConversionFailed as exc:
            log.warning("task %s skipped: %s", source.task_id, exc)
            return ConversionOutcome(
                task_id=source.task_id, error=str(exc), error_kind="conversion"
            )

    if len(sources) <= 1 or config.max_concurrent == 1:
        return [run_one(source) for source in sources]
    with ThreadPoolExecutor(max_workers=config.max_concurrent) as pool:
        return list(pool.map(run_one, sources))


def normalize_code(code: str) -> str:
    """CRLF to LF, trailing spaces trimmed, outer whitespace stripped."""
    lines = code.replace("\r\n", "\n").split("\n")
    return "\n".join(line.rstrip() for line in lines).strip()


def _preserved_steps(converted: Trajectory) -> list[tuple[Subtask, int]]:
    kept = []
    for subtask in converted.subtasks:
        last_index = len(subtask.steps) - 1
        for position, step in enumerate(subtask.steps):
            if step.role is not StepRole.EXECUTOR:
                continue
            terminal_exit = (
                position == last_index
                and normalize_code(step.action) == EXIT_MARKER
            )
            if not terminal_exit:
                kept.append((subtask, position))
    return kept


def verify_step_preservation(
    source: SingleAgentTrajectory, converted: Trajectory
) -> PreservationReport:
    """Check the conversion kept every original code step, in order.

    The per-subtask terminal exit/summary steps the conversion adds are
    excluded; remaining executor actions must match the source turns 1:1
    after whitespace normalization. The report names the first mismatching
    turn (1-based).
    """
    kept = _preserved_steps(converted)
    source_codes = [normalize_code(turn.action) for turn in source.turns]
    converted_codes = [
        normalize_code(subtask.steps[position].action)
        for subtask, position in kept
    ]
    for i, (want, got) in enumerate(zip(source_codes, converted_codes), 1):
        if want != got:
            return PreservationReport(
                ok=False,
                mismatch_index=i,
                message=f"turn {i}: expected {want[:80]!r}, got {got[:80]!r}",
            )
    if len(source_codes) != len(converted_codes):
        return PreservationReport(
            ok=False,
            mismatch_index=min(len(source_codes), len(converted_codes)) + 1,
            message=(
                f"step count mismatch: source has {len(source_codes)} turns, "
                f"conversion kept {len(converted_codes)}"
            ),
        )
    return PreservationReport(ok=True)

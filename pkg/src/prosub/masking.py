"""Per-epoch, per-role training sequences with loss-mask flags.

Each trajectory plus a schedule epoch yields chat-style sequences whose
segments carry a ``trainable`` flag: loss is enabled on an assistant
segment only when its subtask is included at that epoch and the step
behind it is correct or self-refined. Erroneous steps stay in the
conversation as context but never train; excluded-but-earlier subtasks
likewise stay as context, while subtasks after the last included one are
dropped entirely (they neither train nor condition anything that does).

Token-level masks are the consuming trainer's concern: granularity here is
the whole assistant message.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .curriculum import MissingSeed, Schedule, Strategy, build_schedule
from .trajectory import (
    Step,
    StepRole,
    StepStatus,
    Subtask,
    Trajectory,
    serialize_trajectory,
)

ROLES = ("orchestrator", "executor", "critic")

_TRAINABLE_STATUSES = (StepStatus.CORRECT, StepStatus.SELF_REFINED)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class EpochOutOfRange(IndexError):
    pass


class UnclassifiedSteps(ValueError):
    pass


class EmissionError(RuntimeError):
    """A per-task failure during dataset emission."""

    def __init__(self, task_id: str, message: str):
        self.task_id = task_id
        super().__init__(f"task {task_id!r}: {message}")


class Speaker(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class AgentRole(str, Enum):
    ORCHESTRATOR = "orchestrator"
    EXECUTOR = "executor"
    CRITIC = "critic"


class HistoryMode(str, Enum):
    PER_SUBTASK = "per_subtask"
    FULL_TASK = "full_task"


@dataclass(frozen=True)
class Segment:
    speaker: Speaker
    content: str
    trainable: bool = False


@dataclass(frozen=True)
class TrainingSequence:
    task_id: str
    role: AgentRole
    epoch: int
    strategy: str
    segments: tuple[Segment, ...]

    def trainable_contents(self) -> list[str]:
        return [seg.content for seg in self.segments if seg.trainable]


@dataclass(frozen=True)
class EmissionManifest:
    strategy: str
    epochs: int
    roles: tuple[str, ...]
    record_counts: Mapping[str, tuple[int, ...]]
    corpus_digest: str
    history_mode: str
    seed: int | None = None
    trainer_metadata: Mapping | None = None


def _step_is_trainable(step: Step) -> bool:
    return step.status in _TRAINABLE_STATUSES


def _exchange_text(step: Step) -> str:
    code = f"<code>{step.action}</code>"
    return f"{step.thought}\n{code}" if step.thought else code


def _context_text(step: Step) -> str:
    # how a step reads when replayed as conversation context
    if step.role is StepRole.CRITIC:
        return step.action
    parts = [_exchange_text(step)]
    if step.observation:
        parts.append(f"Observation: {step.observation}")
    return "\n".join(parts)


def _check_epoch(schedule: Schedule, epoch: int) -> frozenset[int]:
    if not 0 <= epoch < len(schedule.epochs):
        raise EpochOutOfRange(
            f"epoch {epoch} outside 0..{len(schedule.epochs) - 1}"
        )
    return schedule.epochs[epoch]


def _check_match(t: Trajectory, schedule: Schedule) -> None:
    if schedule.subtask_count != len(t.subtasks):
        raise ValueError(
            f"schedule built for {schedule.subtask_count} subtasks, "
            f"trajectory has {len(t.subtasks)}"
        )


def _check_classified(t: Trajectory) -> None:
    if not t.steps_classified:
        raise UnclassifiedSteps(
            f"task {t.task_id!r} has unclassified steps; run classify_steps first"
        )


def build_orchestrator_examples(
    t: Trajectory, schedule: Schedule, epoch: int
) -> list[TrainingSequence]:
    """One sequence per task: the instruction, then each subtask's plan
    (assistant) and final report (user) up to the last included subtask.

    A plan segment trains only when its subtask is included at this epoch;
    earlier excluded subtasks stay as context because later included plans
    condition on them. When the epoch includes nothing, no sequence is
    emitted.
    """
    _check_match(t, schedule)
    included = _check_epoch(schedule, epoch)
    if not included:
        return []
    horizon = max(included)
    segments = [Segment(Speaker.SYSTEM, t.instruction)]
    for subtask in t.subtasks[:horizon]:
        segments.append(
            Segment(
                Speaker.ASSISTANT,
                subtask.description,
                trainable=subtask.number in included,
            )
        )
        if subtask.final_report:
            segments.append(Segment(Speaker.USER, subtask.final_report))
    return [
        TrainingSequence(
            task_id=t.task_id,
            role=AgentRole.ORCHESTRATOR,
            epoch=epoch,
            strategy=schedule.strategy.value,
            segments=tuple(segments),
        )
    ]


def _executor_step_segments(
    subtask: Subtask, included: frozenset[int]
) -> list[Segment]:
    segments = []
    for step in subtask.steps:
        if step.role is StepRole.CRITIC:
            # critic feedback arrives in the executor's conversation as an
            # incoming message; it never trains the executor
            segments.append(Segment(Speaker.USER, step.action))
            continue
        trainable = _step_is_trainable(step) and subtask.number in included
        segments.append(
            Segment(Speaker.ASSISTANT, _exchange_text(step), trainable=trainable)
        )
        if step.observation:
            segments.append(Segment(Speaker.USER, f"Observation: {step.observation}"))
    return segments


def build_executor_examples(
    t: Trajectory,
    schedule: Schedule,
    epoch: int,
    history_mode: HistoryMode | str = HistoryMode.FULL_TASK,
) -> list[TrainingSequence]:
    """Executor sequences: (thought, code) assistant turns with observations
    as context.

    ``full_task`` emits one sequence conditioning on all prior subtasks'
    steps, truncated after the last included subtask. ``per_subtask`` emits
    one sequence per included subtask, opened with that subtask's
    description as the instruction (sequences that could never train are
    not emitted).
    """
    _check_classified(t)
    _check_match(t, schedule)
    history_mode = HistoryMode(history_mode)
    included = _check_epoch(schedule, epoch)
    if not included:
        return []

    def sequence(segments: list[Segment]) -> TrainingSequence:
        return TrainingSequence(
            task_id=t.task_id,
            role=AgentRole.EXECUTOR,
            epoch=epoch,
            strategy=schedule.strategy.value,
            segments=tuple(segments),
        )

    if history_mode is HistoryMode.FULL_TASK:
        horizon = max(included)
        segments = [Segment(Speaker.SYSTEM, t.instruction)]
        for subtask in t.subtasks[:horizon]:
            segments.append(Segment(Speaker.USER, subtask.description))
            segments.extend(_executor_step_segments(subtask, included))
        return [sequence(segments)]

    sequences = []
    for number in sorted(included):
        subtask = t.subtasks[number - 1]
        segments = [Segment(Speaker.SYSTEM, subtask.description)]
        segments.extend(_executor_step_segments(subtask, included))
        sequences.append(sequence(segments))
    return sequences


def build_critic_examples(
    t: Trajectory, schedule: Schedule, epoch: int
) -> list[TrainingSequence]:
    """One sequence per critic invocation.

    Context: the task instruction, the subtask, and the executor's steps so
    far in that subtask (the last of which is the attempt under review).
    The critic's feedback is the assistant segment, trainable under the
    same subtask-membership and non-erroneous gates as executor steps.
    """
    _check_match(t, schedule)
    included = _check_epoch(schedule, epoch)
    sequences = []
    for subtask in t.subtasks:
        for position, step in enumerate(subtask.steps):
            if step.role is not StepRole.CRITIC:
                continue
            segments = [
                Segment(Speaker.SYSTEM, t.instruction),
                Segment(Speaker.USER, subtask.description),
            ]
            for prior in subtask.steps[:position]:
                segments.append(Segment(Speaker.USER, _context_text(prior)))
            trainable = _step_is_trainable(step) and subtask.number in included
            segments.append(
                Segment(Speaker.ASSISTANT, step.action, trainable=trainable)
            )
            sequences.append(
                TrainingSequence(
                    task_id=t.task_id,
                    role=AgentRole.CRITIC,
                    epoch=epoch,
                    strategy=schedule.strategy.value,
                    segments=tuple(segments),
                )
            )
    return sequences


def sequence_to_dict(seq: TrainingSequence) -> dict:
    return {
        "task_id": seq.task_id,
        "role": seq.role.value,
        "epoch": seq.epoch,
        "strategy": seq.strategy,
        "segments": [
            {
                "speaker": seg.speaker.value,
                "content": seg.content,
                "trainable": seg.trainable,
            }
            for seg in seq.segments
        ],
    }


def sequence_to_json_line(seq: TrainingSequence) -> str:
    """One JSONL record: UTF-8, sorted keys, compact, LF-terminated."""
    return json.dumps(
        sequence_to_dict(seq),
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    ) + "\n"


def fnv1a64(text: str) -> int:
    digest = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        digest = ((digest ^ byte) * _FNV_PRIME) & _MASK64
    return digest


def derive_task_seed(seed: int, task_id: str) -> int:
    """Per-task seed for the random strategy, independent of corpus order."""
    return (seed ^ fnv1a64(task_id)) & _MASK64


def corpus_digest(corpus: Sequence[Trajectory]) -> str:
    digest = hashlib.sha256()
    for t in corpus:
        digest.update(serialize_trajectory(t).encode("utf-8"))
    return f"sha256:{digest.hexdigest()}"


def manifest_to_dict(manifest: EmissionManifest) -> dict:
    return {
        "strategy": manifest.strategy,
        "epochs": manifest.epochs,
        "roles": list(manifest.roles),
        "record_counts": {
            role: list(counts) for role, counts in manifest.record_counts.items()
        },
        "corpus_digest": manifest.corpus_digest,
        "history_mode": manifest.history_mode,
        "seed": manifest.seed,
        "trainer_metadata": dict(manifest.trainer_metadata)
        if manifest.trainer_metadata is not None
        else None,
    }


def emit_epoch_datasets(
    corpus: Sequence[Trajectory],
    strategy: Strategy | str,
    epochs: int,
    out_dir: str | Path,
    *,
    seed: int | None = None,
    history_mode: HistoryMode | str = HistoryMode.FULL_TASK,
    trainer_metadata: Mapping | None = None,
    decrement_style: str = "mirror",
) -> EmissionManifest:
    """Write one ``<role>.epoch<k>.jsonl`` file per role and epoch, plus a
    ``manifest.json``, into ``out_dir``.

    Schedules are computed per task from its own subtask count and kinds;
    under the random strategy each task draws from a seed derived from the
    corpus seed and its task id. Records appear in corpus order and the
    output is byte-identical across runs for the same corpus, strategy and
    seed. Any per-task failure aborts the emission, naming the task.
    """
    strategy = Strategy(strategy)
    history_mode = HistoryMode(history_mode)
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if strategy is Strategy.RANDOM and seed is None:
        raise MissingSeed("the random strategy requires a seed")
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)

    buffers: dict[tuple[str, int], list[str]] = {
        (role, epoch): [] for role in ROLES for epoch in range(epochs)
    }
    for t in corpus:
        try:
            _check_classified(t)
            task_seed = (
                derive_task_seed(seed, t.task_id)
                if strategy is Strategy.RANDOM
                else None
            )
            schedule = build_schedule(
                strategy,
                t.subtask_kinds(),
                epochs,
                seed=task_seed,
                decrement_style=decrement_style,
            )
            for epoch in range(epochs):
                for seq in build_orchestrator_examples(t, schedule, epoch):
                    buffers[("orchestrator", epoch)].append(
                        sequence_to_json_line(seq)
                    )
                for seq in build_executor_examples(
                    t, schedule, epoch, history_mode
                ):
                    buffers[("executor", epoch)].append(sequence_to_json_line(seq))
                for seq in build_critic_examples(t, schedule, epoch):
                    buffers[("critic", epoch)].append(sequence_to_json_line(seq))
        except (EpochOutOfRange, UnclassifiedSteps, ValueError) as exc:
            raise EmissionError(t.task_id, str(exc)) from exc

    record_counts = {
        role: tuple(len(buffers[(role, epoch)]) for epoch in range(epochs))
        for role in ROLES
    }
    for (role, epoch), lines in buffers.items():
        target = out_path / f"{role}.epoch{epoch}.jsonl"
        with open(target, "w", encoding="utf-8", newline="") as handle:
            handle.writelines(lines)

    manifest = EmissionManifest(
        strategy=strategy.value,
        epochs=epochs,
        roles=ROLES,
        record_counts=record_counts,
        corpus_digest=corpus_digest(corpus),
        history_mode=history_mode.value,
        seed=seed if strategy is Strategy.RANDOM else None,
        trainer_metadata=trainer_metadata,
    )
    manifest_text = json.dumps(
        manifest_to_dict(manifest), ensure_ascii=False, indent=2, sort_keys=True
    ) + "\n"
    with open(out_path / "manifest.json", "w", encoding="utf-8", newline="") as handle:
        handle.write(manifest_text)
    return manifest

"""Per-epoch subtask inclusion schedules.

A schedule lists, for each training epoch, the set of subtask numbers whose
outputs receive loss. Four strategies:

* ``ours`` — the progressive curriculum. Training starts from the first
  (at least) two task-specific subtasks, grows the set through the middle
  epochs, and holds the non-task-specific subtasks (login, completion) for
  the end; the final epoch always covers the full trajectory.
* ``all`` — every subtask at every epoch (standard fine-tuning).
* ``random`` — each subtask is active over a contiguous epoch range whose
  endpoints are two draws from a seeded generator, so every subtask is
  active in at least one epoch.
* ``decrement`` — the ``ours`` schedule played backwards.

Random draws use a 64-bit linear congruential generator so schedules are
reproducible in any implementation language:

    state' = (6364136223846793005 * state + 1442695040888963407) mod 2**64
    draw below n = (state' >> 33) % n

The state starts at the seed (reduced mod 2**64).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .trajectory import SubtaskKind

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1


class MissingSeed(ValueError):
    """The random strategy needs an explicit seed."""


class Strategy(str, Enum):
    OURS = "ours"
    ALL = "all"
    RANDOM = "random"
    DECREMENT = "decrement"


@dataclass(frozen=True)
class Schedule:
    strategy: Strategy
    epochs: tuple[frozenset[int], ...]
    subtask_count: int
    seed: int | None = None


@dataclass(frozen=True)
class ScheduleViolation:
    code: str
    message: str
    epoch: int | None = None


class Lcg64:
    """The documented 64-bit LCG behind the random strategy."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (LCG_MULTIPLIER * self.state + LCG_INCREMENT) & _MASK64
        return self.state

    def next_below(self, n: int) -> int:
        return (self.next_u64() >> 33) % n


def _normalize_kinds(kinds: Sequence[SubtaskKind | str]) -> list[SubtaskKind]:
    return [SubtaskKind(k) for k in kinds]


def _ours_epoch_sets(
    kinds: list[SubtaskKind], epochs: int
) -> list[frozenset[int]]:
    m = len(kinds)
    full = frozenset(range(1, m + 1))
    task_specific = [
        i for i, kind in enumerate(kinds, 1) if kind is SubtaskKind.TASK_SPECIFIC
    ]
    if m == 1 or not task_specific:
        # no curriculum is expressible: train on everything throughout
        return [full] * epochs
    if epochs == 1:
        return [full]

    if len(task_specific) >= 2:
        seed_set = list(task_specific[:2])
        rest = task_specific[2:]
    else:
        # pad the starting set to two subtasks: completion first, then
        # login, then any other non-task-specific subtask
        seed_set = list(task_specific)
        rest = []
        for wanted in (
            SubtaskKind.COMPLETION,
            SubtaskKind.LOGIN,
            SubtaskKind.OTHER_NON_TASK_SPECIFIC,
        ):
            for i, kind in enumerate(kinds, 1):
                if len(seed_set) >= 2:
                    break
                if kind is wanted and i not in seed_set:
                    seed_set.append(i)

    last = epochs - 1
    joiners: dict[int, list[int]] = {e: [] for e in range(1, epochs)}

    # Two regimes: with six or more subtasks, growth runs up to the
    # second-to-last epoch and all non-task-specific subtasks join at the
    # final one; with five or fewer, growth stops an epoch earlier so the
    # completion subtask joins one epoch before login.
    if m >= 6:
        growth_end = epochs - 2
        completion_epoch = last
        login_epoch = last
    else:
        growth_end = epochs - 3
        completion_epoch = max(1, epochs - 2)
        login_epoch = last

    slots = list(range(1, growth_end + 1))
    if rest:
        if slots:
            # back-loaded split: later slots receive the remainder, which
            # leaves the earliest epochs without additions when the
            # subtasks do not divide evenly
            g = len(slots)
            base, extra = divmod(len(rest), g)
            cursor = 0
            for j, epoch in enumerate(slots, 1):
                take = base + (1 if j > g - extra else 0)
                joiners[epoch].extend(rest[cursor:cursor + take])
                cursor += take
        else:
            # too few epochs for a growth phase: the remaining
            # task-specific subtasks join with the first non-task-specific
            # arrivals
            joiners[min(completion_epoch, login_epoch)].extend(rest)

    in_seed = set(seed_set)
    for i, kind in enumerate(kinds, 1):
        if kind is SubtaskKind.TASK_SPECIFIC or i in in_seed:
            continue
        if kind is SubtaskKind.LOGIN:
            joiners[login_epoch].append(i)
        else:
            joiners[completion_epoch].append(i)

    current = set(seed_set)
    sets = [frozenset(current)]
    for epoch in range(1, epochs):
        current.update(joiners[epoch])
        if epoch == last:
            current = set(full)
        sets.append(frozenset(current))
    return sets


def build_prost_schedule(
    kinds: Sequence[SubtaskKind | str], epochs: int
) -> Schedule:
    """Build the progressive schedule for one task.

    ``kinds`` gives each subtask's kind in order (length M); ``epochs`` is
    the number of training epochs E. The result is deterministic, starts
    from at least ``min(2, M)`` subtasks, introduces task-specific subtasks
    in their natural order before non-task-specific ones, and is the full
    set at the final epoch.
    """
    normalized = _normalize_kinds(kinds)
    if not normalized:
        raise ValueError("kinds must be non-empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    sets = _ours_epoch_sets(normalized, epochs)
    return Schedule(
        strategy=Strategy.OURS,
        epochs=tuple(sets),
        subtask_count=len(normalized),
    )


def _random_epoch_sets(
    m: int, epochs: int, seed: int
) -> list[frozenset[int]]:
    rng = Lcg64(seed)
    ranges = {}
    for number in range(1, m + 1):
        a = rng.next_below(epochs)
        b = rng.next_below(epochs)
        ranges[number] = (min(a, b), max(a, b))
    return [
        frozenset(
            number
            for number, (lo, hi) in ranges.items()
            if lo <= epoch <= hi
        )
        for epoch in range(epochs)
    ]


def _strip_end_epoch_sets(m: int, epochs: int) -> list[frozenset[int]]:
    # alternative decrement: drop the highest-numbered subtask each epoch,
    # never shrinking below min(2, M)
    floor = min(2, m)
    return [
        frozenset(range(1, max(m - epoch, floor) + 1))
        for epoch in range(epochs)
    ]


def build_schedule(
    strategy: Strategy | str,
    kinds: Sequence[SubtaskKind | str],
    epochs: int,
    seed: int | None = None,
    *,
    decrement_style: str = "mirror",
) -> Schedule:
    """Build a schedule under any strategy.

    ``seed`` is required by (and only used for) the random strategy.
    ``decrement_style`` selects between the default exact mirror of the
    progressive schedule and a ``"strip_end"`` variant that removes one
    trailing subtask per epoch.
    """
    strategy = Strategy(strategy)
    normalized = _normalize_kinds(kinds)
    if not normalized:
        raise ValueError("kinds must be non-empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    m = len(normalized)
    full = frozenset(range(1, m + 1))
    if strategy is Strategy.OURS:
        return build_prost_schedule(normalized, epochs)
    if strategy is Strategy.ALL:
        sets = [full] * epochs
    elif strategy is Strategy.DECREMENT:
        if decrement_style == "mirror":
            sets = list(reversed(_ours_epoch_sets(normalized, epochs)))
        elif decrement_style == "strip_end":
            sets = _strip_end_epoch_sets(m, epochs)
        else:
            raise ValueError(f"unknown decrement_style {decrement_style!r}")
    elif strategy is Strategy.RANDOM:
        if seed is None:
            raise MissingSeed("the random strategy requires a seed")
        sets = _random_epoch_sets(m, epochs, seed)
    else:  # pragma: no cover
        raise ValueError(f"unknown strategy {strategy!r}")
    return Schedule(
        strategy=strategy,
        epochs=tuple(sets),
        subtask_count=m,
        seed=seed if strategy is Strategy.RANDOM else None,
    )


def verify_schedule(schedule: Schedule) -> list[ScheduleViolation]:
    """Check a schedule against its strategy's invariants.

    Returns an empty list when the schedule is well-formed: every epoch set
    within 1..M, full coverage over all epochs, and per strategy — ours:
    monotone growth, a full final epoch, and a starting set of at least
    min(2, M); decrement: monotone shrinkage from a full first epoch; all:
    every epoch full.
    """
    violations: list[ScheduleViolation] = []
    m = schedule.subtask_count
    full = frozenset(range(1, m + 1))
    sets = schedule.epochs
    if not sets:
        return [ScheduleViolation(code="EMPTY", message="no epochs")]
    for epoch, included in enumerate(sets):
        stray = included - full
        if stray:
            violations.append(
                ScheduleViolation(
                    code="SUBSET",
                    message=f"epoch {epoch} includes unknown subtasks {sorted(stray)}",
                    epoch=epoch,
                )
            )
    union = frozenset().union(*sets)
    missing = full - union
    if missing:
        violations.append(
            ScheduleViolation(
                code="COVERAGE",
                message=f"subtasks never included: {sorted(missing)}",
            )
        )
    if schedule.strategy is Strategy.OURS:
        for epoch in range(1, len(sets)):
            if not sets[epoch] >= sets[epoch - 1]:
                violations.append(
                    ScheduleViolation(
                        code="MONOTONE",
                        message=f"epoch {epoch} dropped subtasks",
                        epoch=epoch,
                    )
                )
        if sets[-1] != full:
            violations.append(
                ScheduleViolation(
                    code="FINAL_NOT_FULL",
                    message="final epoch is not the full subtask set",
                    epoch=len(sets) - 1,
                )
            )
        if len(sets[0]) < min(2, m):
            violations.append(
                ScheduleViolation(
                    code="MIN_SEED",
                    message=(
                        f"first epoch has {len(sets[0])} subtasks, "
                        f"expected at least {min(2, m)}"
                    ),
                    epoch=0,
                )
            )
    elif schedule.strategy is Strategy.DECREMENT:
        for epoch in range(1, len(sets)):
            if not sets[epoch] <= sets[epoch - 1]:
                violations.append(
                    ScheduleViolation(
                        code="MONOTONE",
                        message=f"epoch {epoch} gained subtasks",
                        epoch=epoch,
                    )
                )
        if sets[0] != full:
            violations.append(
                ScheduleViolation(
                    code="FIRST_NOT_FULL",
                    message="first epoch is not the full subtask set",
                    epoch=0,
                )
            )
    elif schedule.strategy is Strategy.ALL:
        for epoch, included in enumerate(sets):
            if included != full:
                violations.append(
                    ScheduleViolation(
                        code="NOT_FULL",
                        message=f"epoch {epoch} is not the full subtask set",
                        epoch=epoch,
                    )
                )
    return violations


def schedule_to_dict(schedule: Schedule) -> dict:
    return {
        "strategy": schedule.strategy.value,
        "subtask_count": schedule.subtask_count,
        "seed": schedule.seed,
        "epochs": [sorted(included) for included in schedule.epochs],
    }


def schedule_lines(schedule: Schedule) -> list[str]:
    """Textual dump: one ``e<k>: {i,j,...}`` line per epoch."""
    return [
        "e{}: {{{}}}".format(epoch, ",".join(str(i) for i in sorted(included)))
        for epoch, included in enumerate(schedule.epochs)
    ]

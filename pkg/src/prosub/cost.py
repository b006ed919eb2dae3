"""Inference-cost accounting and Pareto-front computation.

Cost per call is ``2 * params * (input tokens + output tokens)``, taken in
exact integer arithmetic and summed over every agent call in a task. Token
counts come from run logs, never from re-tokenizing text. The Pareto front
keeps the points not dominated in the (lower cost, higher effectiveness)
partial order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .metrics import EmptyRunSet, RunRecord

_SI_PREFIXES = (
    (10**18, "E"),
    (10**15, "P"),
    (10**12, "T"),
    (10**9, "G"),
    (10**6, "M"),
    (10**3, "K"),
)

EFFECTIVENESS_METRICS = ("tgc", "sgc")


class UnknownAgent(KeyError):
    pass


class EmptyPointSet(ValueError):
    pass


@dataclass(frozen=True)
class AgentSpec:
    name: str
    params: int

    def __post_init__(self):
        if self.params <= 0:
            raise ValueError(f"agent {self.name!r} must have params > 0")


@dataclass(frozen=True)
class SystemConfig:
    system_id: str
    agents: tuple[AgentSpec, ...]

    def params_for(self, name: str) -> int:
        for agent in self.agents:
            if agent.name == name:
                return agent.params
        raise UnknownAgent(f"agent {name!r} not in system {self.system_id!r}")


@dataclass(frozen=True)
class CostPoint:
    system_id: str
    mean_flops_per_task: float
    tgc_percent: float
    sgc_percent: float


def flops_per_call(params: int, tokens_in: int, tokens_out: int) -> int:
    """Exact cost of one model call: 2 * params * (tokens_in + tokens_out)."""
    if params < 0 or tokens_in < 0 or tokens_out < 0:
        raise ValueError("params and token counts must be non-negative")
    return 2 * params * (tokens_in + tokens_out)


def record_flops(record: RunRecord, config: SystemConfig) -> int:
    total = 0
    for agent in record.agents:
        params = config.params_for(agent.name)
        for call in agent.calls:
            total += flops_per_call(params, call.tokens_in, call.tokens_out)
    return total


def aggregate_flops(records: Sequence[RunRecord], config: SystemConfig) -> float:
    """Mean cost per task over a run set; totals stay exact integers."""
    if not records:
        raise EmptyRunSet("no run records")
    return sum(record_flops(r, config) for r in records) / len(records)


def format_flops(value: float | int) -> str:
    """Human label with an SI prefix, e.g. 2.24e12 -> ``2.24 TFLOPs``."""
    magnitude = abs(value)
    for threshold, prefix in _SI_PREFIXES:
        if magnitude >= threshold:
            return f"{value / threshold:.2f} {prefix}FLOPs"
    return f"{float(value):.0f} FLOPs"


def _effectiveness(point: CostPoint, metric: str) -> float:
    if metric == "tgc":
        return point.tgc_percent
    if metric == "sgc":
        return point.sgc_percent
    raise ValueError(f"effectiveness must be one of {EFFECTIVENESS_METRICS}")


def dominates(q: CostPoint, p: CostPoint, metric: str = "tgc") -> bool:
    """q dominates p: no worse on both axes, strictly better on one."""
    q_eff, p_eff = _effectiveness(q, metric), _effectiveness(p, metric)
    if q_eff < p_eff or q.mean_flops_per_task > p.mean_flops_per_task:
        return False
    return q_eff > p_eff or q.mean_flops_per_task < p.mean_flops_per_task


def pareto_front(
    points: Sequence[CostPoint], effectiveness: str = "tgc"
) -> list[CostPoint]:
    """Non-dominated points, sorted by cost ascending then system id.

    Equal points do not dominate each other, so exact ties are all kept.
    """
    if not points:
        raise EmptyPointSet("no cost points")
    _effectiveness(points[0], effectiveness)
    front = [
        p
        for p in points
        if not any(dominates(q, p, effectiveness) for q in points)
    ]
    front.sort(key=lambda p: (p.mean_flops_per_task, p.system_id))
    return front


def system_config_from_dict(obj: dict) -> SystemConfig:
    agents = tuple(
        AgentSpec(name=str(agent["name"]), params=int(agent["params"]))
        for agent in obj.get("agents", [])
    )
    return SystemConfig(system_id=str(obj.get("system_id", "")), agents=agents)


def cost_point_to_dict(point: CostPoint) -> dict:
    return {
        "system_id": point.system_id,
        "mean_flops_per_task": point.mean_flops_per_task,
        "tgc_percent": point.tgc_percent,
        "sgc_percent": point.sgc_percent,
    }


def cost_point_from_dict(obj: dict) -> CostPoint:
    return CostPoint(
        system_id=str(obj["system_id"]),
        mean_flops_per_task=float(obj["mean_flops_per_task"]),
        tgc_percent=float(obj["tgc_percent"]),
        sgc_percent=float(obj["sgc_percent"]),
    )

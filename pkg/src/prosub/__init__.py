"""Turn multi-agent task trajectories into per-epoch, per-role fine-tuning
datasets under a progressive subtask curriculum, and analyze agent-system
runs for effectiveness versus computational cost."""

__version__ = "0.1.0"

from .cost import (
    AgentSpec,
    CostPoint,
    EmptyPointSet,
    SystemConfig,
    UnknownAgent,
    aggregate_flops,
    flops_per_call,
    format_flops,
    pareto_front,
)
from .curriculum import (
    Lcg64,
    MissingSeed,
    Schedule,
    ScheduleViolation,
    Strategy,
    build_prost_schedule,
    build_schedule,
    schedule_lines,
    schedule_to_dict,
    verify_schedule,
)
from .masking import (
    AgentRole,
    EmissionError,
    EmissionManifest,
    EpochOutOfRange,
    HistoryMode,
    Segment,
    Speaker,
    TrainingSequence,
    UnclassifiedSteps,
    build_critic_examples,
    build_executor_examples,
    build_orchestrator_examples,
    emit_epoch_datasets,
)
from .metrics import (
    EmptyRunSet,
    ErrorRateRow,
    ErrorRateTable,
    RunLogError,
    RunRecord,
    TokenStats,
    inference_error_rates,
    load_run_records,
    records_from_jsonl,
    sgc,
    tgc,
    token_stats,
    training_error_rates,
)
from .synthesis import (
    ChatEndpoint,
    ConversionFailed,
    ConversionOutcome,
    EndpointConfig,
    EndpointError,
    HttpChatEndpoint,
    PreservationReport,
    SingleAgentTrajectory,
    TemplateError,
    Turn,
    build_conversion_prompt,
    convert,
    convert_corpus,
    parse_single_agent_trajectory,
    verify_step_preservation,
)
from .trajectory import (
    Budgets,
    PatternError,
    SchemaError,
    Source,
    Step,
    StepRole,
    StepStatus,
    Subtask,
    SubtaskKind,
    Trajectory,
    ValidationReport,
    Violation,
    classify_steps,
    classify_subtasks,
    load_error_patterns,
    load_trajectory,
    parse_trajectory,
    serialize_trajectory,
    validate_trajectory,
    write_trajectory,
)

"""Uncertainty-aware scheduling of compound LLM applications on simulated clusters."""

from .bayesnet import (
    CachedInference,
    DiscreteBayesNet,
    Factor,
    correlated_set,
    entropy,
    fit_cpts,
    joint_entropy,
    joint_query,
    learn_structure,
    load_bn,
    mutual_information,
    save_bn,
)
from .errors import (
    ConfigError,
    InconsistentEvidenceError,
    LLMSchedError,
    RangeError,
    StructuralError,
    TraceParseError,
    TrainingError,
)
from .model import (
    ApplicationTemplate,
    ChainSpec,
    DurationDistribution,
    DynamicStageSpec,
    JobInstance,
    JobTruth,
    RevealedStage,
    StageKind,
    StageState,
    StageTemplate,
    TaskInstance,
    TaskState,
    expand_dynamic,
    ready_stages,
    topological_stages,
)
from .profiler import (
    ApplicationProfile,
    CalibrationProfile,
    DynamicProfile,
    EstimationSession,
    calibrate,
    discretize,
    load_profile,
    save_profile,
    train_profile,
)
from .schedulers import (
    POLICIES,
    ScheduleDecision,
    SchedulerConfig,
    TaskRef,
    assign_llm_task,
    decide,
    non_overlapping_sets,
)
from .simulator import (
    ClusterConfig,
    JobRecord,
    RunMetrics,
    Simulation,
    read_job_records,
    rescale_llm_tasks,
    run,
    write_job_records,
    write_summary,
)
from .uncertainty import (
    DynamicUncertainty,
    UncertaintyScore,
    binary_entropy,
    dynamic_stage_entropy,
    stage_range,
    uncertainty_reduction,
)
from .workload import (
    Catalog,
    TraceRecord,
    WorkloadSpec,
    collect_trace,
    generate_workload,
    load_catalog,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [
    "ApplicationProfile",
    "ApplicationTemplate",
    "CachedInference",
    "CalibrationProfile",
    "Catalog",
    "ChainSpec",
    "ClusterConfig",
    "ConfigError",
    "DiscreteBayesNet",
    "DurationDistribution",
    "DynamicProfile",
    "DynamicStageSpec",
    "DynamicUncertainty",
    "EstimationSession",
    "Factor",
    "InconsistentEvidenceError",
    "JobInstance",
    "JobRecord",
    "JobTruth",
    "LLMSchedError",
    "POLICIES",
    "RangeError",
    "RevealedStage",
    "RunMetrics",
    "ScheduleDecision",
    "SchedulerConfig",
    "Simulation",
    "StageKind",
    "StageState",
    "StageTemplate",
    "StructuralError",
    "TaskInstance",
    "TaskRef",
    "TaskState",
    "TraceParseError",
    "TraceRecord",
    "TrainingError",
    "UncertaintyScore",
    "WorkloadSpec",
    "assign_llm_task",
    "binary_entropy",
    "calibrate",
    "collect_trace",
    "correlated_set",
    "decide",
    "discretize",
    "dynamic_stage_entropy",
    "entropy",
    "expand_dynamic",
    "fit_cpts",
    "generate_workload",
    "joint_entropy",
    "joint_query",
    "learn_structure",
    "load_bn",
    "load_catalog",
    "load_profile",
    "mutual_information",
    "non_overlapping_sets",
    "read_job_records",
    "read_trace",
    "ready_stages",
    "rescale_llm_tasks",
    "run",
    "save_bn",
    "save_profile",
    "stage_range",
    "topological_stages",
    "train_profile",
    "uncertainty_reduction",
    "write_job_records",
    "write_summary",
    "write_trace",
]

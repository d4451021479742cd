"""Two-job motivating scenario used by the golden test and the acceptance gate.

Job A: LLM 2 s, then a dynamic stage that expands to one 1 s regular stage
(actual total 3 s, historical mean 15 s). Job B: LLM 2 s then LLM 3 s (actual
total 5 s, historical mean 9 s). One regular executor, one LLM executor, B=1.
Static shortest-job-first trusts the historical means, runs B first, and
averages 6.5 s. Scheduling the uncertainty-resolving stage first (epsilon 1,
ratio 1) reveals A's true size, finishes it early, and averages 5.0 s.
"""

from llmsched.model import (
    ApplicationTemplate,
    DurationDistribution,
    DynamicStageSpec,
    JobInstance,
    JobTruth,
    StageKind,
    StageTemplate,
)
from llmsched.profiler import ApplicationProfile, CalibrationProfile, DynamicProfile
from llmsched.schedulers import SchedulerConfig
from llmsched.simulator import ClusterConfig, run

CAL = CalibrationProfile((20.0,))
CLUSTER = ClusterConfig(regular_executors=1, llm_executors=1, max_batch=1, calibration=CAL)


def _automation_app():
    spec = DynamicStageSpec(candidates=(2,), edges=())
    template = ApplicationTemplate(
        app_id="automation",
        stages={
            0: StageTemplate(0, StageKind.LLM, (), 1),
            1: StageTemplate(1, StageKind.DYNAMIC, (0,), 1, dynamic=spec),
        },
        candidate_stages={2: StageTemplate(2, StageKind.REGULAR, (), 1)},
    )
    profile = ApplicationProfile(
        app_id="automation",
        stage_dists={
            0: DurationDistribution.point(2.0),
            2: DurationDistribution.point(1.0),
        },
        bn=None,
        dynamic={
            1: DynamicProfile(
                stage_id=1,
                node_probs={2: 0.5},
                edge_probs={},
                edge_cond_probs={},
                makespan=DurationDistribution(bounds=((0.5, 9.0),), probs=(1.0,)),
                expected_span=1.0,
            )
        },
        mean_job_duration=15.0,
        calibration=CAL,
    )
    return template, profile


def _codegen_app():
    template = ApplicationTemplate(
        app_id="codegen",
        stages={
            0: StageTemplate(0, StageKind.LLM, (), 1),
            1: StageTemplate(1, StageKind.LLM, (0,), 1),
        },
    )
    profile = ApplicationProfile(
        app_id="codegen",
        stage_dists={
            0: DurationDistribution.point(2.0),
            1: DurationDistribution.point(3.0),
        },
        bn=None,
        dynamic={},
        mean_job_duration=9.0,
        calibration=CAL,
    )
    return template, profile


def build():
    ta_t, ta_p = _automation_app()
    cg_t, cg_p = _codegen_app()
    jobs = [
        JobInstance(
            job_id=0,
            template=ta_t,
            truth=JobTruth(
                durations={0: 2.0, 2: 1.0},
                dynamic_nodes={1: (2,)},
                dynamic_edges={1: ()},
            ),
            arrival_time=0.0,
        ),
        JobInstance(
            job_id=1,
            template=cg_t,
            truth=JobTruth(durations={0: 2.0, 1: 3.0}),
            arrival_time=0.0,
        ),
    ]
    profiles = {"automation": ta_p, "codegen": cg_p}
    return jobs, profiles


def average_jct(policy_config: SchedulerConfig) -> float:
    jobs, profiles = build()
    return run(CLUSTER, jobs, policy_config, profiles, check_invariants=True).average_jct


def sjf_jct() -> float:
    return average_jct(SchedulerConfig(policy="sjf"))


def uncertainty_first_jct() -> float:
    return average_jct(SchedulerConfig(policy="llmsched", epsilon=1.0, ratio=1.0))

"""Scheduling policies producing ordered task preference lists.

Every policy returns a full ordering over the currently schedulable tasks (all
unlaunched tasks of Ready stages and of Running stages with unlaunched tasks);
the simulator dispatches a greedy prefix onto free capacity. LLMSched merges a
shortest-remaining-time ordering with an uncertainty-reduction ordering via an
epsilon-greedy draw per step; the rest are classic baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import JobInstance, StageKind
from .profiler import EstimationSession

POLICIES = ("fcfs", "fair", "sjf", "srtf", "argus", "llmsched")


@dataclass(frozen=True)
class TaskRef:
    job_id: int
    stage_id: int
    task_index: int
    kind: StageKind


@dataclass
class ScheduleDecision:
    """Ordered preference lists: T_r for regular executors, T_l for LLM slots."""

    regular: list[TaskRef] = field(default_factory=list)
    llm: list[TaskRef] = field(default_factory=list)

    def all_refs(self) -> list[TaskRef]:
        return self.regular + self.llm


@dataclass(frozen=True)
class SchedulerConfig:
    policy: str = "llmsched"
    epsilon: float = 0.3
    ratio: float = 0.2
    seed: int = 0
    use_posteriors: bool = True

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown scheduler policy {self.policy!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must be in [0, 1]")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("ratio must be in (0, 1]")


def non_overlapping_sets(intervals) -> list[list]:
    """Group keys whose closed intervals form overlap-connected components.

    intervals: iterable of (key, lo, hi). Components are ordered by ascending
    lower bound; touching endpoints count as overlap.
    """
    items = sorted(intervals, key=lambda kv: (kv[1], kv[2]))
    groups: list[list] = []
    cur: list = []
    cur_hi = -math.inf
    for key, lo, hi in items:
        if cur and lo > cur_hi:
            groups.append(cur)
            cur = []
            cur_hi = -math.inf
        cur.append(key)
        cur_hi = max(cur_hi, hi)
    if cur:
        groups.append(cur)
    return groups


def assign_llm_task(task, loads, max_batch: int) -> int | None:
    """Executor with a free batch slot and fewest running tasks; ties by id."""
    best = None
    for i, load in enumerate(loads):
        if load < max_batch and (best is None or load < loads[best]):
            best = i
    return best


def _schedulable(job: JobInstance) -> list[int]:
    """Ready stages plus running stages with unlaunched tasks, in topo order."""
    ids = set(job.ready_stages())
    ids.update(
        sid for sid in job.running_stages() if job.stages[sid].unlaunched_tasks()
    )
    return [sid for sid in job.topological_order() if sid in ids]


def _emit(order) -> ScheduleDecision:
    """Turn an ordered list of (job, stage_id, count|None) into task lists.

    Skips tasks already emitted, so residue passes are duplicate-free and every
    schedulable task appears exactly once.
    """
    decision = ScheduleDecision()
    emitted: dict[tuple[int, int], int] = {}
    for job, sid, k in order:
        st = job.stages[sid]
        tasks = st.unlaunched_tasks()
        done = emitted.get((job.job_id, sid), 0)
        if done >= len(tasks):
            continue
        end = len(tasks) if k is None else min(done + k, len(tasks))
        out = decision.llm if st.kind is StageKind.LLM else decision.regular
        for t in tasks[done:end]:
            out.append(TaskRef(job.job_id, sid, t.index, st.kind))
        emitted[(job.job_id, sid)] = end
    return decision


def baseline_schedule(
    policy: str,
    jobs: list[JobInstance],
    session: EstimationSession,
    now: float,
    batch_hint: int = 1,
) -> ScheduleDecision:
    """FCFS, Fair, SJF, SRTF, or Argus ordering over the schedulable tasks."""
    sched = {j.job_id: _schedulable(j) for j in jobs}
    order: list[tuple[JobInstance, int, None]] = []
    if policy in ("fcfs", "sjf", "srtf"):
        if policy == "fcfs":
            key = lambda j: (j.arrival_time, j.job_id)
        elif policy == "sjf":
            key = lambda j: (session.mean_job_duration(j.app_id), j.arrival_time, j.job_id)
        else:
            rd = {
                j.job_id: session.estimated_remaining_duration(j, now, batch_hint)
                for j in jobs
            }
            key = lambda j: (rd[j.job_id], j.arrival_time, j.job_id)
        for job in sorted(jobs, key=key):
            order.extend((job, sid, None) for sid in sched[job.job_id])
    elif policy == "fair":
        queue = [(j, list(sched[j.job_id])) for j in sorted(jobs, key=lambda j: (j.arrival_time, j.job_id))]
        while any(stages for _, stages in queue):
            for job, stages in queue:
                if stages:
                    order.append((job, stages.pop(0), None))
    elif policy == "argus":
        entries = []
        for job in jobs:
            depth: dict[int, int] = {}
            topo = job.topological_order()
            for sid in topo:
                preds = job.stages[sid].predecessors
                depth[sid] = 1 + max((depth[p] for p in preds), default=-1)
            children = {sid: 0 for sid in topo}
            for sid in topo:
                for p in job.stages[sid].predecessors:
                    children[p] += 1
            for sid in sched[job.job_id]:
                entries.append(
                    (
                        depth[sid],
                        -children[sid],
                        -len(job.stages[sid].tasks),
                        sid,
                        job.arrival_time,
                        job.job_id,
                        job,
                    )
                )
        entries.sort(key=lambda e: e[:6])
        order = [(e[6], e[3], None) for e in entries]
    else:
        raise ConfigError(f"unknown scheduler policy {policy!r}")
    return _emit(order)


def llmsched_schedule(
    jobs: list[JobInstance],
    session: EstimationSession,
    now: float,
    batch_hint: int,
    epsilon: float,
    ratio: float,
    rng,
    score_sink=None,
) -> ScheduleDecision:
    """Epsilon-greedy merge of the SRTF ordering with the uncertainty ordering.

    S_t: stages of jobs ascending by estimated remaining duration. S_u: jobs
    grouped into non-overlapping remaining-duration interval sets ordered by
    lower bound; within a set, stages descending by uncertainty reduction.
    Each step pops the head of both lists and keeps one: the S_u head (a sample
    of ceil(ratio * tasks) of its tasks) with probability epsilon, else the S_t
    head in full. A stage enqueued once is skipped wherever it surfaces later;
    leftovers are appended S_t-first so every schedulable task is listed.
    """
    sched = {j.job_id: _schedulable(j) for j in jobs}
    rd = {}
    spans = []
    for j in jobs:
        lo, hi, mean = session.remaining_summary(j, now, batch_hint)
        rd[j.job_id] = mean
        spans.append((j, lo, hi))
    s_t = [
        (job, sid)
        for job in sorted(jobs, key=lambda j: (rd[j.job_id], j.arrival_time, j.job_id))
        for sid in sched[job.job_id]
    ]
    s_u: list[tuple[JobInstance, int]] = []
    for group in non_overlapping_sets(spans):
        entries = []
        for job in group:
            for sid in sched[job.job_id]:
                score = session.uncertainty_score(job, sid)
                if score_sink is not None:
                    score_sink(now, job.job_id, sid, score)
                entries.append((-score.reduction, job.arrival_time, job.job_id, sid, job))
        entries.sort(key=lambda e: e[:4])
        s_u.extend((e[4], e[3]) for e in entries)

    taken: set[tuple[int, int]] = set()
    order: list[tuple[JobInstance, int, int | None]] = []

    def advance(lst: list, i: int) -> int:
        while i < len(lst) and (lst[i][0].job_id, lst[i][1]) in taken:
            i += 1
        return i

    i_t = i_u = 0
    while True:
        i_t = advance(s_t, i_t)
        i_u = advance(s_u, i_u)
        if i_t >= len(s_t) or i_u >= len(s_u):
            break
        head_t = s_t[i_t]
        head_u = s_u[i_u]
        i_t += 1
        i_u += 1
        p = rng.random()
        if epsilon > 0 and p <= epsilon:
            job, sid = head_u
            n = len(job.stages[sid].unlaunched_tasks())
            order.append((job, sid, max(1, math.ceil(ratio * n))))
        else:
            job, sid = head_t
            order.append((job, sid, None))
        taken.add((job.job_id, sid))
    # residue: everything not yet fully listed, exploitation order first
    for lst in (s_t, s_u):
        order.extend((job, sid, None) for job, sid in lst)
    return _emit(order)


def decide(
    config: SchedulerConfig,
    jobs,
    session: EstimationSession,
    now: float,
    batch_hint: int,
    rng,
    score_sink=None,
) -> ScheduleDecision:
    """One scheduling decision over the active jobs, per the configured policy."""
    jobs = sorted(jobs, key=lambda j: (j.arrival_time, j.job_id))
    if not jobs:
        return ScheduleDecision()
    if config.policy == "llmsched":
        return llmsched_schedule(
            jobs,
            session,
            now,
            batch_hint,
            config.epsilon,
            config.ratio,
            rng,
            score_sink,
        )
    return baseline_schedule(config.policy, jobs, session, now, batch_hint)

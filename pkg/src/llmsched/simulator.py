"""Deterministic discrete-event cluster simulator.

Regular executors run one task each; LLM executors batch up to B tasks whose
progress accrues at the batch-dependent per-token rate, so joining or leaving a
batch rescales the remaining time of every co-batched task. The scheduler is
invoked once per timestamp that saw an arrival or completion (completions are
processed first so freed capacity is visible). True LLM durations are stored at
batch size 1; experienced durations emerge from rescaling.
"""

from __future__ import annotations

import heapq
import json
import statistics
import time as _time
from dataclasses import dataclass, field

from .errors import ConfigError, StructuralError
from .model import JobInstance, StageKind, StageState, TaskInstance, TaskState
from .profiler import ApplicationProfile, CalibrationProfile, EstimationSession
from .schedulers import ScheduleDecision, SchedulerConfig, assign_llm_task, decide

import random

# event kind priorities: completions first, then arrivals, then the epoch
EVENT_TASK_DONE = 0
EVENT_ARRIVAL = 1
EVENT_EPOCH = 2


@dataclass(frozen=True)
class ClusterConfig:
    regular_executors: int
    llm_executors: int
    max_batch: int
    calibration: CalibrationProfile

    def __post_init__(self):
        if self.regular_executors < 1 or self.llm_executors < 1:
            raise ConfigError("executor counts must be >= 1")
        if self.max_batch < 1:
            raise ConfigError("max_batch must be >= 1")
        if self.calibration.max_batch < self.max_batch:
            raise ConfigError("calibration table does not cover the batch range")


class LlmExecutor:
    def __init__(self, executor_id: int):
        self.executor_id = executor_id
        self.tasks: list[TaskInstance] = []

    @property
    def batch(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: int
    seq: int
    payload: object = None


@dataclass(frozen=True)
class JobRecord:
    job_id: int
    app_id: str
    arrival: float
    completion: float
    jct: float


@dataclass
class RunMetrics:
    records: list[JobRecord]
    average_jct: float
    utilization: dict[str, float]
    overhead_ms_mean: float
    overhead_ms_max: float
    decisions: int
    events: int

    def jcts(self) -> list[float]:
        return [r.jct for r in self.records]


def rescale_llm_tasks(
    executor: LlmExecutor,
    b_old: int,
    b_new: int,
    now: float,
    calibration: CalibrationProfile,
    schedule_completion,
) -> None:
    """Re-key completion events after a batch size change.

    Progress is materialized in batch-1 units at the old rate, then the
    remainder is stretched by l(b_new)/l(1). schedule_completion(task, when) is
    called for every running task with its new completion time.
    """
    l1 = calibration.latency(1)
    rate_old = l1 / calibration.latency(b_old)
    stretch = calibration.latency(b_new) / l1
    for task in executor.tasks:
        task.progress += (now - task.progress_time) * rate_old
        task.progress_time = now
        remaining = max(task.true_duration - task.progress, 0.0)
        task.event_version += 1
        schedule_completion(task, now + remaining * stretch)


class Simulation:
    """One deterministic run of a workload under a scheduler policy."""

    def __init__(
        self,
        cluster: ClusterConfig,
        jobs: list[JobInstance],
        scheduler: SchedulerConfig,
        profiles: dict[str, ApplicationProfile],
        check_invariants: bool = False,
        score_sink=None,
    ):
        if not jobs:
            raise ConfigError("empty workload")
        for job in jobs:
            if job.app_id not in profiles:
                raise ConfigError(f"no profile for application {job.app_id}")
        self.cluster = cluster
        self.jobs = list(jobs)
        self.scheduler = scheduler
        self.session = EstimationSession(profiles, use_posteriors=scheduler.use_posteriors)
        self.check_invariants = check_invariants
        self.score_sink = score_sink
        self.rng = random.Random(scheduler.seed)

        self._jobs_by_id = {j.job_id: j for j in self.jobs}
        self._active: dict[int, JobInstance] = {}
        self._llm = [LlmExecutor(i) for i in range(cluster.llm_executors)]
        self._regular_running: set[tuple[int, int, int]] = set()
        self._heap: list[tuple[float, int, int, object]] = []
        self._seq = 0
        self._pending_epochs: set[float] = set()
        self._overheads_ms: list[float] = []
        self._events = 0
        self._decisions = 0
        self._now = 0.0
        self._last_t: float | None = None
        self._busy_regular = 0.0
        self._busy_llm = 0.0

    # -- event plumbing ----------------------------------------------------

    def _push(self, when: float, kind: int, payload=None):
        heapq.heappush(self._heap, (when, kind, self._seq, payload))
        self._seq += 1

    def _push_completion(self, task: TaskInstance, when: float):
        self._push(when, EVENT_TASK_DONE, (task, task.event_version))

    def _want_epoch(self, when: float):
        if when not in self._pending_epochs:
            self._pending_epochs.add(when)
            self._push(when, EVENT_EPOCH)

    def _advance(self, t: float):
        if self._last_t is not None and t > self._last_t:
            dt = t - self._last_t
            self._busy_regular += dt * len(self._regular_running)
            self._busy_llm += dt * sum(1 for e in self._llm if e.tasks)
        self._last_t = t if self._last_t is None else max(self._last_t, t)
        self._now = t

    # -- task lifecycle ----------------------------------------------------

    def _task(self, ref) -> TaskInstance:
        return self._jobs_by_id[ref.job_id].stages[ref.stage_id].tasks[ref.task_index]

    def _start_stage_if_needed(self, job: JobInstance, stage_id: int):
        st = job.stages[stage_id]
        if st.phase is StageState.BLOCKED:
            job.mark_running(stage_id)

    def _check_deps(self, job: JobInstance, stage_id: int):
        st = job.stages[stage_id]
        for p in st.predecessors:
            if not job.stages[p].settled:
                raise StructuralError(
                    f"job {job.job_id}: task of stage {stage_id} started "
                    f"before predecessor {p} settled"
                )

    def _start_regular(self, task: TaskInstance, now: float):
        job = self._jobs_by_id[task.job_id]
        self._check_deps(job, task.stage_id)
        self._start_stage_if_needed(job, task.stage_id)
        task.state = TaskState.RUNNING
        task.start_time = now
        task.progress = 0.0
        task.progress_time = now
        self._regular_running.add((task.job_id, task.stage_id, task.index))
        self._push_completion(task, now + task.true_duration)

    def _start_llm(self, task: TaskInstance, executor_id: int, now: float):
        job = self._jobs_by_id[task.job_id]
        self._check_deps(job, task.stage_id)
        self._start_stage_if_needed(job, task.stage_id)
        ex = self._llm[executor_id]
        b_new = ex.batch + 1
        if ex.tasks:
            rescale_llm_tasks(
                ex, ex.batch, b_new, now, self.cluster.calibration, self._push_completion
            )
        task.state = TaskState.RUNNING
        task.start_time = now
        task.progress = 0.0
        task.progress_time = now
        task.executor = executor_id
        ex.tasks.append(task)
        stretch = self.cluster.calibration.latency(b_new) / self.cluster.calibration.latency(1)
        self._push_completion(task, now + task.true_duration * stretch)

    def complete_task(self, task: TaskInstance, now: float):
        """Free capacity, settle the stage when its last task ends, propagate
        chain termination and dynamic expansion, and record job completion."""
        job = self._jobs_by_id[task.job_id]
        task.state = TaskState.DONE
        task.progress = task.true_duration
        task.progress_time = now
        if task.kind is StageKind.LLM:
            ex = self._llm[task.executor]
            b_old = ex.batch
            ex.tasks.remove(task)
            if ex.tasks:
                rescale_llm_tasks(
                    ex, b_old, b_old - 1, now, self.cluster.calibration, self._push_completion
                )
        else:
            self._regular_running.discard((task.job_id, task.stage_id, task.index))
        st = job.stages[task.stage_id]
        if all(t.state is TaskState.DONE for t in st.tasks):
            observed = sum(t.true_duration for t in st.tasks) / len(st.tasks)
            skipped = job.complete_stage(task.stage_id, now, observed)
            self.session.update_evidence(job, task.stage_id, observed)
            for sid in skipped:
                self.session.update_evidence(job, sid, 0.0)
            for dyn in job.expandable_dynamic_stages():
                job.expand_dynamic(
                    dyn,
                    job.truth.dynamic_nodes.get(dyn, ()),
                    job.truth.dynamic_edges.get(dyn, ()),
                    now,
                )
            if job.is_complete:
                job.completion_time = now
                self._active.pop(job.job_id, None)
                self.session.forget_job(job)

    # -- scheduling --------------------------------------------------------

    def _batch_hint(self) -> int:
        running = sum(e.batch for e in self._llm)
        hint = int(round(running / len(self._llm)))
        return min(max(hint, 1), self.cluster.max_batch)

    def _epoch(self, now: float):
        self._pending_epochs.discard(now)
        jobs = list(self._active.values())
        if not jobs:
            return
        t0 = _time.perf_counter()
        decision = decide(
            self.scheduler,
            jobs,
            self.session,
            now,
            self._batch_hint(),
            self.rng,
            self.score_sink,
        )
        self._overheads_ms.append((_time.perf_counter() - t0) * 1e3)
        self._decisions += 1
        self._dispatch(decision, now)
        if self.check_invariants:
            self._verify(now)

    def _dispatch(self, decision: ScheduleDecision, now: float):
        free = self.cluster.regular_executors - len(self._regular_running)
        for ref in decision.regular:
            if free <= 0:
                break
            task = self._task(ref)
            if task.state is not TaskState.NOT_STARTED:
                continue
            self._start_regular(task, now)
            free -= 1
        for ref in decision.llm:
            loads = [e.batch for e in self._llm]
            executor_id = assign_llm_task(ref, loads, self.cluster.max_batch)
            if executor_id is None:
                break
            task = self._task(ref)
            if task.state is not TaskState.NOT_STARTED:
                continue
            self._start_llm(task, executor_id, now)

    def _verify(self, now: float):
        if len(self._regular_running) > self.cluster.regular_executors:
            raise StructuralError("regular executor capacity exceeded")
        for ex in self._llm:
            if ex.batch > self.cluster.max_batch:
                raise StructuralError(f"executor {ex.executor_id} batch exceeds limit")
        free_regular = self.cluster.regular_executors - len(self._regular_running)
        free_llm = any(e.batch < self.cluster.max_batch for e in self._llm)
        for job in self._active.values():
            for sid in job.ready_stages() + job.running_stages():
                st = job.stages[sid]
                for t in st.unlaunched_tasks():
                    if st.kind is StageKind.LLM and free_llm:
                        raise StructuralError("idle LLM slot with a ready LLM task")
                    if st.kind is StageKind.REGULAR and free_regular > 0:
                        raise StructuralError("idle regular executor with a ready task")

    # -- main loop ---------------------------------------------------------

    def run(self) -> RunMetrics:
        for job in self.jobs:
            self._push(job.arrival_time, EVENT_ARRIVAL, job)
        total_tasks = sum(len(st.tasks) for j in self.jobs for st in j.stages.values())
        cap = 1000 + 1000 * max(total_tasks, 1)
        while self._heap:
            when, kind, _, payload = heapq.heappop(self._heap)
            if kind == EVENT_TASK_DONE:
                task, version = payload
                if task.event_version != version or task.state is not TaskState.RUNNING:
                    continue  # superseded by a rescale or already finished
            self._events += 1
            if self._events > cap:
                raise StructuralError("simulation did not terminate (event cap hit)")
            self._advance(when)
            if kind == EVENT_ARRIVAL:
                job = payload
                self._active[job.job_id] = job
                self.session.register_job(job)
                self._want_epoch(when)
            elif kind == EVENT_TASK_DONE:
                self.complete_task(task, when)
                self._want_epoch(when)
            else:
                self._epoch(when)
        unfinished = [j.job_id for j in self.jobs if not j.is_complete]
        if unfinished:
            raise StructuralError(f"jobs never completed: {unfinished[:5]}")
        records = [
            JobRecord(j.job_id, j.app_id, j.arrival_time, j.completion_time, j.jct())
            for j in sorted(self.jobs, key=lambda j: j.job_id)
        ]
        horizon_start = min(j.arrival_time for j in self.jobs)
        horizon = max(self._now - horizon_start, 0.0)
        util = {"regular": 0.0, "llm": 0.0}
        if horizon > 0:
            util["regular"] = self._busy_regular / (horizon * self.cluster.regular_executors)
            util["llm"] = self._busy_llm / (horizon * self.cluster.llm_executors)
        return RunMetrics(
            records=records,
            average_jct=statistics.fmean(r.jct for r in records),
            utilization=util,
            overhead_ms_mean=statistics.fmean(self._overheads_ms) if self._overheads_ms else 0.0,
            overhead_ms_max=max(self._overheads_ms, default=0.0),
            decisions=self._decisions,
            events=self._events,
        )


def run(
    cluster: ClusterConfig,
    jobs: list[JobInstance],
    scheduler: SchedulerConfig,
    profiles: dict[str, ApplicationProfile],
    check_invariants: bool = False,
    score_sink=None,
) -> RunMetrics:
    """Simulate the workload to completion; see Simulation for the mechanics."""
    return Simulation(cluster, jobs, scheduler, profiles, check_invariants, score_sink).run()


def write_job_records(metrics: RunMetrics, path: str):
    """Per-job CSV; deterministic bytes for identical (config, workload, seed)."""
    with open(path, "w") as fh:
        fh.write("job_id,app_id,arrival,completion,jct\n")
        for r in metrics.records:
            fh.write(f"{r.job_id},{r.app_id},{r.arrival!r},{r.completion!r},{r.jct!r}\n")


def read_job_records(path: str) -> list[JobRecord]:
    out = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            job_id, app_id, arrival, completion, jct = line.rstrip("\n").split(",")
            out.append(
                JobRecord(int(job_id), app_id, float(arrival), float(completion), float(jct))
            )
    return out


def write_summary(metrics: RunMetrics, config: dict, path: str):
    """Run summary with the full configuration echoed for provenance.

    Overhead fields are wall-clock measurements and are the only
    non-deterministic content across reruns.
    """
    payload = {
        "config": config,
        "num_jobs": len(metrics.records),
        "average_jct": metrics.average_jct,
        "utilization": metrics.utilization,
        "overhead_ms_mean": metrics.overhead_ms_mean,
        "overhead_ms_max": metrics.overhead_ms_max,
        "decisions": metrics.decisions,
        "events": metrics.events,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")

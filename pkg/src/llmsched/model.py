"""Application DAG model: duration distributions, stage templates, and job instances.

A job is an instance of an application template. The template fixes the base DAG
(including dynamic placeholder stages and self-loop chains padded to their maximum
iteration count); the job's hidden truth fixes per-stage durations, the realized
chain length, and the realized subgraph of every dynamic stage. The truth is only
revealed through execution: stage completions, chain termination, and dynamic
expansion mutate the revealed view that schedulers are allowed to inspect.
"""

from __future__ import annotations

import heapq
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum

from .errors import RangeError, StructuralError

PROB_EPS = 1e-12


class StageKind(str, Enum):
    REGULAR = "regular"
    LLM = "llm"
    DYNAMIC = "dynamic"


class StageState(str, Enum):
    BLOCKED = "blocked"
    READY = "ready"
    RUNNING = "running"
    DONE = "done"
    SKIPPED = "skipped"


class TaskState(str, Enum):
    NOT_STARTED = "not_started"
    RUNNING = "running"
    DONE = "done"


@dataclass(frozen=True)
class DurationDistribution:
    """Discrete distribution over non-overlapping duration intervals.

    Each state is a closed interval [lo, hi] in seconds; the interval midpoint is
    the state's representative value. A degenerate [0, 0] state encodes "did not
    execute" (skipped chain tail, unrealized candidate).
    """

    bounds: tuple[tuple[float, float], ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.bounds) == 0:
            raise RangeError("distribution needs at least one interval")
        if len(self.bounds) != len(self.probs):
            raise RangeError("bounds/probs length mismatch")
        prev_hi = None
        for lo, hi in self.bounds:
            if lo < 0 or hi < lo:
                raise RangeError(f"bad interval [{lo}, {hi}]")
            if prev_hi is not None and lo < prev_hi:
                raise RangeError("intervals must be ordered and non-overlapping")
            prev_hi = hi
        if any(p < 0 for p in self.probs):
            raise RangeError("negative probability")
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise RangeError(f"probabilities sum to {sum(self.probs)}, not 1")

    @classmethod
    def point(cls, value: float) -> "DurationDistribution":
        return cls(bounds=((value, value),), probs=(1.0,))

    @property
    def num_states(self) -> int:
        return len(self.bounds)

    def representative(self, idx: int) -> float:
        lo, hi = self.bounds[idx]
        return 0.5 * (lo + hi)

    def mean(self) -> float:
        # memoized: sessions query the same posterior object every epoch
        got = self.__dict__.get("_mean")
        if got is None:
            got = sum(p * self.representative(i) for i, p in enumerate(self.probs))
            self.__dict__["_mean"] = got
        return got

    def support(self, eps: float = PROB_EPS) -> tuple[float, float]:
        """(lowest lower edge, highest upper edge) over states with prob > eps."""
        if eps == PROB_EPS:
            got = self.__dict__.get("_support")
            if got is not None:
                return got
        alive = [self.bounds[i] for i, p in enumerate(self.probs) if p > eps]
        if not alive:
            alive = list(self.bounds)
        got = (min(lo for lo, _ in alive), max(hi for _, hi in alive))
        if eps == PROB_EPS:
            self.__dict__["_support"] = got
        return got

    def state_index(self, duration: float) -> int:
        """Map an observed duration to a state; out-of-range clamps to the edge.

        Uses upper-edge bisection: the first interval whose upper edge is >= the
        value. Keeps strictly positive observations out of a [0, 0] state and
        matches the bin-assignment rule used when fitting distributions.
        """
        uppers = [hi for _, hi in self.bounds]
        idx = bisect_left(uppers, duration)
        return min(idx, self.num_states - 1)

    def with_probs(self, probs) -> "DurationDistribution":
        """Same intervals, new probability vector (posterior view)."""
        return DurationDistribution(bounds=self.bounds, probs=tuple(float(p) for p in probs))


@dataclass(frozen=True)
class DynamicStageSpec:
    """Candidate stage set and allowed internal edges of a dynamic placeholder.

    node_probs/edge_probs are the generative existence probabilities used by
    workload synthesis; profiles learn their own occurrence statistics from
    traces, so these may be absent on hand-built templates.
    """

    candidates: tuple[int, ...]
    edges: tuple[tuple[int, int], ...] = ()
    node_probs: tuple[float, ...] | None = None
    edge_probs: tuple[float, ...] | None = None

    def __post_init__(self):
        cand = set(self.candidates)
        if len(cand) != len(self.candidates):
            raise StructuralError("duplicate candidate ids")
        for u, v in self.edges:
            if u not in cand or v not in cand:
                raise StructuralError(f"edge ({u}, {v}) leaves the candidate set")
            if u == v:
                raise StructuralError(f"self loop on candidate {u}")
        if self.node_probs is not None and len(self.node_probs) != len(self.candidates):
            raise StructuralError("node_probs length mismatch")
        if self.edge_probs is not None and len(self.edge_probs) != len(self.edges):
            raise StructuralError("edge_probs length mismatch")
        for p in (self.node_probs or ()) + (self.edge_probs or ()):
            if not 0.0 <= p <= 1.0:
                raise StructuralError(f"existence probability {p} outside [0, 1]")
        # candidate graph must be acyclic: Kahn over the allowed edges
        order = _toposort(self.candidates, self.edges)
        if order is None:
            raise StructuralError("candidate edge set contains a cycle")


@dataclass(frozen=True)
class StageTemplate:
    stage_id: int
    kind: StageKind
    predecessors: tuple[int, ...] = ()
    num_tasks: int = 1
    dynamic: DynamicStageSpec | None = None

    def __post_init__(self):
        if self.num_tasks < 1:
            raise StructuralError(f"stage {self.stage_id}: num_tasks must be >= 1")
        if (self.kind is StageKind.DYNAMIC) != (self.dynamic is not None):
            raise StructuralError(f"stage {self.stage_id}: dynamic spec mismatch")


@dataclass(frozen=True)
class ChainSpec:
    """Self-loop chain unrolled to its maximum iteration count."""

    stages_per_iteration: int
    max_iterations: int

    def __post_init__(self):
        if self.stages_per_iteration < 1 or self.max_iterations < 1:
            raise StructuralError("chain spec must be positive")


class ApplicationTemplate:
    """Static DAG of an application, shared by all its job instances."""

    def __init__(
        self,
        app_id: str,
        stages: dict[int, StageTemplate],
        candidate_stages: dict[int, StageTemplate] | None = None,
        chain: ChainSpec | None = None,
    ):
        self.app_id = app_id
        self.stages = dict(stages)
        self.candidate_stages = dict(candidate_stages or {})
        self.chain = chain
        self._validate()
        self.topo_order: tuple[int, ...] = self._topo()
        self.successors: dict[int, tuple[int, ...]] = self._succs()

    def _validate(self):
        base = set(self.stages)
        if base & set(self.candidate_stages):
            raise StructuralError("candidate ids collide with base stage ids")
        for sid, st in self.stages.items():
            if st.stage_id != sid:
                raise StructuralError(f"stage id mismatch at {sid}")
            for p in st.predecessors:
                if p not in base:
                    raise StructuralError(f"stage {sid}: unknown predecessor {p}")
            if st.kind is StageKind.DYNAMIC:
                preds = st.predecessors
                if len(preds) != 1 or self.stages[preds[0]].kind is not StageKind.LLM:
                    raise StructuralError(
                        f"dynamic stage {sid} needs exactly one LLM predecessor"
                    )
                for c in st.dynamic.candidates:
                    if c not in self.candidate_stages:
                        raise StructuralError(f"dynamic stage {sid}: unknown candidate {c}")
        for cid, st in self.candidate_stages.items():
            if st.stage_id != cid:
                raise StructuralError(f"candidate id mismatch at {cid}")
            if st.kind is StageKind.DYNAMIC:
                raise StructuralError("candidate stages cannot be dynamic")
            if st.predecessors:
                raise StructuralError(
                    f"candidate {cid}: predecessors are assigned at expansion time"
                )
        if self.chain is not None:
            n = self.chain.stages_per_iteration * self.chain.max_iterations
            if set(self.stages) != set(range(n)):
                raise StructuralError("chain template must use stage ids 0..n-1")
            for i in range(n):
                st = self.stages[i]
                if st.kind is StageKind.DYNAMIC:
                    raise StructuralError("chain templates cannot contain dynamic stages")
                want = () if i == 0 else (i - 1,)
                if tuple(st.predecessors) != want:
                    raise StructuralError("chain template must be a linear chain")

    def _topo(self) -> tuple[int, ...]:
        edges = [(p, sid) for sid, st in self.stages.items() for p in st.predecessors]
        order = _toposort(tuple(self.stages), tuple(edges))
        if order is None:
            raise StructuralError(f"application {self.app_id} has a cycle")
        return tuple(order)

    def _succs(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {sid: [] for sid in self.stages}
        for sid, st in self.stages.items():
            for p in st.predecessors:
                out[p].append(sid)
        return {sid: tuple(sorted(v)) for sid, v in out.items()}

    def iteration_of(self, stage_id: int) -> int:
        if self.chain is None:
            raise StructuralError(f"{self.app_id} is not a chain application")
        return stage_id // self.chain.stages_per_iteration

    def profilable_stage_ids(self) -> tuple[int, ...]:
        """Base stages that carry a duration distribution (everything non-dynamic)."""
        return tuple(
            sid for sid in sorted(self.stages) if self.stages[sid].kind is not StageKind.DYNAMIC
        )


@dataclass(frozen=True)
class JobTruth:
    """Hidden ground truth sampled once at generation time.

    durations holds batch-1 durations for every stage that actually executes,
    including realized dynamic candidates. Stages absent from it are skipped.
    """

    durations: dict[int, float]
    chain_iterations: int | None = None
    dynamic_nodes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    dynamic_edges: dict[int, tuple[tuple[int, int], ...]] = field(default_factory=dict)


@dataclass
class TaskInstance:
    job_id: int
    stage_id: int
    index: int
    kind: StageKind
    true_duration: float | None
    state: TaskState = TaskState.NOT_STARTED
    start_time: float | None = None
    progress: float = 0.0  # batch-1 equivalent seconds of work already done
    executor: int | None = None
    event_version: int = 0


@dataclass
class RevealedStage:
    stage_id: int
    kind: StageKind
    predecessors: set[int]
    tasks: list[TaskInstance]
    phase: StageState = StageState.BLOCKED  # BLOCKED here means "not yet settled or running"
    observed_duration: float | None = None
    completion_time: float | None = None

    @property
    def settled(self) -> bool:
        return self.phase in (StageState.DONE, StageState.SKIPPED)

    def unlaunched_tasks(self) -> list[TaskInstance]:
        return [t for t in self.tasks if t.state is TaskState.NOT_STARTED]


class JobInstance:
    """Runtime job: revealed view over a template plus hidden truth."""

    def __init__(
        self,
        job_id: int,
        template: ApplicationTemplate,
        truth: JobTruth,
        arrival_time: float = 0.0,
    ):
        self.job_id = job_id
        self.template = template
        self.truth = truth
        self.arrival_time = float(arrival_time)
        self.completion_time: float | None = None
        self.stages: dict[int, RevealedStage] = {}
        if template.chain is not None and truth.chain_iterations is None:
            raise StructuralError(f"job {job_id}: chain job needs chain_iterations")
        for sid in template.topo_order:
            st = template.stages[sid]
            self.stages[sid] = RevealedStage(
                stage_id=sid,
                kind=st.kind,
                predecessors=set(st.predecessors),
                tasks=self._make_tasks(st),
            )
        self._rebuild_links()

    @property
    def app_id(self) -> str:
        return self.template.app_id

    def _make_tasks(self, st: StageTemplate) -> list[TaskInstance]:
        if st.kind is StageKind.DYNAMIC:
            return []
        dur = self.truth.durations.get(st.stage_id)
        return [
            TaskInstance(self.job_id, st.stage_id, i, st.kind, dur)
            for i in range(st.num_tasks)
        ]

    def _rebuild_links(self):
        self._succs: dict[int, set[int]] = {sid: set() for sid in self.stages}
        self._missing: dict[int, int] = {}
        self._topo: list[int] | None = None
        for sid, st in self.stages.items():
            for p in st.predecessors:
                self._succs[p].add(sid)
            self._missing[sid] = sum(
                1 for p in st.predecessors if not self.stages[p].settled
            )

    def stage(self, stage_id: int) -> RevealedStage:
        try:
            return self.stages[stage_id]
        except KeyError:
            raise StructuralError(f"job {self.job_id}: unknown stage {stage_id}") from None

    def stage_state(self, stage_id: int) -> StageState:
        st = self.stage(stage_id)
        if st.phase is StageState.BLOCKED:
            if st.kind is not StageKind.DYNAMIC and self._missing[stage_id] == 0:
                return StageState.READY
            return StageState.BLOCKED
        return st.phase

    def ready_stages(self) -> list[int]:
        """Stages whose predecessors are all settled, excluding dynamic placeholders."""
        return sorted(
            sid
            for sid, st in self.stages.items()
            if st.phase is StageState.BLOCKED
            and st.kind is not StageKind.DYNAMIC
            and self._missing[sid] == 0
        )

    def running_stages(self) -> list[int]:
        return sorted(sid for sid, st in self.stages.items() if st.phase is StageState.RUNNING)

    def expandable_dynamic_stages(self) -> list[int]:
        return sorted(
            sid
            for sid, st in self.stages.items()
            if st.kind is StageKind.DYNAMIC
            and st.phase is StageState.BLOCKED
            and self._missing[sid] == 0
        )

    @property
    def is_complete(self) -> bool:
        return all(st.settled for st in self.stages.values())

    def mark_running(self, stage_id: int):
        st = self.stage(stage_id)
        if st.phase is not StageState.BLOCKED or self._missing[stage_id] != 0:
            raise StructuralError(f"job {self.job_id}: stage {stage_id} is not ready")
        st.phase = StageState.RUNNING

    def _settle(self, stage_id: int):
        for t in self._succs[stage_id]:
            self._missing[t] -= 1

    def complete_stage(self, stage_id: int, now: float, observed_duration: float) -> list[int]:
        """Mark a stage Done; returns stage ids skipped by chain termination."""
        st = self.stage(stage_id)
        if st.phase is not StageState.RUNNING:
            raise StructuralError(f"job {self.job_id}: stage {stage_id} is not running")
        st.phase = StageState.DONE
        st.observed_duration = observed_duration
        st.completion_time = now
        self._settle(stage_id)
        skipped: list[int] = []
        chain = self.template.chain
        if chain is not None:
            it = self.template.iteration_of(stage_id)
            last_of_iter = (it + 1) * chain.stages_per_iteration - 1
            if stage_id == last_of_iter and self.truth.chain_iterations == it + 1:
                for sid in range(stage_id + 1, len(self.stages)):
                    self.skip_stage(sid, now)
                    skipped.append(sid)
        return skipped

    def skip_stage(self, stage_id: int, now: float):
        st = self.stage(stage_id)
        if st.settled:
            return
        if st.phase is StageState.RUNNING:
            raise StructuralError(f"job {self.job_id}: cannot skip running stage {stage_id}")
        st.phase = StageState.SKIPPED
        st.observed_duration = 0.0
        st.completion_time = now
        self._settle(stage_id)

    def expand_dynamic(
        self,
        stage_id: int,
        nodes: tuple[int, ...],
        edges: tuple[tuple[int, int], ...],
        now: float = 0.0,
    ) -> list[int]:
        """Replace a dynamic placeholder with its realized subgraph.

        Realized candidates inherit the placeholder's predecessors plus realized
        internal edges; non-realized candidates appear as Skipped; successors of
        the placeholder are re-wired to the realized sinks. Returns the realized
        stage ids.
        """
        st = self.stage(stage_id)
        if st.kind is not StageKind.DYNAMIC:
            raise StructuralError(f"stage {stage_id} is not dynamic")
        if st.phase is not StageState.BLOCKED:
            raise StructuralError(f"dynamic stage {stage_id} already expanded")
        if self._missing[stage_id] != 0:
            raise StructuralError(f"dynamic stage {stage_id}: predecessors not settled")
        spec = self.template.stages[stage_id].dynamic
        cand = set(spec.candidates)
        realized = set(nodes)
        if not realized <= cand:
            raise StructuralError(f"realized nodes {sorted(realized - cand)} not candidates")
        if len(nodes) != len(realized):
            raise StructuralError("duplicate realized nodes")
        allowed = set(spec.edges)
        for e in edges:
            if e not in allowed:
                raise StructuralError(f"edge {e} is not an allowed candidate edge")
            if e[0] not in realized or e[1] not in realized:
                raise StructuralError(f"edge {e} touches a non-realized node")
        internal_preds: dict[int, set[int]] = {n: set() for n in realized}
        has_out: set[int] = set()
        for u, v in edges:
            internal_preds[v].add(u)
            has_out.add(u)
        sinks = {n for n in realized if n not in has_out}
        for cid in sorted(cand):
            ct = self.template.candidate_stages[cid]
            if cid in realized:
                dur = self.truth.durations.get(cid)
                if dur is None:
                    raise StructuralError(f"realized stage {cid} has no true duration")
                self.stages[cid] = RevealedStage(
                    stage_id=cid,
                    kind=ct.kind,
                    predecessors=set(st.predecessors) | internal_preds[cid],
                    tasks=[
                        TaskInstance(self.job_id, cid, i, ct.kind, dur)
                        for i in range(ct.num_tasks)
                    ],
                )
            else:
                self.stages[cid] = RevealedStage(
                    stage_id=cid,
                    kind=ct.kind,
                    predecessors=set(),
                    tasks=[],
                    phase=StageState.SKIPPED,
                    observed_duration=0.0,
                    completion_time=now,
                )
        # successors of the placeholder now wait on the realized sinks instead
        for t_id in [t for t, s in self.stages.items() if stage_id in s.predecessors]:
            if t_id == stage_id:
                continue
            tp = self.stages[t_id].predecessors
            tp.discard(stage_id)
            tp |= sinks
        st.phase = StageState.SKIPPED
        st.observed_duration = 0.0
        st.completion_time = now
        self._rebuild_links()
        return sorted(realized)

    def topological_order(self) -> list[int]:
        if self._topo is None:
            edges = [(p, sid) for sid, st in self.stages.items() for p in st.predecessors]
            order = _toposort(tuple(self.stages), tuple(edges))
            if order is None:
                raise StructuralError(f"job {self.job_id}: revealed DAG has a cycle")
            self._topo = order
        return self._topo

    def jct(self) -> float:
        if self.completion_time is None:
            raise StructuralError(f"job {self.job_id} has not completed")
        return self.completion_time - self.arrival_time


def _toposort(nodes, edges) -> list[int] | None:
    """Kahn's algorithm with a min-heap tie-break; None if there is a cycle."""
    nodes = list(nodes)
    indeg = {n: 0 for n in nodes}
    succ: dict[int, list[int]] = {n: [] for n in nodes}
    for u, v in edges:
        indeg[v] += 1
        succ[u].append(v)
    heap = [n for n in nodes if indeg[n] == 0]
    heapq.heapify(heap)
    out: list[int] = []
    while heap:
        n = heapq.heappop(heap)
        out.append(n)
        for v in succ[n]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    return out if len(out) == len(nodes) else None


def topological_stages(job: JobInstance) -> list[int]:
    """Topological order of the job's currently revealed stages."""
    return job.topological_order()


def ready_stages(job: JobInstance) -> list[int]:
    return job.ready_stages()


def expand_dynamic(
    job: JobInstance,
    stage_id: int,
    nodes: tuple[int, ...],
    edges: tuple[tuple[int, int], ...],
    now: float = 0.0,
) -> list[int]:
    return job.expand_dynamic(stage_id, nodes, edges, now)

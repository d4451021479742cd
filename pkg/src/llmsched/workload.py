"""Synthetic workloads: application catalog, job generation, trace files.

Three application families, two apps each. predefined: a fixed
split/generate/score/merge DAG whose LLM durations share a latent per-job size
factor (strong cross-stage correlation). chainlike: a gen/exec/reflex loop
padded to its maximum iteration count, true length truncated-geometric with a
stop probability that shrinks for large jobs (duration observations carry
length information). planning: one LLM planning stage followed by a dynamic
stage over six candidates with configurable node/edge existence probabilities.
Distribution parameters live in data/workloads.json.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources

import numpy as np

from .errors import ConfigError, TraceParseError
from .model import (
    ApplicationTemplate,
    ChainSpec,
    DynamicStageSpec,
    JobInstance,
    JobTruth,
    StageKind,
    StageTemplate,
)


@dataclass(frozen=True)
class WorkloadSpec:
    mix: dict[str, float]
    num_jobs: int
    rate: float
    seed: int

    def __post_init__(self):
        if self.num_jobs < 1:
            raise ConfigError("num_jobs must be >= 1")
        if self.rate <= 0:
            raise ConfigError("arrival rate must be positive")
        if not self.mix:
            raise ConfigError("empty application mix")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ConfigError("mix fractions must sum to 1")
        if any(f < 0 for f in self.mix.values()):
            raise ConfigError("mix fractions must be non-negative")


@dataclass(frozen=True)
class TraceRecord:
    """One historical job: per-stage batch-1 durations and realized structure."""

    job_id: int
    app_id: str
    arrival: float
    stages: tuple[tuple[int, bool, float], ...]  # (stage_id, executed, duration)
    chain_iterations: int | None = None
    dynamic: tuple[tuple[int, tuple[int, ...], tuple[tuple[int, int], ...]], ...] = ()

    @cached_property
    def stage_durations(self) -> dict[int, float]:
        return {sid: dur for sid, executed, dur in self.stages if executed}

    @cached_property
    def dynamic_nodes(self) -> dict[int, tuple[int, ...]]:
        return {sid: nodes for sid, nodes, _ in self.dynamic}

    @cached_property
    def dynamic_edges(self) -> dict[int, tuple[tuple[int, int], ...]]:
        return {sid: edges for sid, _, edges in self.dynamic}


class Catalog:
    """Application templates plus their generative parameters and presets."""

    def __init__(self, payload: dict):
        self.params: dict[str, dict] = payload["apps"]
        self.presets: dict[str, dict[str, float]] = payload["presets"]
        self.default_rate: float = float(payload.get("default_rate", 0.9))
        self.templates: dict[str, ApplicationTemplate] = {
            app_id: _build_template(app_id, p) for app_id, p in self.params.items()
        }

    def mix_for(self, preset: str) -> dict[str, float]:
        try:
            return dict(self.presets[preset])
        except KeyError:
            raise ConfigError(
                f"unknown workload preset {preset!r}; have {sorted(self.presets)}"
            ) from None


def load_catalog(path: str | None = None) -> Catalog:
    if path is None:
        text = resources.files("llmsched").joinpath("data/workloads.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return Catalog(json.loads(text))


def _build_template(app_id: str, p: dict) -> ApplicationTemplate:
    family = p["family"]
    if family == "predefined":
        stages: dict[int, StageTemplate] = {
            0: StageTemplate(0, StageKind.REGULAR, ()),
        }
        n = len(p["generate_bases"])
        for i in range(n):
            stages[1 + i] = StageTemplate(
                1 + i, StageKind.LLM, (0,), num_tasks=int(p.get("generate_tasks", 1))
            )
            stages[1 + n + i] = StageTemplate(
                1 + n + i,
                StageKind.REGULAR,
                (1 + i,),
                num_tasks=int(p.get("score_tasks", 1)),
            )
        merge = 1 + 2 * n
        stages[merge] = StageTemplate(
            merge, StageKind.REGULAR, tuple(range(1 + n, 1 + 2 * n))
        )
        return ApplicationTemplate(app_id, stages)
    if family == "chainlike":
        kinds = (StageKind.LLM, StageKind.REGULAR, StageKind.LLM)
        m = int(p["max_iterations"])
        stages = {}
        for i in range(3 * m):
            stages[i] = StageTemplate(i, kinds[i % 3], () if i == 0 else (i - 1,))
        return ApplicationTemplate(
            app_id, stages, chain=ChainSpec(stages_per_iteration=3, max_iterations=m)
        )
    if family == "planning":
        bases = p["candidate_bases"]
        cand_ids = tuple(range(2, 2 + len(bases)))
        tasks = p.get("candidate_tasks", [1] * len(bases))
        spec = DynamicStageSpec(
            candidates=cand_ids,
            edges=tuple((int(u), int(v)) for u, v in p.get("edges", [])),
            node_probs=tuple(float(x) for x in p["node_probs"]),
            edge_probs=tuple(float(x) for x in p.get("edge_probs", [])),
        )
        stages = {
            0: StageTemplate(0, StageKind.LLM, ()),
            1: StageTemplate(1, StageKind.DYNAMIC, (0,), dynamic=spec),
        }
        candidates = {
            cid: StageTemplate(cid, StageKind.REGULAR, (), num_tasks=int(tasks[i]))
            for i, cid in enumerate(cand_ids)
        }
        return ApplicationTemplate(app_id, stages, candidate_stages=candidates)
    raise ConfigError(f"unknown application family {family!r}")


def sample_truth(template: ApplicationTemplate, p: dict, rng: np.random.Generator) -> JobTruth:
    """Draw one job's hidden truth from the app's generative model."""
    family = p["family"]
    z = float(np.exp(rng.normal(0.0, p["sigma_z"])))
    s_llm = p["sigma_llm"]
    s_reg = p["sigma_regular"]

    def llm_dur(base: float) -> float:
        return base * z * float(np.exp(rng.normal(0.0, s_llm)))

    def reg_dur(base: float) -> float:
        return base * float(np.exp(rng.normal(0.0, s_reg)))

    if family == "predefined":
        n = len(p["generate_bases"])
        durations = {0: reg_dur(p["split_base"])}
        for i, base in enumerate(p["generate_bases"]):
            durations[1 + i] = llm_dur(base)
        for i in range(n):
            durations[1 + n + i] = reg_dur(p["score_base"])
        durations[1 + 2 * n] = reg_dur(p["merge_base"])
        return JobTruth(durations=durations)
    if family == "chainlike":
        m = int(p["max_iterations"])
        lo, hi = p["stop_clip"]
        stop = float(np.clip(p["stop_prob"] / z ** p["stop_gamma"], lo, hi))
        iters = 1
        while iters < m and rng.random() > stop:
            iters += 1
        durations = {}
        for i in range(3 * iters):
            base = (p["gen_base"], p["exec_base"], p["reflex_base"])[i % 3]
            durations[i] = llm_dur(base) if i % 3 != 1 else reg_dur(base)
        return JobTruth(durations=durations, chain_iterations=iters)
    if family == "planning":
        durations = {0: llm_dur(p["plan_base"])}
        spec = template.stages[1].dynamic
        nodes = tuple(
            c
            for c, prob in zip(spec.candidates, spec.node_probs)
            if rng.random() < prob
        )
        node_set = set(nodes)
        edges = tuple(
            e
            for e, prob in zip(spec.edges, spec.edge_probs)
            if e[0] in node_set and e[1] in node_set and rng.random() < prob
        )
        for c, base in zip(spec.candidates, p["candidate_bases"]):
            if c in node_set:
                durations[c] = reg_dur(base) * z ** 0.5
        return JobTruth(
            durations=durations,
            dynamic_nodes={1: nodes},
            dynamic_edges={1: edges},
        )
    raise ConfigError(f"unknown application family {family!r}")


def generate_workload(
    spec: WorkloadSpec, catalog: Catalog, start_id: int = 0
) -> list[JobInstance]:
    """Jobs with exponential inter-arrivals and per-app hidden truths."""
    for app_id in spec.mix:
        if app_id not in catalog.templates:
            raise ConfigError(f"no template for application {app_id}")
    rng = np.random.default_rng(spec.seed)
    app_ids = sorted(spec.mix)
    probs = np.array([spec.mix[a] for a in app_ids])
    probs = probs / probs.sum()
    jobs: list[JobInstance] = []
    t = 0.0
    for i in range(spec.num_jobs):
        t += float(rng.exponential(1.0 / spec.rate))
        app_id = app_ids[int(rng.choice(len(app_ids), p=probs))]
        template = catalog.templates[app_id]
        truth = sample_truth(template, catalog.params[app_id], rng)
        jobs.append(JobInstance(start_id + i, template, truth, arrival_time=t))
    return jobs


def record_from_job(job: JobInstance) -> TraceRecord:
    """Trace record straight from the job's truth (durations are batch-1)."""
    template = job.template
    universe = list(template.profilable_stage_ids()) + sorted(template.candidate_stages)
    stages = tuple(
        (sid, sid in job.truth.durations, job.truth.durations.get(sid, 0.0))
        for sid in universe
    )
    dynamic = tuple(
        (sid, tuple(job.truth.dynamic_nodes.get(sid, ())), tuple(job.truth.dynamic_edges.get(sid, ())))
        for sid in sorted(job.truth.dynamic_nodes)
    )
    return TraceRecord(
        job_id=job.job_id,
        app_id=job.app_id,
        arrival=job.arrival_time,
        stages=stages,
        chain_iterations=job.truth.chain_iterations,
        dynamic=dynamic,
    )


def collect_trace(jobs) -> list[TraceRecord]:
    return [record_from_job(j) for j in jobs]


def write_trace(records, path: str):
    with open(path, "w") as fh:
        for r in records:
            payload = {
                "job_id": r.job_id,
                "app_id": r.app_id,
                "arrival": r.arrival,
                "stages": [[sid, executed, dur] for sid, executed, dur in r.stages],
                "chain_iterations": r.chain_iterations,
                "dynamic": [
                    [sid, list(nodes), [list(e) for e in edges]]
                    for sid, nodes, edges in r.dynamic
                ],
            }
            fh.write(json.dumps(payload) + "\n")


def read_trace(path: str) -> list[TraceRecord]:
    out: list[TraceRecord] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                record = TraceRecord(
                    job_id=int(obj["job_id"]),
                    app_id=str(obj["app_id"]),
                    arrival=float(obj["arrival"]),
                    stages=tuple(
                        (int(sid), bool(executed), float(dur))
                        for sid, executed, dur in obj["stages"]
                    ),
                    chain_iterations=(
                        None
                        if obj.get("chain_iterations") is None
                        else int(obj["chain_iterations"])
                    ),
                    dynamic=tuple(
                        (
                            int(sid),
                            tuple(int(n) for n in nodes),
                            tuple((int(u), int(v)) for u, v in edges),
                        )
                        for sid, nodes, edges in obj.get("dynamic", [])
                    ),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise TraceParseError(path, line_no, str(exc)) from exc
            for sid, executed, dur in record.stages:
                if executed != (dur > 0):
                    raise TraceParseError(
                        path, line_no, f"stage {sid}: executed flag contradicts duration"
                    )
            out.append(record)
    return out

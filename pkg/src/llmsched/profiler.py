"""Offline profiling from historical traces and online posterior estimation.

train_profile turns per-job trace records into an ApplicationProfile: quantized
per-stage duration distributions, a Bayesian network over the stage states,
node/edge occurrence statistics for dynamic stages, and the app's historical
mean job duration. EstimationSession is the runtime side: it accumulates
per-job evidence as stages finish and answers remaining-duration and
uncertainty queries for the schedulers.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .bayesnet import (
    CachedInference,
    DiscreteBayesNet,
    bn_from_dict,
    bn_to_dict,
    correlated_set,
    fit_cpts,
    learn_structure,
)
from .errors import RangeError, TrainingError
from .model import (
    ApplicationTemplate,
    DurationDistribution,
    JobInstance,
    StageKind,
    StageState,
    TaskState,
)
from . import uncertainty as unc


@dataclass(frozen=True)
class CalibrationProfile:
    """Per-token decode latency (ms) indexed by batch size; index 0 is batch 1."""

    latencies_ms: tuple[float, ...]

    def __post_init__(self):
        if not self.latencies_ms:
            raise RangeError("calibration profile needs at least batch size 1")
        if any(v <= 0 for v in self.latencies_ms):
            raise RangeError("latencies must be positive")
        if any(b > a for a, b in zip(self.latencies_ms[1:], self.latencies_ms)):
            raise RangeError("per-token latency must be non-decreasing in batch size")

    @property
    def max_batch(self) -> int:
        return len(self.latencies_ms)

    def latency(self, batch: int) -> float:
        if not 1 <= batch <= self.max_batch:
            raise RangeError(f"batch size {batch} outside [1, {self.max_batch}]")
        return self.latencies_ms[batch - 1]


def calibrate(duration: float, batch_from: int, batch_to: int, cal: CalibrationProfile) -> float:
    """Rescale an LLM duration between batch sizes: d * l(b_to) / l(b_from)."""
    return duration * cal.latency(batch_to) / cal.latency(batch_from)


def discretize(samples, max_bins: int = 6) -> DurationDistribution:
    """Quantile-binned duration distribution with a dedicated [0, 0] state.

    Zeros (non-executions) get their own degenerate state; the positive part is
    split at quantile edges into at most max_bins - (1 if zeros) intervals.
    Duplicate edges collapse, so low-variance samples yield fewer (possibly one,
    possibly degenerate) intervals. The outermost upper edge is pulled in so the
    top interval's midpoint equals its in-bin average: skewed tails otherwise
    put the midpoint far above the durations the state actually represents, and
    observations past the edge still clamp into the top state.
    """
    x = np.asarray(list(samples), dtype=float)
    if x.size == 0:
        raise TrainingError("no samples to discretize")
    if (x < 0).any():
        raise RangeError("negative duration sample")
    if max_bins < 1:
        raise RangeError("max_bins must be >= 1")
    n = x.size
    zeros = int((x == 0).sum())
    pos = np.sort(x[x > 0])
    bounds: list[tuple[float, float]] = []
    probs: list[float] = []
    if zeros:
        bounds.append((0.0, 0.0))
        probs.append(zeros / n)
    if pos.size:
        nbins = max_bins - (1 if zeros else 0)
        if nbins < 1:
            raise RangeError("max_bins too small for zero state plus positive samples")
        edges = np.unique(np.quantile(pos, np.linspace(0.0, 1.0, nbins + 1)))
        if edges.size == 1:
            bounds.append((float(edges[0]), float(edges[0])))
            probs.append(pos.size / n)
        else:
            uppers = edges[1:]
            idx = np.minimum(np.searchsorted(uppers, pos, side="left"), uppers.size - 1)
            counts = np.bincount(idx, minlength=uppers.size)
            top = pos[idx == uppers.size - 1]
            if top.size:
                edges[-1] = max(2.0 * float(top.mean()) - float(edges[-2]), float(edges[-2]))
            for i in range(uppers.size):
                if counts[i] == 0:
                    continue  # tiny samples can leave interior quantile bins empty
                bounds.append((float(edges[i]), float(edges[i + 1])))
                probs.append(counts[i] / n)
    return DurationDistribution(bounds=tuple(bounds), probs=tuple(probs))


@dataclass(frozen=True)
class DynamicProfile:
    """Occurrence statistics and realized-makespan profile of a dynamic stage."""

    stage_id: int
    node_probs: dict[int, float]
    edge_probs: dict[tuple[int, int], float]       # marginal P(edge realized)
    edge_cond_probs: dict[tuple[int, int], float]  # P(edge | both endpoints realized)
    makespan: DurationDistribution
    expected_span: float


@dataclass
class ApplicationProfile:
    app_id: str
    stage_dists: dict[int, DurationDistribution]
    bn: DiscreteBayesNet | None
    dynamic: dict[int, DynamicProfile]
    mean_job_duration: float
    calibration: CalibrationProfile

    @property
    def uncertainty_flags(self) -> dict[int, bool]:
        """Which profiled stages can reduce uncertainty about other stages."""
        if self.bn is None:
            return {sid: False for sid in self.stage_dists}
        return {
            sid: sid in self.bn.state_bounds and len(correlated_set(self.bn, sid)) > 0
            for sid in self.stage_dists
        }


def _realized_topo(nodes, edges) -> list[int]:
    indeg = {n: 0 for n in nodes}
    succ = {n: [] for n in nodes}
    for u, v in edges:
        indeg[v] += 1
        succ[u].append(v)
    out, frontier = [], sorted(n for n in nodes if indeg[n] == 0)
    while frontier:
        n = frontier.pop(0)
        out.append(n)
        for v in sorted(succ[n]):
            indeg[v] -= 1
            if indeg[v] == 0:
                frontier.append(v)
    return out


def _record_critical_path(template: ApplicationTemplate, rec) -> float:
    """Batch-1 critical path over the stages this record actually executed."""
    durs = rec.stage_durations
    carry: dict[int, float] = {}
    best = 0.0
    for sid in template.topo_order:
        st = template.stages[sid]
        base = max((carry[p] for p in st.predecessors), default=0.0)
        if st.kind is StageKind.DYNAMIC:
            nodes = rec.dynamic_nodes.get(sid, ())
            edges = rec.dynamic_edges.get(sid, ())
            preds_in = {n: set() for n in nodes}
            for u, v in edges:
                preds_in[v].add(u)
            local: dict[int, float] = {}
            for c in _realized_topo(nodes, edges):
                start = max((local[p] for p in preds_in[c]), default=base)
                local[c] = start + durs[c]
            carry[sid] = max(local.values(), default=base)
        elif sid in durs:
            carry[sid] = base + durs[sid]
        else:
            carry[sid] = base  # skipped: zero cost pass-through
        best = max(best, carry[sid])
    return best


def _mc_expected_span(
    template: ApplicationTemplate,
    dyn_sid: int,
    node_probs: dict[int, float],
    edge_cond: dict[tuple[int, int], float],
    cand_means: dict[int, float],
    draws: int = 256,
) -> float:
    """Fixed-seed Monte Carlo estimate of the expected realized makespan."""
    spec = template.stages[dyn_sid].dynamic
    seed = [zlib.crc32(template.app_id.encode()), dyn_sid, draws]
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(draws):
        realized = [c for c in spec.candidates if rng.random() < node_probs.get(c, 0.0)]
        rset = set(realized)
        edges = [
            e
            for e in spec.edges
            if e[0] in rset and e[1] in rset and rng.random() < edge_cond.get(e, 0.0)
        ]
        preds_in = {n: set() for n in realized}
        for u, v in edges:
            preds_in[v].add(u)
        local: dict[int, float] = {}
        for c in _realized_topo(realized, edges):
            local[c] = max((local[p] for p in preds_in[c]), default=0.0) + cand_means[c]
        total += max(local.values(), default=0.0)
    return total / draws


def train_profile(
    template: ApplicationTemplate,
    records,
    calibration: CalibrationProfile,
    max_bins: int = 6,
    max_parents: int = 3,
) -> ApplicationProfile:
    """Build an ApplicationProfile from historical trace records of one app."""
    recs = [r for r in records if r.app_id == template.app_id]
    if not recs:
        raise TrainingError(f"no trace records for application {template.app_id}")
    stage_dists: dict[int, DurationDistribution] = {}
    base_ids = template.profilable_stage_ids()
    for sid in base_ids:
        stage_dists[sid] = discretize(
            [r.stage_durations.get(sid, 0.0) for r in recs], max_bins
        )
    for cid in sorted(template.candidate_stages):
        hits = [r.stage_durations[cid] for r in recs if cid in r.stage_durations]
        if not hits:
            raise TrainingError(
                f"{template.app_id}: candidate stage {cid} never executed in the trace"
            )
        stage_dists[cid] = discretize(hits, max_bins)

    bn = None
    if len(base_ids) >= 2:
        state_bounds = {sid: stage_dists[sid].bounds for sid in base_ids}
        cards = {sid: len(state_bounds[sid]) for sid in base_ids}
        sample_mat = np.array(
            [
                [stage_dists[sid].state_index(r.stage_durations.get(sid, 0.0)) for sid in base_ids]
                for r in recs
            ],
            dtype=np.int64,
        )
        order = tuple(s for s in template.topo_order if s in set(base_ids))
        parents = learn_structure(sample_mat, base_ids, cards, max_parents, order)
        bn = fit_cpts(base_ids, parents, sample_mat, state_bounds)

    dynamic: dict[int, DynamicProfile] = {}
    n = len(recs)
    for sid in sorted(template.stages):
        st = template.stages[sid]
        if st.kind is not StageKind.DYNAMIC:
            continue
        spec = st.dynamic
        node_counts = {c: 0 for c in spec.candidates}
        both_counts = {e: 0 for e in spec.edges}
        edge_counts = {e: 0 for e in spec.edges}
        spans = []
        for r in recs:
            nodes = set(r.dynamic_nodes.get(sid, ()))
            edges = set(r.dynamic_edges.get(sid, ()))
            for c in nodes:
                node_counts[c] += 1
            for e in spec.edges:
                if e[0] in nodes and e[1] in nodes:
                    both_counts[e] += 1
                    if e in edges:
                        edge_counts[e] += 1
            preds_in = {c: set() for c in nodes}
            for u, v in edges:
                preds_in[v].add(u)
            local: dict[int, float] = {}
            for c in _realized_topo(sorted(nodes), edges):
                local[c] = max((local[p] for p in preds_in[c]), default=0.0) + r.stage_durations[c]
            spans.append(max(local.values(), default=0.0))
        node_probs = {c: node_counts[c] / n for c in spec.candidates}
        edge_probs = {e: edge_counts[e] / n for e in spec.edges}
        edge_cond = {
            e: (edge_counts[e] / both_counts[e] if both_counts[e] else 0.0)
            for e in spec.edges
        }
        cand_means = {c: stage_dists[c].mean() for c in spec.candidates}
        dynamic[sid] = DynamicProfile(
            stage_id=sid,
            node_probs=node_probs,
            edge_probs=edge_probs,
            edge_cond_probs=edge_cond,
            makespan=discretize(spans, max_bins),
            expected_span=_mc_expected_span(template, sid, node_probs, edge_cond, cand_means),
        )

    mean_jd = float(np.mean([_record_critical_path(template, r) for r in recs]))
    return ApplicationProfile(
        app_id=template.app_id,
        stage_dists=stage_dists,
        bn=bn,
        dynamic=dynamic,
        mean_job_duration=mean_jd,
        calibration=calibration,
    )


class EstimationSession:
    """Per-run estimation state: evidence, posteriors, and uncertainty scores.

    One session per simulation run; all caches are keyed by job and invalidated
    when that job's evidence changes. With use_posteriors=False every query is
    answered from the profile priors and evidence is never inserted (the
    BN-update ablation).
    """

    def __init__(self, profiles: dict[str, ApplicationProfile], use_posteriors: bool = True):
        self.profiles = profiles
        self.use_posteriors = use_posteriors
        self._inference: dict[str, CachedInference | None] = {}
        self._corr: dict[str, dict[int, tuple[int, ...]]] = {}
        self._dyn_pred: dict[str, dict[int, int]] = {}
        self._evidence: dict[int, dict[int, int]] = {}
        self._post: dict[int, dict[int, DurationDistribution]] = {}
        self._scores: dict[int, dict] = {}
        self._summ: dict[int, dict[int, tuple[float, float, float]]] = {}
        self._dyn_summ: dict[str, dict[int, tuple[float, float, float, bool]]] = {}

    def _prof(self, job: JobInstance) -> ApplicationProfile:
        try:
            return self.profiles[job.app_id]
        except KeyError:
            raise TrainingError(f"no profile for application {job.app_id}") from None

    def _infer(self, app_id: str) -> CachedInference | None:
        if app_id not in self._inference:
            bn = self.profiles[app_id].bn
            self._inference[app_id] = CachedInference(bn) if bn is not None else None
        return self._inference[app_id]

    def _correlated(self, app_id: str) -> dict[int, tuple[int, ...]]:
        if app_id not in self._corr:
            bn = self.profiles[app_id].bn
            self._corr[app_id] = (
                {v: correlated_set(bn, v) for v in bn.variables} if bn is not None else {}
            )
        return self._corr[app_id]

    def _dynamic_pred_map(self, job: JobInstance) -> dict[int, int]:
        app_id = job.app_id
        if app_id not in self._dyn_pred:
            out = {}
            for sid, st in job.template.stages.items():
                if st.kind is StageKind.DYNAMIC:
                    out[st.predecessors[0]] = sid
            self._dyn_pred[app_id] = out
        return self._dyn_pred[app_id]

    def register_job(self, job: JobInstance):
        self._evidence.setdefault(job.job_id, {})

    def evidence(self, job: JobInstance) -> dict[int, int]:
        return dict(self._evidence.get(job.job_id, {}))

    def update_evidence(self, job: JobInstance, stage_id: int, observed_duration: float):
        """Insert a finished stage's batch-1 duration (0 for skipped) as evidence."""
        if not self.use_posteriors:
            return
        prof = self._prof(job)
        if prof.bn is None or stage_id not in prof.bn.state_bounds:
            return
        state = prof.stage_dists[stage_id].state_index(observed_duration)
        ev = self._evidence.setdefault(job.job_id, {})
        ev[stage_id] = state
        self._post.pop(job.job_id, None)
        self._scores.pop(job.job_id, None)
        self._summ.pop(job.job_id, None)

    def forget_job(self, job: JobInstance):
        self._evidence.pop(job.job_id, None)
        self._post.pop(job.job_id, None)
        self._scores.pop(job.job_id, None)
        self._summ.pop(job.job_id, None)

    def posterior(self, job: JobInstance, stage_id: int) -> DurationDistribution:
        """Posterior duration distribution of a stage given the job's evidence."""
        prof = self._prof(job)
        prior = prof.stage_dists[stage_id]
        if not self.use_posteriors:
            return prior
        inf = self._infer(job.app_id)
        ev = self._evidence.get(job.job_id, {})
        if inf is None or stage_id not in prof.bn.state_bounds or not ev:
            return prior
        if stage_id in ev:
            probs = np.zeros(prior.num_states)
            probs[ev[stage_id]] = 1.0
            return prior.with_probs(probs)
        cache = self._post.setdefault(job.job_id, {})
        got = cache.get(stage_id)
        if got is None:
            f = inf.query((stage_id,), ev)
            got = prior.with_probs(f.table)
            cache[stage_id] = got
        return got

    def mean_job_duration(self, app_id: str) -> float:
        return self.profiles[app_id].mean_job_duration

    def estimated_remaining_duration(
        self, job: JobInstance, now: float, batch_hint: int = 1
    ) -> float:
        """Expected critical path (seconds) of the job's unfinished work.

        Posterior per-stage means, LLM stages calibrated to batch_hint, running
        stages reduced by elapsed time, unexpanded dynamic stages priced at
        their Monte Carlo expected span.
        """
        return self.remaining_summary(job, now, batch_hint)[2]

    def remaining_interval(self, job: JobInstance, now: float, batch_hint: int = 1) -> tuple[float, float]:
        """[min, max] achievable remaining critical path under posterior supports."""
        lo, hi, _ = self.remaining_summary(job, now, batch_hint)
        return (lo, hi)

    def _stage_summary(self, job: JobInstance, stage_id: int) -> tuple[float, float, float]:
        """(support lo, support hi, mean) of a stage posterior at batch 1."""
        cache = self._summ.setdefault(job.job_id, {})
        got = cache.get(stage_id)
        if got is None:
            dist = self.posterior(job, stage_id)
            lo, hi = dist.support()
            got = (lo, hi, dist.mean())
            cache[stage_id] = got
        return got

    def remaining_summary(self, job: JobInstance, now: float, batch_hint: int = 1) -> tuple[float, float, float]:
        """One critical-path pass returning (interval lo, interval hi, expected)."""
        prof = self._prof(job)
        cal = prof.calibration
        batch_hint = min(max(batch_hint, 1), cal.max_batch)
        llm_factor = cal.latency(batch_hint) / cal.latency(1)
        f: dict[int, tuple[float, float, float]] = {}
        out_lo = out_hi = out_mean = 0.0
        stages = job.stages
        for sid in job.topological_order():
            st = stages[sid]
            base_lo = base_hi = base_mean = 0.0
            for p in st.predecessors:
                plo, phi, pmean = f[p]
                if plo > base_lo:
                    base_lo = plo
                if phi > base_hi:
                    base_hi = phi
                if pmean > base_mean:
                    base_mean = pmean
            if st.settled:
                c_lo = c_hi = c_mean = 0.0
            elif st.kind is StageKind.DYNAMIC:
                d_lo, d_hi, d_mean = self._dynamic_summary_for(job, sid)
                c_lo, c_hi, c_mean = d_lo, d_hi, d_mean
                if llm_factor != 1.0 and self._dynamic_has_llm(job, sid):
                    c_lo, c_hi, c_mean = d_lo * llm_factor, d_hi * llm_factor, d_mean * llm_factor
            else:
                d_lo, d_hi, d_mean = self._stage_summary(job, sid)
                if st.kind is StageKind.LLM and llm_factor != 1.0:
                    d_lo, d_hi, d_mean = d_lo * llm_factor, d_hi * llm_factor, d_mean * llm_factor
                if st.phase is StageState.RUNNING:
                    c_lo = c_hi = c_mean = 0.0
                    for t in st.tasks:
                        if t.state is TaskState.DONE:
                            continue
                        el = now - t.start_time if t.start_time is not None else 0.0
                        v = d_lo - el
                        if v > c_lo:
                            c_lo = v
                        v = d_hi - el
                        if v > c_hi:
                            c_hi = v
                        v = d_mean - el
                        if v > c_mean:
                            c_mean = v
                else:
                    c_lo, c_hi, c_mean = d_lo, d_hi, d_mean
            t_lo = base_lo + c_lo
            t_hi = base_hi + c_hi
            t_mean = base_mean + c_mean
            f[sid] = (t_lo, t_hi, t_mean)
            if t_lo > out_lo:
                out_lo = t_lo
            if t_hi > out_hi:
                out_hi = t_hi
            if t_mean > out_mean:
                out_mean = t_mean
        return (out_lo, out_hi, out_mean)

    def _dynamic_summary_for(self, job: JobInstance, stage_id: int) -> tuple[float, float, float]:
        cache = self._dyn_summ.setdefault(job.app_id, {})
        got = cache.get(stage_id)
        if got is None:
            prof = self._prof(job)
            dyn = prof.dynamic[stage_id]
            lo, hi = dyn.makespan.support()
            has_llm = any(
                job.template.candidate_stages[c].kind is StageKind.LLM
                for c in job.template.stages[stage_id].dynamic.candidates
            )
            got = (lo, hi, dyn.expected_span, has_llm)
            cache[stage_id] = got
        return got[:3]

    def _dynamic_has_llm(self, job: JobInstance, stage_id: int) -> bool:
        self._dynamic_summary_for(job, stage_id)
        return self._dyn_summ[job.app_id][stage_id][3]

    def uncertainty_score(self, job: JobInstance, stage_id: int) -> unc.UncertaintyScore:
        """R(X) for a schedulable stage of this job under current evidence."""
        prof = self._prof(job)
        unscheduled = frozenset(
            sid
            for sid, st in job.stages.items()
            if st.phase is StageState.BLOCKED and sid != stage_id
        )
        dyn_map = self._dynamic_pred_map(job)
        dyn_sid = dyn_map.get(stage_id)
        dyn_unexpanded = (
            dyn_sid is not None and job.stages[dyn_sid].phase is StageState.BLOCKED
        )
        cache = self._scores.setdefault(job.job_id, {})
        key = (stage_id, unscheduled, dyn_unexpanded)
        got = cache.get(key)
        if got is not None:
            return got
        inf = self._infer(job.app_id)
        ev = self._evidence.get(job.job_id, {}) if self.use_posteriors else {}
        corr = self._correlated(job.app_id)
        targets = tuple(
            t for t in corr.get(stage_id, ()) if t in unscheduled and t not in ev
        )
        dyn_info = None
        if dyn_unexpanded:
            dp = prof.dynamic[dyn_sid]
            s_lo, s_hi = dp.makespan.support()
            dyn_info = unc.DynamicUncertainty(
                node_probs=tuple(dp.node_probs[c] for c in sorted(dp.node_probs)),
                edge_probs=tuple(dp.edge_probs[e] for e in sorted(dp.edge_probs)),
                span_range=s_hi - s_lo,
            )
        got = unc.uncertainty_reduction(
            stage_id=stage_id,
            inference=inf,
            evidence=ev,
            targets=targets,
            posterior=lambda t: self.posterior(job, t),
            dynamic=dyn_info,
        )
        cache[key] = got
        return got


def profile_to_dict(profile: ApplicationProfile) -> dict:
    return {
        "app_id": profile.app_id,
        "mean_job_duration": profile.mean_job_duration,
        "calibration": list(profile.calibration.latencies_ms),
        "stages": [
            {
                "id": sid,
                "bounds": [[lo, hi] for lo, hi in d.bounds],
                "probs": list(d.probs),
            }
            for sid, d in sorted(profile.stage_dists.items())
        ],
        "bayes_net": bn_to_dict(profile.bn) if profile.bn is not None else None,
        "dynamic": [
            {
                "stage_id": dp.stage_id,
                "nodes": [[c, dp.node_probs[c]] for c in sorted(dp.node_probs)],
                "edges": [
                    [u, v, dp.edge_probs[(u, v)], dp.edge_cond_probs[(u, v)]]
                    for u, v in sorted(dp.edge_probs)
                ],
                "makespan": {
                    "bounds": [[lo, hi] for lo, hi in dp.makespan.bounds],
                    "probs": list(dp.makespan.probs),
                },
                "expected_span": dp.expected_span,
            }
            for dp in (profile.dynamic[s] for s in sorted(profile.dynamic))
        ],
    }


def profile_from_dict(payload: dict) -> ApplicationProfile:
    stage_dists = {
        int(e["id"]): DurationDistribution(
            bounds=tuple((float(lo), float(hi)) for lo, hi in e["bounds"]),
            probs=tuple(float(p) for p in e["probs"]),
        )
        for e in payload["stages"]
    }
    dynamic = {}
    for e in payload.get("dynamic", []):
        sid = int(e["stage_id"])
        dynamic[sid] = DynamicProfile(
            stage_id=sid,
            node_probs={int(c): float(p) for c, p in e["nodes"]},
            edge_probs={(int(u), int(v)): float(pm) for u, v, pm, _ in e["edges"]},
            edge_cond_probs={(int(u), int(v)): float(pc) for u, v, _, pc in e["edges"]},
            makespan=DurationDistribution(
                bounds=tuple((float(lo), float(hi)) for lo, hi in e["makespan"]["bounds"]),
                probs=tuple(float(p) for p in e["makespan"]["probs"]),
            ),
            expected_span=float(e["expected_span"]),
        )
    bn = bn_from_dict(payload["bayes_net"]) if payload.get("bayes_net") else None
    return ApplicationProfile(
        app_id=payload["app_id"],
        stage_dists=stage_dists,
        bn=bn,
        dynamic=dynamic,
        mean_job_duration=float(payload["mean_job_duration"]),
        calibration=CalibrationProfile(tuple(float(v) for v in payload["calibration"])),
    )


def save_profile(profile: ApplicationProfile, path: str):
    with open(path, "w") as fh:
        json.dump(profile_to_dict(profile), fh, indent=2)
        fh.write("\n")


def load_profile(path: str) -> ApplicationProfile:
    with open(path) as fh:
        return profile_from_dict(json.load(fh))

"""Discrete Bayesian networks over stage-duration states.

Nodes are stage ids, states are duration intervals. CPTs are fit by maximum
likelihood with Laplace smoothing; structure is learned by BIC hill climbing
restricted to the application's topological stage order; queries run exact
variable elimination with barren-node pruning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InconsistentEvidenceError, RangeError, StructuralError, TrainingError

Evidence = dict[int, int]  # variable id -> observed state index


@dataclass(frozen=True)
class Factor:
    """Table over a tuple of variables, axis order matching ``vars``."""

    vars: tuple[int, ...]
    table: np.ndarray

    def marginal(self, var: int) -> np.ndarray:
        if var not in self.vars:
            raise RangeError(f"variable {var} not in factor {self.vars}")
        axes = tuple(i for i, v in enumerate(self.vars) if v != var)
        return self.table.sum(axis=axes)


@dataclass
class DiscreteBayesNet:
    variables: tuple[int, ...]
    state_bounds: dict[int, tuple[tuple[float, float], ...]]
    parents: dict[int, tuple[int, ...]]
    cpts: dict[int, np.ndarray] = field(repr=False)

    def __post_init__(self):
        self._pos = {v: i for i, v in enumerate(self.variables)}
        for v in self.variables:
            if v not in self.state_bounds or v not in self.parents or v not in self.cpts:
                raise StructuralError(f"variable {v} missing bounds, parents, or cpt")
            shape = tuple(self.card(p) for p in self.parents[v]) + (self.card(v),)
            if tuple(self.cpts[v].shape) != shape:
                raise StructuralError(f"cpt shape mismatch for variable {v}")
        for v in self.variables:
            for p in self.parents[v]:
                if p not in self._pos:
                    raise StructuralError(f"variable {v}: unknown parent {p}")

    def card(self, var: int) -> int:
        return len(self.state_bounds[var])

    def position(self, var: int) -> int:
        return self._pos[var]

    def children(self, var: int) -> tuple[int, ...]:
        return tuple(v for v in self.variables if var in self.parents[v])

    def cpt_factor(self, var: int) -> Factor:
        vs = self.parents[var] + (var,)
        order = sorted(vs, key=self._pos.__getitem__)
        perm = [vs.index(v) for v in order]
        return Factor(tuple(order), np.transpose(self.cpts[var], perm))


def fit_cpts(
    variables: tuple[int, ...],
    parents: dict[int, tuple[int, ...]],
    samples: np.ndarray,
    state_bounds: dict[int, tuple[tuple[float, float], ...]],
    alpha: float = 1.0,
) -> DiscreteBayesNet:
    """Maximum-likelihood CPTs with Laplace smoothing (alpha pseudo-counts).

    samples: (n, len(variables)) integer state indices, columns in ``variables``
    order. Parent tuples are canonicalized to variable order.
    """
    samples = np.asarray(samples, dtype=np.int64)
    if samples.ndim != 2 or samples.shape[1] != len(variables):
        raise TrainingError("samples must be (n, num_variables)")
    if samples.shape[0] == 0:
        raise TrainingError("no samples to fit")
    pos = {v: i for i, v in enumerate(variables)}
    cards = {v: len(state_bounds[v]) for v in variables}
    for v in variables:
        col = samples[:, pos[v]]
        if col.min() < 0 or col.max() >= cards[v]:
            raise TrainingError(f"variable {v}: state index out of range")
    cpts: dict[int, np.ndarray] = {}
    canon: dict[int, tuple[int, ...]] = {}
    for v in variables:
        ps = tuple(sorted(parents.get(v, ()), key=pos.__getitem__))
        canon[v] = ps
        dims = [cards[p] for p in ps] + [cards[v]]
        cols = [pos[p] for p in ps] + [pos[v]]
        flat = np.ravel_multi_index(samples[:, cols].T, dims) if len(dims) > 1 else samples[:, cols[0]]
        counts = np.bincount(flat, minlength=int(np.prod(dims))).astype(float)
        counts = counts.reshape(dims)
        smoothed = counts + alpha
        cpts[v] = smoothed / smoothed.sum(axis=-1, keepdims=True)
    return DiscreteBayesNet(
        variables=tuple(variables),
        state_bounds={v: tuple(tuple(b) for b in state_bounds[v]) for v in variables},
        parents=canon,
        cpts=cpts,
    )


def learn_structure(
    samples: np.ndarray,
    variables: tuple[int, ...],
    cards: dict[int, int],
    max_parents: int = 3,
    order: tuple[int, ...] | None = None,
) -> dict[int, tuple[int, ...]]:
    """Greedy BIC hill climbing over edge add/remove, edges restricted to ``order``.

    ``order`` (default: ``variables``) is the application's topological stage
    order; only edges from earlier to later stages are admissible, so the
    reverse move is never order-consistent and the search reduces to add/remove.
    """
    samples = np.asarray(samples, dtype=np.int64)
    n = samples.shape[0]
    if n == 0:
        raise TrainingError("no samples for structure learning")
    pos = {v: i for i, v in enumerate(variables)}
    rank = {v: i for i, v in enumerate(order if order is not None else variables)}
    for v in variables:
        if v not in rank:
            raise TrainingError(f"variable {v} missing from order")
    log_n = math.log(n)
    score_cache: dict[tuple[int, tuple[int, ...]], float] = {}

    def family_score(v: int, ps: tuple[int, ...]) -> float:
        key = (v, ps)
        got = score_cache.get(key)
        if got is not None:
            return got
        dims = [cards[p] for p in ps] + [cards[v]]
        cols = [pos[p] for p in ps] + [pos[v]]
        flat = np.ravel_multi_index(samples[:, cols].T, dims) if len(dims) > 1 else samples[:, cols[0]]
        counts = np.bincount(flat, minlength=int(np.prod(dims))).astype(float)
        counts = counts.reshape(-1, cards[v])
        row_tot = counts.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            ll_terms = counts * np.log(counts / row_tot)
        ll = float(np.nansum(ll_terms))
        free = (cards[v] - 1) * int(np.prod([cards[p] for p in ps])) if ps else cards[v] - 1
        score = ll - 0.5 * log_n * free
        score_cache[key] = score
        return score

    parents: dict[int, tuple[int, ...]] = {v: () for v in variables}
    while True:
        best_delta = 1e-9
        best_move: tuple[int, tuple[int, ...]] | None = None
        for v in variables:
            cur = parents[v]
            cur_score = family_score(v, cur)
            for u in variables:
                if u == v:
                    continue
                if u in cur:
                    trial = tuple(p for p in cur if p != u)
                elif rank[u] < rank[v] and len(cur) < max_parents:
                    trial = tuple(sorted(cur + (u,), key=pos.__getitem__))
                else:
                    continue
                delta = family_score(v, trial) - cur_score
                if delta > best_delta:
                    best_delta = delta
                    best_move = (v, trial)
        if best_move is None:
            return parents
        parents[best_move[0]] = best_move[1]


def _expand(f: Factor, vs: list[int]) -> np.ndarray:
    table = f.table
    missing = [v for v in vs if v not in f.vars]
    table = table.reshape(table.shape + (1,) * len(missing))
    cur = list(f.vars) + missing
    return np.transpose(table, [cur.index(v) for v in vs])


def _multiply(a: Factor, b: Factor, pos: dict[int, int]) -> Factor:
    vs = sorted(set(a.vars) | set(b.vars), key=pos.__getitem__)
    return Factor(tuple(vs), _expand(a, vs) * _expand(b, vs))


def _reduce(f: Factor, var: int, val: int) -> Factor:
    i = f.vars.index(var)
    return Factor(f.vars[:i] + f.vars[i + 1 :], np.take(f.table, val, axis=i))


def _sum_out(f: Factor, var: int) -> Factor:
    i = f.vars.index(var)
    return Factor(f.vars[:i] + f.vars[i + 1 :], f.table.sum(axis=i))


def _ancestral_closure(bn: DiscreteBayesNet, seeds) -> set[int]:
    out: set[int] = set()
    stack = list(seeds)
    while stack:
        v = stack.pop()
        if v in out:
            continue
        out.add(v)
        stack.extend(bn.parents[v])
    return out


def joint_query(bn: DiscreteBayesNet, targets, evidence: Evidence | None = None) -> Factor:
    """Normalized joint posterior over ``targets`` given hard evidence.

    Variable elimination restricted to the ancestral closure of targets and
    evidence (barren nodes never touched), greedy smallest-intermediate-factor
    elimination order, deterministic tie-breaks.
    """
    evidence = dict(evidence or {})
    targets = tuple(set(targets))
    if not targets:
        raise RangeError("empty target set")
    for v in targets:
        if v not in bn._pos:
            raise RangeError(f"unknown target variable {v}")
        if v in evidence:
            raise RangeError(f"target {v} is also evidence")
    targets = tuple(sorted(targets, key=bn.position))
    for v, s in evidence.items():
        if v not in bn._pos:
            raise RangeError(f"unknown evidence variable {v}")
        if not 0 <= s < bn.card(v):
            raise RangeError(f"evidence state {s} out of range for variable {v}")
    relevant = _ancestral_closure(bn, set(targets) | set(evidence))
    factors: list[Factor] = []
    for v in sorted(relevant, key=bn.position):
        f = bn.cpt_factor(v)
        for ev in f.vars:
            if ev in evidence:
                f = _reduce(f, ev, evidence[ev])
        factors.append(f)
    to_eliminate = sorted(
        (v for v in relevant if v not in targets and v not in evidence), key=bn.position
    )
    remaining = set(to_eliminate)
    while remaining:
        # greedy: eliminate the variable creating the smallest intermediate factor
        best_v, best_size = None, None
        for v in sorted(remaining, key=bn.position):
            union: set[int] = set()
            for f in factors:
                if v in f.vars:
                    union |= set(f.vars)
            union.discard(v)
            size = int(np.prod([bn.card(u) for u in union])) if union else 1
            if best_size is None or size < best_size:
                best_v, best_size = v, size
        touched = [f for f in factors if best_v in f.vars]
        rest = [f for f in factors if best_v not in f.vars]
        prod = touched[0]
        for f in touched[1:]:
            prod = _multiply(prod, f, bn._pos)
        rest.append(_sum_out(prod, best_v))
        factors = rest
        remaining.discard(best_v)
    result = factors[0]
    for f in factors[1:]:
        result = _multiply(result, f, bn._pos)
    # reorder axes to target order (result vars are exactly the targets)
    perm = [result.vars.index(v) for v in targets]
    table = np.transpose(result.table, perm)
    z = float(table.sum())
    if z <= 1e-300:
        raise InconsistentEvidenceError(f"evidence {evidence} has zero probability")
    return Factor(targets, table / z)


def entropy(probs) -> float:
    """Shannon entropy in bits of a probability vector or table."""
    p = np.asarray(probs, dtype=float).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def _entropy_cliques(
    bn: DiscreteBayesNet, group: tuple[int, ...], evidence: Evidence
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(clique, separator) pairs whose marginals decompose H(group | evidence).

    Symbolic variable elimination on CPT scopes: hidden variables are summed
    out first, then the group variables one by one; eliminating a group
    variable records the scope union as a clique and the produced message as
    its separator. The posterior factorizes over that bucket tree, so
    H = sum H(clique) - sum H(separator) exactly.
    """
    relevant = _ancestral_closure(bn, set(group) | set(evidence))
    scopes: list[set[int]] = []
    for v in sorted(relevant, key=bn.position):
        sc = {u for u in (v, *bn.parents[v]) if u not in evidence}
        if sc:
            scopes.append(sc)
    group_set = set(group)

    def eliminate(v: int) -> set[int]:
        touched = [s for s in scopes if v in s]
        merged: set[int] = set()
        for s in touched:
            merged |= s
            scopes.remove(s)
        merged.discard(v)
        if merged:
            scopes.append(merged)
        return merged

    hidden = sorted((v for v in relevant if v not in group_set and v not in evidence),
                    key=bn.position)
    remaining = set(hidden)
    while remaining:
        best_v, best_size = None, None
        for v in sorted(remaining, key=bn.position):
            union: set[int] = set()
            for s in scopes:
                if v in s:
                    union |= s
            union.discard(v)
            size = 1
            for u in union:
                size *= bn.card(u)
            if best_size is None or size < best_size:
                best_v, best_size = v, size
        eliminate(best_v)
        remaining.discard(best_v)
    out: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
    remaining = set(group)
    while remaining:
        best_v, best_size = None, None
        for v in sorted(remaining, key=bn.position):
            union = {v}
            for s in scopes:
                if v in s:
                    union |= s
            size = 1
            for u in union:
                size *= bn.card(u)
            if best_size is None or size < best_size:
                best_v, best_size = v, size
        clique = {best_v}
        for s in scopes:
            if best_v in s:
                clique |= s
        sep = eliminate(best_v)
        out.append((
            tuple(sorted(clique, key=bn.position)),
            tuple(sorted(sep, key=bn.position)),
        ))
        remaining.discard(best_v)
    return out


def joint_entropy(
    inference: "CachedInference | DiscreteBayesNet",
    variables,
    evidence: Evidence | None = None,
) -> float:
    """Exact H(variables | evidence) in bits without building the joint table.

    Decomposes the posterior over elimination cliques; each clique marginal is
    a small exact query, so cost stays polynomial for chain- and tree-like
    networks regardless of how many variables are requested.
    """
    evidence = dict(evidence or {})
    if isinstance(inference, DiscreteBayesNet):
        inference = CachedInference(inference)
    bn = inference.bn
    vs = tuple(sorted(set(variables), key=bn.position))
    if not vs:
        raise RangeError("empty variable set")
    if len(vs) == 1:
        return entropy(inference.query(vs, evidence).table)
    total = 0.0
    for clique, sep in _entropy_cliques(bn, vs, evidence):
        total += entropy(inference.query(clique, evidence).table)
        if sep:
            total -= entropy(inference.query(sep, evidence).table)
    return max(total, 0.0)


def mutual_information(
    inference: "CachedInference | DiscreteBayesNet",
    targets,
    source: int,
    evidence: Evidence | None = None,
) -> float:
    """Conditional mutual information I(targets; source | evidence) in bits.

    Computed as H(X|E) + H(Y|E) - H(X,Y|E) with the joint entropies evaluated
    by clique decomposition, so large target sets stay tractable; clamped to 0
    against rounding.
    """
    evidence = dict(evidence or {})
    targets = tuple(sorted(set(targets)))
    if source in targets:
        raise RangeError("source variable cannot be a target")
    if source in evidence:
        return 0.0
    if not targets:
        return 0.0
    if isinstance(inference, DiscreteBayesNet):
        inference = CachedInference(inference)
    h_x = entropy(inference.query((source,), evidence).table)
    h_y = joint_entropy(inference, targets, evidence)
    h_xy = joint_entropy(inference, targets + (source,), evidence)
    return max(h_x + h_y - h_xy, 0.0)


def correlated_set(bn: DiscreteBayesNet, var: int) -> tuple[int, ...]:
    """Variables reachable from ``var`` by a directed path (strict descendants)."""
    if var not in bn._pos:
        raise RangeError(f"unknown variable {var}")
    seen: set[int] = set()
    stack = list(bn.children(var))
    while stack:
        v = stack.pop()
        if v in seen:
            continue
        seen.add(v)
        stack.extend(bn.children(v))
    return tuple(sorted(seen, key=bn.position))


class CachedInference:
    """Memoizing front end for joint_query and mutual_information.

    Cache keys restrict evidence to the moral-graph connected components of the
    query's targets; evidence in other components cannot influence the result.
    """

    def __init__(self, bn: DiscreteBayesNet):
        self.bn = bn
        self._joint: dict = {}
        self._mi: dict = {}
        self._comp = self._components()

    def _components(self) -> dict[int, int]:
        nbr: dict[int, set[int]] = {v: set() for v in self.bn.variables}
        for v in self.bn.variables:
            ps = self.bn.parents[v]
            for p in ps:
                nbr[v].add(p)
                nbr[p].add(v)
            for a in ps:
                for b in ps:
                    if a != b:
                        nbr[a].add(b)
        comp: dict[int, int] = {}
        for root in self.bn.variables:
            if root in comp:
                continue
            stack = [root]
            while stack:
                v = stack.pop()
                if v in comp:
                    continue
                comp[v] = root
                stack.extend(nbr[v] - comp.keys())
        return comp

    def _key_evidence(self, targets, evidence: Evidence) -> tuple:
        comps = {self._comp[t] for t in targets if t in self._comp}
        return tuple(
            sorted((v, s) for v, s in evidence.items() if self._comp.get(v) in comps)
        )

    def query(self, targets, evidence: Evidence | None = None) -> Factor:
        evidence = dict(evidence or {})
        targets = tuple(sorted(set(targets), key=self.bn.position))
        key = (targets, self._key_evidence(targets, evidence))
        got = self._joint.get(key)
        if got is None:
            got = joint_query(self.bn, targets, evidence)
            self._joint[key] = got
        return got

    def mutual_information(self, targets, source: int, evidence: Evidence | None = None) -> float:
        evidence = dict(evidence or {})
        targets = tuple(sorted(set(targets), key=self.bn.position))
        key = (targets, source, self._key_evidence(targets + (source,), evidence))
        got = self._mi.get(key)
        if got is None:
            got = mutual_information(self, targets, source, evidence)
            self._mi[key] = got
        return got


def bn_to_dict(bn: DiscreteBayesNet) -> dict:
    return {
        "variables": [
            {
                "id": int(v),
                "bounds": [[float(lo), float(hi)] for lo, hi in bn.state_bounds[v]],
                "parents": [int(p) for p in bn.parents[v]],
                "cpt": bn.cpts[v].tolist(),
            }
            for v in bn.variables
        ]
    }


def bn_from_dict(payload: dict) -> DiscreteBayesNet:
    try:
        entries = payload["variables"]
        variables = tuple(int(e["id"]) for e in entries)
        state_bounds = {
            int(e["id"]): tuple((float(lo), float(hi)) for lo, hi in e["bounds"])
            for e in entries
        }
        parents = {int(e["id"]): tuple(int(p) for p in e["parents"]) for e in entries}
        cpts = {int(e["id"]): np.asarray(e["cpt"], dtype=float) for e in entries}
    except (KeyError, TypeError, ValueError) as exc:
        raise StructuralError(f"malformed bayes net payload: {exc}") from exc
    return DiscreteBayesNet(variables, state_bounds, parents, cpts)


def save_bn(bn: DiscreteBayesNet, path: str):
    with open(path, "w") as fh:
        json.dump(bn_to_dict(bn), fh, indent=2)
        fh.write("\n")


def load_bn(path: str) -> DiscreteBayesNet:
    with open(path) as fh:
        return bn_from_dict(json.load(fh))

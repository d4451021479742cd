"""Entropy-based uncertainty scoring of schedulable stages.

A stage is worth executing early if finishing it is expected to sharpen the
duration estimates of the stages still waiting, or to reveal the structure of a
dynamic stage it feeds. Both effects are priced in seconds: mutual information
times the posterior duration ranges it could tighten, plus structural entropy
times the dynamic stage's duration range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .bayesnet import CachedInference
from .model import DurationDistribution


def binary_entropy(p: float) -> float:
    """Entropy in bits of a Bernoulli(p) indicator."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * math.log2(p) + (1.0 - p) * math.log2(1.0 - p))


def stage_range(dist: DurationDistribution) -> float:
    """Width in seconds of the distribution's support (states with mass)."""
    lo, hi = dist.support()
    return hi - lo


def dynamic_stage_entropy(node_probs, edge_probs=()) -> float:
    """Structural uncertainty of a dynamic stage: sum of indicator entropies
    over candidate-node and candidate-edge occurrence."""
    return sum(binary_entropy(p) for p in node_probs) + sum(
        binary_entropy(p) for p in edge_probs
    )


@dataclass(frozen=True)
class DynamicUncertainty:
    """Inputs for the dynamic-successor bonus of a scoring query."""

    node_probs: tuple[float, ...]
    edge_probs: tuple[float, ...]
    span_range: float


@dataclass(frozen=True)
class UncertaintyScore:
    stage_id: int
    mutual_information: float  # bits
    range_sum: float           # seconds, over the correlated unscheduled targets
    dynamic_entropy: float     # bits
    dynamic_range: float       # seconds

    @property
    def reduction(self) -> float:
        return self.mutual_information * self.range_sum + self.dynamic_entropy * self.dynamic_range


def uncertainty_reduction(
    stage_id: int,
    inference: CachedInference | None,
    evidence: dict[int, int],
    targets,
    posterior,
    dynamic: DynamicUncertainty | None = None,
) -> UncertaintyScore:
    """Score R(X) for stage X.

    targets: unscheduled stages correlated with X (already filtered against
    evidence); posterior: callable stage_id -> posterior DurationDistribution;
    dynamic: set when X immediately precedes an unexpanded dynamic stage.
    """
    targets = tuple(targets)
    mi = 0.0
    range_sum = 0.0
    if inference is not None and targets and stage_id in inference.bn.state_bounds:
        mi = inference.mutual_information(targets, stage_id, evidence)
        range_sum = sum(stage_range(posterior(t)) for t in targets)
    dyn_h = 0.0
    dyn_r = 0.0
    if dynamic is not None:
        dyn_h = dynamic_stage_entropy(dynamic.node_probs, dynamic.edge_probs)
        dyn_r = dynamic.span_range
    return UncertaintyScore(
        stage_id=stage_id,
        mutual_information=mi,
        range_sum=range_sum,
        dynamic_entropy=dyn_h,
        dynamic_range=dyn_r,
    )

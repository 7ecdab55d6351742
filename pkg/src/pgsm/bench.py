"""Timing probe: cost per particle weight as the number of untouched clusters grows."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import PGSMConfig, split_merge_move
from .partition import DirichletProcess, PartitionPrior
from .state import ClusterState


class FixedAnchors:
    """Anchor 'proposal' that always returns the same indices (timing and tests only)."""

    def __init__(self, anchors):
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.count = self.anchors.size

    def maybe_adapt(self, state) -> bool:
        return False

    def sample(self, state, rng) -> np.ndarray:
        return self.anchors


@dataclass
class ProbeResult:
    num_clusters: int
    seconds_per_weight: float
    num_weights: int


def probe_state(num_other: int, other_points: int, anchor_block: int, model, rng) -> tuple[ClusterState, np.ndarray]:
    """Two anchor blocks of ``anchor_block`` points plus ``other_points`` points in ``num_other`` clusters."""
    D = model.data_dim
    T = 2 * anchor_block + other_points
    X = rng.standard_normal((T, D))
    labels = np.empty(T, dtype=np.int64)
    labels[:anchor_block] = 0
    labels[anchor_block : 2 * anchor_block] = 1
    labels[2 * anchor_block :] = 2 + np.arange(other_points) % num_other
    state = ClusterState(X, model, labels)
    return state, np.array([0, anchor_block])


def weight_timing_probe(
    model,
    cluster_counts=(10, 1000),
    other_points: int = 2000,
    anchor_block: int = 100,
    prior: PartitionPrior | None = None,
    config: PGSMConfig | None = None,
    repeats: int = 30,
    seed: int = 0,
) -> list[ProbeResult]:
    """Median wall time of a split-merge move divided by the number of weights it computed.

    The total number of observations and the anchor blocks are the same in
    every context; only the number of clusters outside the move changes.
    """
    prior = prior or DirichletProcess(1.0)
    config = config or PGSMConfig(early_stop=False)
    out = []
    for C in cluster_counts:
        rng = np.random.default_rng(seed)
        base, anchors = probe_state(C, other_points, anchor_block, model, rng)
        proposal = FixedAnchors(anchors)
        per = []
        weights = 0
        split_merge_move(base.copy(), prior, proposal, config, rng)  # warm-up
        for _ in range(repeats):
            st = base.copy()
            t0 = time.perf_counter()
            info = split_merge_move(st, prior, proposal, config, rng)
            dt = time.perf_counter() - t0
            weights = info.closure_size * config.num_particles
            per.append(dt / weights)
        out.append(ProbeResult(base.num_clusters, float(np.median(per)), weights))
    return out

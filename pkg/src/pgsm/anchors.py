"""Anchor proposals ``h(s)`` for split-merge moves.

The informed proposals score blocks of a *snapshot* of the clustering.  The
snapshot is refreshed only when the number of clusters breaks its running
record (and never after an optional wall-clock stop), so between refreshes
``h`` does not depend on the current state and the split-merge move stays
invariant.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .likelihoods import LikelihoodModel, build_stat, stat_log_marginal, stat_log_predictive, stat_remove
from .partition import Clustering, PartitionPrior, log_tau2, log_tau2_ratio


def uniform_anchors(T: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly random subset of ``count`` distinct indices of ``range(T)``."""
    if count < 2:
        raise ValueError("need at least two anchors")
    if T < count:
        raise ValueError(f"cannot draw {count} distinct anchors from {T} observations")
    return rng.choice(T, size=count, replace=False)


class Snapshot:
    """Frozen copy of a clustering with per-block statistics and lazily cached scores."""

    def __init__(self, labels, X: np.ndarray, model: LikelihoodModel):
        labels = np.asarray(labels, dtype=np.int64)
        _, canon = np.unique(labels, return_inverse=True)
        self.labels = canon.astype(np.int64)
        self.X = X
        self.model = model
        C = int(canon.max()) + 1 if canon.size else 0
        self.blocks = [np.flatnonzero(canon == k) for k in range(C)]
        m = model
        self.stats = np.stack([build_stat(m.code, m.params, m.stat_size, X, b) for b in self.blocks])
        self.lm = np.array([stat_log_marginal(m.code, m.params, s) for s in self.stats])
        self._pair: dict[tuple[int, int], float] = {}
        self._ci: dict[int, np.ndarray] = {}
        self._ti: dict[int, np.ndarray] = {}

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def pair_score(self, a: int, b: int) -> float:
        """``log L(y_{a u b}) - log L(y_a) - log L(y_b)``, keyed by the unordered pair."""
        key = (a, b) if a < b else (b, a)
        v = self._pair.get(key)
        if v is None:
            m = self.model
            idx = np.concatenate([self.blocks[a], self.blocks[b]])
            both = stat_log_marginal(m.code, m.params, build_stat(m.code, m.params, m.stat_size, self.X, idx))
            v = both - self.lm[a] - self.lm[b]
            self._pair[key] = v
        return v

    def cluster_informed_probs(self, own: int) -> np.ndarray:
        """Block probabilities for an observation in block ``own`` (needs at least two blocks)."""
        p = self._ci.get(own)
        if p is None:
            C = self.num_blocks
            logs = np.empty(C)
            for b in range(C):
                if b != own:
                    logs[b] = self.pair_score(own, b)
            others = np.delete(logs, own)
            # own block scores the average of the others
            logs[own] = logsumexp(others) - math.log(C - 1)
            p = np.exp(logs - logsumexp(logs))
            self._ci[own] = p
        return p

    def threshold_informed_probs(self, i1: int, prior: PartitionPrior) -> np.ndarray:
        """Prior-attachment times predictive probability of ``i1`` joining each block (``i1`` removed first)."""
        p = self._ti.get(i1)
        if p is None:
            m = self.model
            x = self.X[i1]
            own = self.labels[i1]
            scratch = np.empty(m.stat_size)
            logs = np.empty(self.num_blocks)
            for b, idx in enumerate(self.blocks):
                size = idx.size
                stat = self.stats[b]
                if b == own:
                    size -= 1
                    if size == 0:
                        # empty block after removal: attach as a new block
                        logs[b] = log_tau2(prior, 1) + m.log_marginal_of(self.X, [i1])
                        continue
                    stat = stat.copy()
                    stat_remove(m.code, m.params, stat, x)
                logs[b] = log_tau2_ratio(prior, size) + stat_log_predictive(m.code, m.params, stat, x, scratch)
            p = np.exp(logs - logsumexp(logs))
            self._ti[i1] = p
        return p


def _pick_partner(snap: Snapshot, i1: int, block: int, rng) -> int | None:
    members = snap.blocks[block]
    if members.size - (snap.labels[i1] == block) == 0:
        return None
    while True:
        i2 = int(members[rng.integers(members.size)])
        if i2 != i1:
            return i2


def _sample_ci(snap: Snapshot, rng) -> np.ndarray:
    T = snap.labels.size
    if snap.num_blocks < 2:
        return uniform_anchors(T, 2, rng)
    i1 = int(rng.integers(T))
    p = snap.cluster_informed_probs(int(snap.labels[i1]))
    b = int(rng.choice(p.size, p=p))
    i2 = _pick_partner(snap, i1, b, rng)
    if i2 is None:
        return uniform_anchors(T, 2, rng)
    return np.array([i1, i2])


def _sample_ti(snap: Snapshot, prior: PartitionPrior, threshold: float, rng) -> np.ndarray:
    T = snap.labels.size
    i1 = int(rng.integers(T))
    p = snap.threshold_informed_probs(i1, prior)
    candidates = np.flatnonzero(p >= threshold)
    if candidates.size == 0:
        return uniform_anchors(T, 2, rng)
    b = int(candidates[rng.integers(candidates.size)])
    i2 = _pick_partner(snap, i1, b, rng)
    if i2 is None:
        return uniform_anchors(T, 2, rng)
    return np.array([i1, i2])


def cluster_informed_anchors(c: Clustering, X: np.ndarray, model: LikelihoodModel, rng) -> np.ndarray:
    """One draw of the cluster-informed proposal for clustering ``c`` of ``range(T)``."""
    return _sample_ci(Snapshot(c.labels(), X, model), rng)


def threshold_informed_anchors(
    c: Clustering, X: np.ndarray, model: LikelihoodModel, prior: PartitionPrior, threshold: float, rng
) -> np.ndarray:
    """One draw of the threshold-informed proposal for clustering ``c`` of ``range(T)``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return _sample_ti(Snapshot(c.labels(), X, model), prior, threshold, rng)


# --------------------------------------------------------------------------- stateful proposals


@dataclass
class AdaptationState:
    max_clusters: int = 0
    stopped: bool = False
    stop_after: float | None = None
    started: float | None = None
    num_adaptations: int = 0


class UniformProposal:
    name = "uniform"

    def __init__(self, count: int = 2):
        self.count = count
        self.adaptation = AdaptationState(stopped=True)

    def maybe_adapt(self, state) -> bool:
        return False

    def sample(self, state, rng) -> np.ndarray:
        return uniform_anchors(state.T, self.count, rng)


class _InformedProposal:
    def __init__(self, stop_after: float | None = None):
        self.count = 2
        self.adaptation = AdaptationState(stop_after=stop_after)
        self.snapshot: Snapshot | None = None

    def maybe_adapt(self, state) -> bool:
        """Refresh the snapshot if the cluster count breaks its record; returns whether it did."""
        ad = self.adaptation
        now = time.monotonic()
        if ad.started is None:
            ad.started = now
        if ad.stop_after is not None and now - ad.started >= ad.stop_after and self.snapshot is not None:
            ad.stopped = True
        if ad.stopped:
            return False
        C = state.num_clusters
        if C <= ad.max_clusters:
            return False
        ad.max_clusters = C
        ad.num_adaptations += 1
        self.snapshot = Snapshot(state.labels, state.X, state.model)
        return True

    def stop(self):
        self.adaptation.stopped = True

    def _snap(self, state) -> Snapshot:
        if self.snapshot is None:
            self.maybe_adapt(state)
        return self.snapshot


class ClusterInformedProposal(_InformedProposal):
    name = "cluster_informed"

    def sample(self, state, rng) -> np.ndarray:
        return _sample_ci(self._snap(state), rng)


class ThresholdInformedProposal(_InformedProposal):
    name = "threshold_informed"

    def __init__(self, prior: PartitionPrior, threshold: float = 0.01, stop_after: float | None = None):
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        super().__init__(stop_after)
        self.prior = prior
        self.threshold = threshold

    def sample(self, state, rng) -> np.ndarray:
        return _sample_ti(self._snap(state), self.prior, self.threshold, rng)


def make_proposal(name: str, count: int = 2, prior: PartitionPrior | None = None,
                  threshold: float = 0.01, stop_after: float | None = None):
    if name == "uniform":
        return UniformProposal(count)
    if count != 2:
        raise ValueError("informed anchor proposals only support two anchors")
    if name == "cluster_informed":
        return ClusterInformedProposal(stop_after)
    if name == "threshold_informed":
        if prior is None:
            raise ValueError("threshold-informed proposal needs the partition prior")
        return ThresholdInformedProposal(prior, threshold, stop_after)
    raise ValueError(f"unknown anchor proposal {name!r}")

"""Mutable clustering state with per-block sufficient statistics.

Blocks live in numbered slots.  ``active[:C]`` lists the occupied slots and
``pos[slot]`` gives a slot's position in that list, so blocks can be added
and removed in O(1) by the compiled kernels.  ``counts = [C, n_free]`` is an
array so the kernels can update it in place.
"""
from __future__ import annotations

import numba
import numpy as np

from .likelihoods import LikelihoodModel, build_stat, stat_log_marginal
from .partition import Clustering, PartitionPrior, canonical_labels, log_tau1, log_tau2


@numba.njit(cache=True)
def open_slot(active, pos, free, counts):
    C, nf = counts[0], counts[1]
    if nf == 0:
        return -1
    slot = free[nf - 1]
    counts[1] = nf - 1
    active[C] = slot
    pos[slot] = C
    counts[0] = C + 1
    return slot


@numba.njit(cache=True)
def close_slot(slot, active, pos, free, counts):
    C, nf = counts[0], counts[1]
    k = pos[slot]
    last = active[C - 1]
    active[k] = last
    pos[last] = k
    pos[slot] = -1
    counts[0] = C - 1
    free[nf] = slot
    counts[1] = nf + 1


class ClusterState:
    """Array-backed clustering of ``range(T)`` used inside sampler chains."""

    def __init__(self, X: np.ndarray, model: LikelihoodModel, labels, capacity: int | None = None):
        self.X = model.validate_data(X)
        self.model = model
        T = self.X.shape[0]
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (T,):
            raise ValueError("need one label per observation")
        canon = np.asarray(canonical_labels(labels), dtype=np.int64)
        C = int(canon.max()) + 1 if T else 0
        cap = max(C, capacity or 0, min(T, 16), 1)
        self._alloc(cap)
        self.labels = canon
        self.counts[:] = (0, cap)
        self.free[:cap] = np.arange(cap - 1, -1, -1)
        for k in range(C):
            slot = open_slot(self.active, self.pos, self.free, self.counts)
            idx = np.flatnonzero(canon == k)
            self.stats[slot] = build_stat(model.code, model.params, model.stat_size, self.X, idx)
            self.sizes[slot] = idx.size
            self.lm[slot] = stat_log_marginal(model.code, model.params, self.stats[slot])
            self.labels[idx] = slot

    def _alloc(self, cap: int):
        ss = self.model.stat_size
        self.stats = np.zeros((cap, ss))
        self.sizes = np.zeros(cap, dtype=np.int64)
        self.lm = np.zeros(cap)
        self.active = np.full(cap, -1, dtype=np.int64)
        self.pos = np.full(cap, -1, dtype=np.int64)
        self.free = np.full(cap, -1, dtype=np.int64)
        self.counts = np.zeros(2, dtype=np.int64)

    @classmethod
    def single_cluster(cls, X, model) -> "ClusterState":
        return cls(X, model, np.zeros(len(X), dtype=np.int64))

    @classmethod
    def singletons(cls, X, model) -> "ClusterState":
        return cls(X, model, np.arange(len(X)))

    @classmethod
    def from_clustering(cls, X, model, c: Clustering) -> "ClusterState":
        return cls(X, model, c.labels())

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def capacity(self) -> int:
        return self.stats.shape[0]

    @property
    def num_clusters(self) -> int:
        return int(self.counts[0])

    def active_slots(self) -> np.ndarray:
        return self.active[: self.counts[0]].copy()

    def ensure_free(self, k: int):
        """Grow storage so at least ``k`` slots are free."""
        if self.counts[1] >= k:
            return
        old = self.capacity
        new = max(2 * old, old + k - int(self.counts[1]))
        stats, sizes, lm, active, pos = self.stats, self.sizes, self.lm, self.active, self.pos
        free = self.free[: self.counts[1]].copy()
        C = int(self.counts[0])
        self._alloc(new)
        self.stats[:old] = stats
        self.sizes[:old] = sizes
        self.lm[:old] = lm
        self.active[:old] = active
        self.pos[:old] = pos
        extra = np.arange(new - 1, old - 1, -1)
        self.free[: extra.size] = extra
        self.free[extra.size : extra.size + free.size] = free
        self.counts[:] = (C, extra.size + free.size)

    def members(self, slot: int) -> np.ndarray:
        return np.flatnonzero(self.labels == slot)

    def canonical(self) -> tuple[int, ...]:
        return canonical_labels(self.labels)

    def to_clustering(self) -> Clustering:
        return Clustering.from_labels(self.labels)

    def copy(self) -> "ClusterState":
        new = object.__new__(ClusterState)
        new.X, new.model = self.X, self.model
        for name in ("labels", "stats", "sizes", "lm", "active", "pos", "free", "counts"):
            setattr(new, name, getattr(self, name).copy())
        return new

    def remove_blocks(self, slots):
        for slot in slots:
            close_slot(int(slot), self.active, self.pos, self.free, self.counts)
            self.sizes[slot] = 0

    def add_block(self, idx: np.ndarray, stat: np.ndarray | None = None) -> int:
        self.ensure_free(1)
        slot = int(open_slot(self.active, self.pos, self.free, self.counts))
        m = self.model
        if stat is None:
            stat = build_stat(m.code, m.params, m.stat_size, self.X, np.asarray(idx, dtype=np.int64))
        self.stats[slot] = stat
        self.sizes[slot] = len(idx)
        self.lm[slot] = stat_log_marginal(m.code, m.params, self.stats[slot])
        self.labels[idx] = slot
        return slot

    def log_likelihood(self) -> float:
        return float(self.lm[self.active_slots()].sum())

    def log_score(self, prior: PartitionPrior) -> float:
        """Unnormalised log posterior: ``log tau(c) + sum_b log L(y_b)``."""
        slots = self.active_slots()
        return (
            log_tau1(prior, slots.size)
            + sum(log_tau2(prior, int(self.sizes[s])) for s in slots)
            + float(self.lm[slots].sum())
        )

    def check_consistency(self, rtol: float = 1e-8) -> None:
        """Rebuild every block statistic from scratch and compare with the cached one."""
        slots = self.active_slots()
        if np.unique(slots).size != slots.size:
            raise AssertionError("duplicate active slots")
        if set(np.unique(self.labels)) != set(slots.tolist()):
            raise AssertionError("labels and active slots disagree")
        m = self.model
        for s in slots:
            idx = self.members(s)
            if idx.size != self.sizes[s]:
                raise AssertionError(f"slot {s}: size {self.sizes[s]} but {idx.size} members")
            fresh = build_stat(m.code, m.params, m.stat_size, self.X, idx)
            lm = stat_log_marginal(m.code, m.params, fresh)
            if not np.isclose(lm, self.lm[s], rtol=rtol, atol=rtol):
                raise AssertionError(f"slot {s}: cached log marginal {self.lm[s]} vs rebuilt {lm}")
            cached = stat_log_marginal(m.code, m.params, self.stats[s])
            if not np.isclose(lm, cached, rtol=rtol, atol=rtol):
                raise AssertionError(f"slot {s}: cached statistic gives {cached} vs rebuilt {lm}")

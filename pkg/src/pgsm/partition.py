"""Clusterings (set partitions of observation indices) and partition priors.

Priors are of the product form ``tau(c) = tau1(|c|) * prod_b tau2(|b|)``.
Every quantity is returned on the log scale.  ``tau1`` is only defined up to
a prior-wide additive constant, which cancels in every ratio the samplers
use.  ``tau2`` is normalised so that the product form is the exchangeable
partition probability function of the prior (``tau2(1)`` is not arbitrary:
it is multiplied once per block).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.special import gammaln

MAX_ENUMERATION_SIZE = 12


class PartitionError(ValueError):
    """Raised for malformed clusterings or inconsistent restrict/reassemble calls."""


class Clustering:
    """Immutable partition of a finite index set into nonempty disjoint blocks.

    Blocks are stored in canonical order (each block sorted, blocks ordered by
    their smallest element) so that equality and hashing are label-free.  A
    dictionary gives O(1) lookup of the block holding an index.
    """

    __slots__ = ("_blocks", "_block_of", "_hash")

    def __init__(self, blocks: Iterable[Iterable[int]]):
        canon = []
        block_of: dict[int, int] = {}
        for b in blocks:
            members = tuple(sorted(int(i) for i in b))
            if not members:
                raise PartitionError("blocks must be nonempty")
            canon.append(members)
        canon.sort(key=lambda b: b[0])
        for k, members in enumerate(canon):
            for i in members:
                if i in block_of:
                    raise PartitionError(f"index {i} appears in more than one block")
                block_of[i] = k
        self._blocks = tuple(canon)
        self._block_of = block_of
        self._hash = hash(self._blocks)

    @classmethod
    def from_labels(cls, labels: Sequence[int], indices: Sequence[int] | None = None) -> "Clustering":
        """Build from a label per index; ``indices`` defaults to ``range(len(labels))``."""
        if indices is None:
            indices = range(len(labels))
        groups: dict[int, list[int]] = {}
        for i, lab in zip(indices, labels):
            groups.setdefault(int(lab), []).append(int(i))
        return cls(groups.values())

    @property
    def blocks(self) -> tuple[tuple[int, ...], ...]:
        return self._blocks

    @property
    def indices(self) -> frozenset[int]:
        return frozenset(self._block_of)

    @property
    def size(self) -> int:
        """Number of indices covered (``T`` for a clustering of ``[T]``)."""
        return len(self._block_of)

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        return iter(self._blocks)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Clustering):
            return NotImplemented
        return self._blocks == other._blocks

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        inner = ", ".join("{" + ",".join(map(str, b)) + "}" for b in self._blocks)
        return f"Clustering({{{inner}}})"

    def block_index(self, i: int) -> int:
        return self._block_of[i]

    def block_containing(self, i: int) -> tuple[int, ...]:
        return self._blocks[self._block_of[i]]

    def labels(self) -> np.ndarray:
        """Canonical label vector; only valid for a clustering of ``range(T)``."""
        T = len(self._block_of)
        if any(i >= T or i < 0 for i in self._block_of):
            raise PartitionError("labels() requires a clustering of range(T)")
        out = np.empty(T, dtype=np.int64)
        for k, b in enumerate(self._blocks):
            out[list(b)] = k
        return out

    def is_partition_of(self, T: int) -> bool:
        return set(self._block_of) == set(range(T))


def canonical_labels(labels: Sequence[int]) -> tuple[int, ...]:
    """Relabel by order of first appearance (restricted growth string)."""
    seen: dict[int, int] = {}
    out = []
    for lab in labels:
        lab = int(lab)
        if lab not in seen:
            seen[lab] = len(seen)
        out.append(seen[lab])
    return tuple(out)


# --------------------------------------------------------------------------- priors


@dataclass(frozen=True)
class DirichletProcess:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"DP concentration must be positive, got {self.alpha}")


@dataclass(frozen=True)
class PitmanYor:
    alpha: float = 1.0
    discount: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"Pitman-Yor discount must be in [0, 1), got {self.discount}")
        if not self.alpha > -self.discount:
            raise ValueError(f"Pitman-Yor requires alpha > -discount, got alpha={self.alpha}")


@dataclass(frozen=True)
class FiniteDirichlet:
    delta: float = 1.0
    K: int = 5

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"finite Dirichlet concentration must be positive, got {self.delta}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"finite Dirichlet needs a positive integer K, got {self.K}")


PartitionPrior = DirichletProcess | PitmanYor | FiniteDirichlet

# Integer codes used by the compiled kernels.
PRIOR_DP, PRIOR_PY, PRIOR_FD = 0, 1, 2


def prior_code(prior: PartitionPrior) -> tuple[int, float, float]:
    """Flatten a prior to ``(code, p1, p2)`` for the compiled kernels."""
    if isinstance(prior, DirichletProcess):
        return PRIOR_DP, float(prior.alpha), 0.0
    if isinstance(prior, PitmanYor):
        return PRIOR_PY, float(prior.alpha), float(prior.discount)
    if isinstance(prior, FiniteDirichlet):
        return PRIOR_FD, float(prior.delta), float(prior.K)
    raise TypeError(f"unknown partition prior {prior!r}")


def log_tau2_ratio(prior: PartitionPrior, j: int) -> float:
    """``log(tau2(j+1) / tau2(j))`` in constant time."""
    if isinstance(prior, DirichletProcess):
        return math.log(j)
    if isinstance(prior, PitmanYor):
        return math.log(j - prior.discount)
    if isinstance(prior, FiniteDirichlet):
        return math.log(j + prior.delta)
    raise TypeError(f"unknown partition prior {prior!r}")


def log_tau2(prior: PartitionPrior, j: int) -> float:
    """``log tau2(j)`` for a block of size ``j >= 1``."""
    if isinstance(prior, DirichletProcess):
        return float(gammaln(j))
    if isinstance(prior, PitmanYor):
        return float(gammaln(j - prior.discount) - gammaln(1.0 - prior.discount))
    if isinstance(prior, FiniteDirichlet):
        return float(gammaln(j + prior.delta) - gammaln(prior.delta))
    raise TypeError(f"unknown partition prior {prior!r}")


def log_tau1(prior: PartitionPrior, j: int) -> float:
    """``log tau1(j)`` up to a prior-wide constant; ``-inf`` outside the support."""
    if j < 0:
        raise ValueError("cluster count must be nonnegative")
    if isinstance(prior, DirichletProcess):
        return j * math.log(prior.alpha)
    if isinstance(prior, PitmanYor):
        return float(sum(math.log(prior.alpha + prior.discount * k) for k in range(j)))
    if isinstance(prior, FiniteDirichlet):
        if j > prior.K:
            return -math.inf
        # falling factorial K!/(K-j)!: number of ways to label j blocks
        return float(gammaln(prior.K + 1) - gammaln(prior.K - j + 1))
    raise TypeError(f"unknown partition prior {prior!r}")


def log_tau1_ratio(prior: PartitionPrior, j: int) -> float:
    """``log(tau1(j+1) / tau1(j))`` in constant time."""
    if isinstance(prior, DirichletProcess):
        return math.log(prior.alpha)
    if isinstance(prior, PitmanYor):
        return math.log(prior.alpha + prior.discount * j)
    if isinstance(prior, FiniteDirichlet):
        return math.log(prior.K - j) if j < prior.K else -math.inf
    raise TypeError(f"unknown partition prior {prior!r}")


def log_tau1_bar(prior: PartitionPrior, j: int, full_cluster_count: int, restricted_count: int) -> float:
    """Cluster-count term of the restricted target: ``log tau1(j + C - |c_bar|)``."""
    if not full_cluster_count >= restricted_count >= 1:
        raise ValueError("need full_cluster_count >= restricted_count >= 1")
    return log_tau1(prior, j + full_cluster_count - restricted_count)


def log_prior(prior: PartitionPrior, c: Clustering) -> float:
    """Unnormalised ``log tau(c)``."""
    return log_tau1(prior, len(c)) + sum(log_tau2(prior, len(b)) for b in c)


def with_alpha(prior: PartitionPrior, alpha: float) -> PartitionPrior:
    if isinstance(prior, DirichletProcess):
        return DirichletProcess(alpha)
    if isinstance(prior, PitmanYor):
        return PitmanYor(alpha, prior.discount)
    raise TypeError("only DP and Pitman-Yor priors carry a concentration parameter")


# --------------------------------------------------------------------------- restriction


def restrict(c: Clustering, anchors: Iterable[int]) -> tuple[Clustering, frozenset[int]]:
    """Blocks of ``c`` touching the anchors, and the union of those blocks."""
    anchors = list(anchors)
    if len(set(anchors)) != len(anchors):
        raise PartitionError("anchors must be distinct")
    if len(anchors) < 2:
        raise PartitionError("need at least two anchors")
    picked = set()
    for i in anchors:
        if i not in c.indices:
            raise PartitionError(f"anchor {i} is not an index of the clustering")
        picked.add(c.block_index(i))
    c_bar = Clustering(c.blocks[k] for k in sorted(picked))
    return c_bar, c_bar.indices


def reassemble(c: Clustering, c_bar: Clustering, c_bar_new: Clustering) -> Clustering:
    """Replace the blocks ``c_bar`` of ``c`` by ``c_bar_new``."""
    if c_bar_new.indices != c_bar.indices:
        raise PartitionError("new restricted clustering must cover exactly the closure of the anchors")
    old = set(c_bar.blocks)
    if not old.issubset(c.blocks):
        raise PartitionError("c_bar is not a sub-collection of the blocks of c")
    kept = [b for b in c.blocks if b not in old]
    return Clustering(kept + list(c_bar_new.blocks))


# --------------------------------------------------------------------------- enumeration


def bell_number(T: int) -> int:
    """Bell numbers via the Bell triangle."""
    row = [1]
    for _ in range(T):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]


def _rgs(T: int) -> Iterator[list[int]]:
    # restricted growth strings: a[0] = 0, a[i] <= max(a[:i]) + 1
    if T == 0:
        yield []
        return
    a = [0] * T
    m = [0] * T  # m[i] = max(a[:i+1])

    def rec(i: int):
        if i == T:
            yield a
            return
        for v in range(m[i - 1] + 2):
            a[i] = v
            m[i] = max(m[i - 1], v)
            yield from rec(i + 1)

    yield from rec(1)


def enumerate_labelings(T: int, limit: int = MAX_ENUMERATION_SIZE) -> Iterator[tuple[int, ...]]:
    """Every partition of ``range(T)`` as a canonical label tuple."""
    if T > limit:
        raise ValueError(f"refusing to enumerate Bell({T}) partitions; the bound is T <= {limit}")
    for a in _rgs(T):
        yield tuple(a)


def enumerate_partitions(T: int, limit: int = MAX_ENUMERATION_SIZE) -> Iterator[Clustering]:
    """Every partition of ``range(T)`` exactly once."""
    for labels in enumerate_labelings(T, limit):
        yield Clustering.from_labels(labels)


def enumerate_partitions_of(indices: Sequence[int], limit: int = MAX_ENUMERATION_SIZE) -> Iterator[Clustering]:
    indices = list(indices)
    for labels in enumerate_labelings(len(indices), limit):
        yield Clustering.from_labels(labels, indices)

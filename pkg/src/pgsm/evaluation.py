"""Oracles, metrics and synthetic data for checking and benchmarking the samplers."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numba
import numpy as np
from scipy.special import logsumexp

from .core import phi, valid_join_paths
from .likelihoods import LikelihoodModel, stat_init, stat_log_predictive
from .partition import (
    Clustering,
    PartitionPrior,
    enumerate_partitions,
    log_tau1,
    log_tau1_bar,
    log_tau1_ratio,
    log_tau2,
    log_tau2_ratio,
)

MAX_EXACT_T = 10
MAX_RESTRICTED_N = 16


# --------------------------------------------------------------------------- exact targets


class _BlockCache:
    def __init__(self, X, model):
        self.X, self.model, self.cache = X, model, {}

    def __call__(self, block: tuple[int, ...]) -> float:
        v = self.cache.get(block)
        if v is None:
            v = self.cache[block] = self.model.log_marginal_of(self.X, list(block))
        return v


def log_posterior_score(c: Clustering, X, model: LikelihoodModel, prior: PartitionPrior) -> float:
    """Unnormalised log posterior of a clustering of ``range(T)``."""
    return log_tau1(prior, len(c)) + sum(log_tau2(prior, len(b)) + model.log_marginal_of(X, list(b)) for b in c)


def exact_posterior(X, model: LikelihoodModel, prior: PartitionPrior, limit: int = MAX_EXACT_T) -> dict[Clustering, float]:
    """Posterior probability of every partition of ``range(T)`` by enumeration."""
    T = len(X)
    if T > limit:
        raise ValueError(f"exact enumeration refused for T={T} > {limit}")
    lm = _BlockCache(X, model)
    parts = list(enumerate_partitions(T, limit=limit))
    logp = np.array([log_tau1(prior, len(c)) + sum(log_tau2(prior, len(b)) + lm(b) for b in c) for c in parts])
    p = np.exp(logp - logsumexp(logp))
    return dict(zip(parts, p))


def restricted_log_gamma(c_bar: Clustering, full_cluster_count: int, restricted_count: int, X, model, prior) -> float:
    """Unnormalised log restricted target of a candidate ``c_bar``, evaluated from scratch."""
    return log_tau1_bar(prior, len(c_bar), full_cluster_count, restricted_count) + sum(
        log_tau2(prior, len(b)) + model.log_marginal_of(X, list(b)) for b in c_bar
    )


def restricted_support(anchors: Sequence[int], closure: Iterable[int], limit: int = MAX_RESTRICTED_N) -> list[Clustering]:
    """Every partition of the closure with an anchor in each block."""
    anchors = [int(a) for a in anchors]
    rest = sorted(set(int(i) for i in closure) - set(anchors))
    n = len(anchors) + len(rest)
    if n > limit:
        raise ValueError(f"restricted support enumeration refused for |s_bar|={n} > {limit}")
    sigma = anchors + rest
    return [phi(sigma, [int(j) for j in joins], len(anchors)) for joins in valid_join_paths(n, len(anchors))]


def exact_restricted_target(
    anchors: Sequence[int],
    closure: Iterable[int],
    full_cluster_count: int,
    restricted_count: int,
    X,
    model: LikelihoodModel,
    prior: PartitionPrior,
    limit: int = MAX_RESTRICTED_N,
) -> dict[Clustering, float]:
    """Normalised restricted target over its support.

    ``full_cluster_count`` and ``restricted_count`` are the number of blocks of
    the full clustering and of its restriction to the anchors' blocks.
    """
    lm = _BlockCache(X, model)
    support = restricted_support(anchors, closure, limit)
    logp = np.array([
        log_tau1_bar(prior, len(c), full_cluster_count, restricted_count)
        + sum(log_tau2(prior, len(b)) + lm(b) for b in c)
        for c in support
    ])
    p = np.exp(logp - logsumexp(logp))
    return dict(zip(support, p))


def empirical_distribution(samples: Iterable) -> dict:
    counts = Counter(samples)
    n = sum(counts.values())
    return {k: v / n for k, v in counts.items()}


def tv_distance(p: Mapping, q: Mapping) -> float:
    """Total variation distance between two discrete distributions given as mappings."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


# --------------------------------------------------------------------------- metrics


def _entropy(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def v_measure(pred: Sequence[int], true: Sequence[int]) -> float:
    """Harmonic mean of homogeneity and completeness (natural logarithms)."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.size == 0:
        raise ValueError("v_measure of empty labelings")
    if pred.shape != true.shape:
        raise ValueError("label sequences differ in length")
    _, ci = np.unique(true, return_inverse=True)
    _, ki = np.unique(pred, return_inverse=True)
    table = np.zeros((ci.max() + 1, ki.max() + 1))
    np.add.at(table, (ci, ki), 1.0)
    n = table.sum()
    h_c = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    nz = table > 0
    joint = table[nz] / n
    # H(C|K) and H(K|C) from the contingency table
    h_c_given_k = float(-(joint * np.log(table[nz] / table.sum(axis=0)[np.nonzero(nz)[1]])).sum())
    h_k_given_c = float(-(joint * np.log(table[nz] / table.sum(axis=1)[np.nonzero(nz)[0]])).sum())
    hom = 1.0 if h_c == 0 else 1.0 - h_c_given_k / h_c
    com = 1.0 if h_k == 0 else 1.0 - h_k_given_c / h_k
    if hom + com == 0:
        return 0.0
    return 2.0 * hom * com / (hom + com)


@numba.njit(cache=True)
def _log_predictive_matrix(code, params, stats, Y):
    B = stats.shape[0]
    out = np.empty((Y.shape[0], B))
    scratch = np.empty(stats.shape[1])
    for b in range(B):
        for r in range(Y.shape[0]):
            out[r, b] = stat_log_predictive(code, params, stats[b], Y[r], scratch)
    return out


def _sample_log_density(state, prior: PartitionPrior, Y: np.ndarray) -> np.ndarray:
    m = state.model
    slots = state.active_slots()
    sizes = state.sizes[slots]
    empty = np.empty((1, m.stat_size))
    stat_init(m.code, m.params, empty[0])
    stats = np.vstack([state.stats[slots], empty])
    logw = np.array([log_tau2_ratio(prior, int(s)) for s in sizes] + [log_tau1_ratio(prior, slots.size) + log_tau2(prior, 1)])
    logw -= logsumexp(logw)
    lp = _log_predictive_matrix(m.code, m.params, stats, np.ascontiguousarray(Y, dtype=np.float64))
    return logsumexp(lp + logw, axis=1)


def heldout_predictive_loglik(samples: Sequence, heldout: np.ndarray) -> float:
    """Sum over held-out points of the log of the sample-averaged predictive density.

    ``samples`` holds ``(ClusterState, prior)`` pairs; the prior carries the
    concentration value of that sample.
    """
    if len(samples) == 0:
        raise ValueError("need at least one posterior sample")
    Y = np.asarray(heldout, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    dens = np.stack([_sample_log_density(st, pr, Y) for st, pr in samples])
    return float((logsumexp(dens, axis=0) - math.log(len(samples))).sum())


def moving_average(values: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing windowed mean (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# --------------------------------------------------------------------------- data


@dataclass
class LabeledDataset:
    X: np.ndarray
    labels: np.ndarray | None = None
    heldout: np.ndarray | None = None

    @property
    def train_X(self) -> np.ndarray:
        return self.X if self.heldout is None else self.X[~self.heldout]

    @property
    def heldout_X(self) -> np.ndarray:
        return self.X[:0] if self.heldout is None else self.X[self.heldout]

    @property
    def train_labels(self) -> np.ndarray | None:
        if self.labels is None:
            return None
        return self.labels if self.heldout is None else self.labels[~self.heldout]

    def with_heldout(self, fraction: float = 0.1, seed: int = 0) -> "LabeledDataset":
        return LabeledDataset(self.X, self.labels, heldout_mask(len(self.X), fraction, seed))


def heldout_mask(T: int, fraction: float = 0.1, seed: int = 0) -> np.ndarray:
    """Fixed random hold-out mask selecting ``round(fraction * T)`` points."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("held-out fraction must lie in [0, 1)")
    mask = np.zeros(T, dtype=bool)
    k = int(round(fraction * T))
    mask[np.random.default_rng(seed).choice(T, size=k, replace=False)] = True
    return mask


def _balanced_labels(k: int, n: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def gen_gaussian_mixture(k: int, n: int, D: int, separation: float, rng, noise: float = 1.0) -> LabeledDataset:
    """Isotropic Gaussian blobs whose means sit on a centred grid with spacing ``separation * noise``."""
    if k < 1 or n < k:
        raise ValueError("need k >= 1 and n >= k")
    side = math.ceil(k ** (1.0 / D) - 1e-9)
    grid = np.stack(np.meshgrid(*[np.arange(side)] * D, indexing="ij"), -1).reshape(-1, D)[:k].astype(float)
    means = (grid - grid.mean(axis=0)) * separation * noise
    labels = _balanced_labels(k, n, rng)
    X = means[labels] + noise * rng.standard_normal((n, D))
    return LabeledDataset(X, labels)


def gen_bernoulli_mixture(k: int, n: int, D: int, uninformative_fraction: float, rng) -> LabeledDataset:
    """Binary data; a random ``uninformative_fraction`` of dimensions is Bernoulli(0.5) for every cluster."""
    if k < 1 or n < k:
        raise ValueError("need k >= 1 and n >= k")
    if not 0.0 <= uninformative_fraction <= 1.0:
        raise ValueError("uninformative_fraction must lie in [0, 1]")
    theta = rng.uniform(size=(k, D))
    n_un = int(round(uninformative_fraction * D))
    theta[:, rng.choice(D, size=n_un, replace=False)] = 0.5
    labels = _balanced_labels(k, n, rng)
    X = (rng.uniform(size=(n, D)) < theta[labels]).astype(np.float64)
    return LabeledDataset(X, labels)


def load_csv_dataset(path: str | Path, labels_path: str | Path | None = None) -> LabeledDataset:
    """Headerless comma-separated observations, optional sidecar file with one label per line."""
    X = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    labels = None
    if labels_path is not None:
        labels = np.loadtxt(labels_path, dtype=np.int64, ndmin=1)
        if labels.shape[0] != X.shape[0]:
            raise ValueError(f"{labels_path}: {labels.shape[0]} labels for {X.shape[0]} observations")
    return LabeledDataset(X, labels)


def save_csv_dataset(ds: LabeledDataset, path: str | Path, labels_path: str | Path | None = None) -> None:
    np.savetxt(path, ds.X, delimiter=",", fmt="%.17g")
    if labels_path is not None and ds.labels is not None:
        np.savetxt(labels_path, ds.labels, fmt="%d")

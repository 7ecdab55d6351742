"""Particle Gibbs split-merge kernel.

A split-merge sub-problem is defined by anchors ``s`` and their closure
``s_bar`` (union of the blocks containing an anchor).  Observations in the
closure are visited in a random order ``sigma`` whose first ``|s|`` entries
are the anchors.  A particle path records, for each visited observation, the
block it joins; new blocks may only be opened while the anchors are being
placed, so every final block contains an anchor.

Paths are stored as *join vectors*: ``joins[t]`` is the block (numbered by
order of creation) joined by ``sigma[t]``.  For two anchors this encodes the
four allocation states as

    INITIAL      t = 0
    MERGE        both anchors share block 0
    JOIN_FIRST   split, joins the block of sigma[0]
    JOIN_SECOND  split, joins the block of sigma[1]
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, NamedTuple, Sequence

import numba
import numpy as np
from scipy.special import gammaln

from .likelihoods import (
    LikelihoodModel,
    NumericalError,
    stat_add,
    stat_init,
    stat_log_marginal,
)
from .partition import (
    Clustering,
    DirichletProcess,
    FiniteDirichlet,
    PartitionError,
    PartitionPrior,
    PitmanYor,
    prior_code,
)

MAX_ANCHORS = 3


class PathError(ValueError):
    """A particle path or restricted clustering outside the support of the bijection."""


class AllocState(IntEnum):
    INITIAL = 1
    MERGE = 2
    JOIN_FIRST = 3
    JOIN_SECOND = 4


TRANSITIONS = {
    AllocState.INITIAL: (AllocState.MERGE, AllocState.JOIN_SECOND),
    AllocState.MERGE: (AllocState.MERGE,),
    AllocState.JOIN_FIRST: (AllocState.JOIN_FIRST, AllocState.JOIN_SECOND),
    AllocState.JOIN_SECOND: (AllocState.JOIN_FIRST, AllocState.JOIN_SECOND),
}


class GeneralState(NamedTuple):
    """Allocation state for any number of anchors.

    ``partition`` labels the anchors placed so far (restricted growth string)
    and ``block`` is the block joined at this step.
    """

    partition: tuple[int, ...]
    block: int


_TWO_ANCHOR = {
    GeneralState((0,), 0): AllocState.INITIAL,
    GeneralState((0, 0), 0): AllocState.MERGE,
    GeneralState((0, 1), 0): AllocState.JOIN_FIRST,
    GeneralState((0, 1), 1): AllocState.JOIN_SECOND,
}
_TWO_ANCHOR_INV = {v: k for k, v in _TWO_ANCHOR.items()}


@dataclass(frozen=True)
class PGSMConfig:
    num_particles: int = 20
    ess_threshold: float = 0.5
    anneal: bool = True
    num_anchors: int = 2
    early_stop: bool = True
    # test-only mutation hook: multiplies every log incremental weight
    weight_sign: float = 1.0

    def __post_init__(self):
        if self.num_particles < 2:
            raise ValueError("particle Gibbs needs at least 2 particles")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError("relative ESS threshold must lie in [0, 1]")
        if not 2 <= self.num_anchors <= MAX_ANCHORS:
            raise ValueError(f"supported anchor counts are 2..{MAX_ANCHORS}")


# --------------------------------------------------------------------------- paths and the bijection


def sample_permutation(anchors: Sequence[int], closure: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Anchors first (uniformly permuted), then the rest of the closure (uniformly permuted)."""
    anchors = np.asarray(anchors, dtype=np.int64)
    closure = np.asarray(closure, dtype=np.int64)
    rest = np.setdiff1d(closure, anchors, assume_unique=False)
    if rest.size + anchors.size != np.unique(closure).size:
        raise PartitionError("anchors must be contained in the closure")
    return np.concatenate([rng.permutation(anchors), rng.permutation(rest)])


def states_from_joins(joins: Sequence[int], n_anchors: int) -> list:
    """Translate a join vector to allocation states (``AllocState`` when two anchors are used)."""
    out = []
    part: list[int] = []
    for t, j in enumerate(joins):
        if t < n_anchors:
            part.append(int(j))
        out.append(GeneralState(tuple(part), int(j)))
    if n_anchors == 2:
        return [_TWO_ANCHOR[s] for s in out]
    return out


def joins_from_states(path: Sequence, n_anchors: int) -> np.ndarray:
    """Inverse of :func:`states_from_joins`; raises :class:`PathError` on invalid transitions."""
    states = []
    for x in path:
        if isinstance(x, AllocState):
            x = _TWO_ANCHOR_INV[x]
        states.append(GeneralState(tuple(x[0]), int(x[1])))
    if not states:
        raise PathError("empty path")
    joins = np.empty(len(states), dtype=np.int64)
    n_blocks = 0
    for t, st in enumerate(states):
        if t < n_anchors:
            if len(st.partition) != t + 1 or (t > 0 and st.partition[:-1] != states[t - 1].partition):
                raise PathError(f"step {t}: anchor partition does not extend the previous one")
            j = st.partition[-1]
            if j > n_blocks or st.block != j:
                raise PathError(f"step {t}: invalid anchor allocation {st}")
        else:
            if st.partition != states[t - 1].partition:
                raise PathError(f"step {t}: anchor partition changed after the anchors were placed")
            j = st.block
            if not 0 <= j < n_blocks:
                raise PathError(f"step {t}: block {j} does not exist")
        n_blocks = max(n_blocks, j + 1)
        joins[t] = j
    if joins[0] != 0:
        raise PathError("paths must start in the initial state")
    return joins


def check_joins(joins: Sequence[int], n_anchors: int) -> None:
    n_blocks = 0
    for t, j in enumerate(joins):
        limit = n_blocks + 1 if t < n_anchors else n_blocks
        if not 0 <= j < limit:
            raise PathError(f"step {t}: join {j} not allowed with {n_blocks} blocks")
        n_blocks = max(n_blocks, j + 1)


def phi(sigma: Sequence[int], path: Sequence, n_anchors: int = 2) -> Clustering:
    """Map a valid particle path to the restricted clustering it encodes."""
    if len(path) and isinstance(path[0], (int, np.integer)) and not isinstance(path[0], AllocState):
        joins = np.asarray(path, dtype=np.int64)
        check_joins(joins, n_anchors)
    else:
        joins = joins_from_states(path, n_anchors)
    sigma = list(sigma)[: len(joins)]
    blocks: dict[int, list[int]] = {}
    for i, j in zip(sigma, joins):
        blocks.setdefault(int(j), []).append(int(i))
    return Clustering(blocks.values())


def joins_of(sigma: Sequence[int], c_bar: Clustering, n_anchors: int = 2) -> np.ndarray:
    """Join vector of ``c_bar`` under ordering ``sigma``; inverse of :func:`phi` on join vectors."""
    sigma = [int(i) for i in sigma]
    if set(sigma) != set(c_bar.indices):
        raise PathError("sigma must enumerate exactly the indices of the restricted clustering")
    seen: dict[int, int] = {}
    joins = np.empty(len(sigma), dtype=np.int64)
    for t, i in enumerate(sigma):
        b = c_bar.block_index(i)
        if b not in seen:
            if t >= n_anchors:
                raise PathError(f"block {c_bar.blocks[b]} contains no anchor")
            seen[b] = len(seen)
        joins[t] = seen[b]
    return joins


def phi_inverse(sigma: Sequence[int], c_bar: Clustering, n_anchors: int = 2) -> list:
    """Particle path (list of allocation states) encoding ``c_bar``."""
    return states_from_joins(joins_of(sigma, c_bar, n_anchors), n_anchors)


def valid_join_paths(n: int, n_anchors: int = 2) -> Iterator[np.ndarray]:
    """Every valid join vector of length ``n`` (the support of the path space)."""
    joins = np.zeros(n, dtype=np.int64)

    def rec(t: int, k: int):
        if t == n:
            yield joins.copy()
            return
        limit = k + 1 if t < n_anchors else k
        for j in range(limit):
            joins[t] = j
            yield from rec(t + 1, max(k, j + 1))

    if n == 0:
        return
    yield from rec(1, 1)


# --------------------------------------------------------------------------- compiled kernels


@numba.njit(cache=True)
def _log_tau2_ratio(pcode, p1, p2, j):
    if pcode == 0:
        return math.log(j)
    elif pcode == 1:
        return math.log(j - p2)
    return math.log(j + p1)


@numba.njit(cache=True)
def _log_tau2_one(pcode, p1, p2):
    # tau2(1): 1 for DP and Pitman-Yor, delta for the finite Dirichlet
    if pcode == 2:
        return math.log(p1)
    return 0.0


@numba.njit(cache=True)
def relative_ess(w):
    """``1 / (N * sum w^2)`` for normalised weights ``w``."""
    s = 0.0
    for k in range(w.shape[0]):
        s += w[k] * w[k]
    if not s > 0.0:
        raise NumericalError("relative ESS undefined for all-zero weights")
    return 1.0 / (w.shape[0] * s)


@numba.njit(cache=True)
def _normalize(logw, out):
    mx = -np.inf
    for k in range(logw.shape[0]):
        if logw[k] > mx:
            mx = logw[k]
    if mx == -np.inf:
        raise NumericalError("all particle weights are zero")
    total = 0.0
    for k in range(logw.shape[0]):
        out[k] = math.exp(logw[k] - mx)
        total += out[k]
    for k in range(logw.shape[0]):
        out[k] /= total
    return mx + math.log(total)


@numba.njit(cache=True)
def _categorical(w, u):
    acc = 0.0
    last = 0
    for k in range(w.shape[0]):
        if w[k] > 0.0:
            last = k
            acc += w[k]
            if u < acc:
                return k
    return last


@numba.njit(cache=True)
def conditional_multinomial_resample(w, rng):
    """Ancestor indices for all particles; particle 0 carries the conditioning path and keeps itself."""
    N = w.shape[0]
    A = np.empty(N, dtype=np.int64)
    A[0] = 0
    for p in range(1, N):
        A[p] = _categorical(w, rng.random())
    return A


@numba.njit(cache=True)
def multinomial_resample(w, rng):
    N = w.shape[0]
    A = np.empty(N, dtype=np.int64)
    for p in range(N):
        A[p] = _categorical(w, rng.random())
    return A


@numba.njit(cache=True)
def _extend(
    p, t, x, S, nblk, sizes, stats, lm, lg, lg_s, acode, lastj,
    log_tau1bar, pcode, p1, p2, anneal, drho, code, params,
    trial, trial_lm, delta, ratio, forced, rng,
):
    """Propose the next allocation of particle ``p`` and return ``(choice, log incremental weight)``.

    The proposal is proportional to the one-step target ratio over allowed
    successors, so the incremental weight is the sum of those ratios and does
    not depend on the successor drawn.
    """
    k = nblk[p]
    n_succ = k + 1 if t < S else k
    ss = stats.shape[2]
    for j in range(n_succ):
        if j < k:
            for q in range(ss):
                trial[j, q] = stats[p, j, q]
            stat_add(code, params, trial[j], x)
            lnew = stat_log_marginal(code, params, trial[j])
            delta[j] = _log_tau2_ratio(pcode, p1, p2, sizes[p, j]) + lnew - lm[p, j]
        else:
            stat_init(code, params, trial[j])
            stat_add(code, params, trial[j], x)
            lnew = stat_log_marginal(code, params, trial[j])
            delta[j] = log_tau1bar[k + 1] - log_tau1bar[k] + _log_tau2_one(pcode, p1, p2) + lnew
        trial_lm[j] = lnew
        if anneal:
            if t < S:
                ratio[j] = 0.0 if lg[p] + delta[j] > -np.inf else -np.inf
            else:
                ratio[j] = drho * lg_s[p] + delta[j]
        else:
            ratio[j] = delta[j]
    mx = -np.inf
    for j in range(n_succ):
        if ratio[j] > mx:
            mx = ratio[j]
    total = 0.0
    if mx > -np.inf:
        for j in range(n_succ):
            total += math.exp(ratio[j] - mx)
        log_inc = mx + math.log(total)
    else:
        log_inc = -np.inf
    if forced >= 0:
        choice = forced
    elif mx == -np.inf:
        choice = 0
    else:
        u = rng.random() * total
        acc = 0.0
        choice = n_succ - 1
        for j in range(n_succ):
            acc += math.exp(ratio[j] - mx)
            if u < acc:
                choice = j
                break
    for q in range(ss):
        stats[p, choice, q] = trial[choice, q]
    lm[p, choice] = trial_lm[choice]
    sizes[p, choice] += 1
    if choice == k:
        nblk[p] = k + 1
    lg[p] += delta[choice]
    if t < S:
        acode[p] = acode[p] * (S + 1) + choice
    if t == S - 1:
        lg_s[p] = lg[p]
    lastj[p] = choice
    return choice, log_inc


@numba.njit(cache=True)
def _init_particles(Xs, S, N, log_tau1bar, pcode, p1, p2, code, params, ss):
    nblk = np.ones(N, dtype=np.int64)
    sizes = np.zeros((N, S), dtype=np.int64)
    stats = np.zeros((N, S, ss))
    lm = np.zeros((N, S))
    lg = np.zeros(N)
    lg_s = np.zeros(N)
    acode = np.zeros(N, dtype=np.int64)
    lastj = np.zeros(N, dtype=np.int64)
    first = np.empty(ss)
    stat_init(code, params, first)
    stat_add(code, params, first, Xs[0])
    l0 = stat_log_marginal(code, params, first)
    g0 = log_tau1bar[1] + _log_tau2_one(pcode, p1, p2) + l0
    for p in range(N):
        stats[p, 0] = first
        lm[p, 0] = l0
        sizes[p, 0] = 1
        lg[p] = g0
    return nblk, sizes, stats, lm, lg, lg_s, acode, lastj


@numba.njit(cache=True)
def _count_live(acode, lastj):
    N = acode.shape[0]
    live = 0
    for p in range(N):
        dup = False
        for q in range(p):
            if acode[q] == acode[p] and lastj[q] == lastj[p]:
                dup = True
                break
        if not dup:
            live += 1
    return live


@numba.njit(cache=True)
def _smc(
    Xs, S, cond, conditional, log_tau1bar, pcode, p1, p2, N, threshold, anneal,
    code, params, rng, weight_sign, early_stop,
):
    n = Xs.shape[0]
    ss = _stat_size(code, params)
    nblk, sizes, stats, lm, lg, lg_s, acode, lastj = _init_particles(
        Xs, S, N, log_tau1bar, pcode, p1, p2, code, params, ss
    )
    drho = 1.0 / (n - S) if (anneal and n > S) else 0.0
    log_z = 0.0 if anneal else lg[0]
    logw = np.zeros(N)
    W = np.empty(N)
    parents = np.zeros((n, N), dtype=np.int64)
    choices = np.zeros((n, N), dtype=np.int64)
    ess_hist = np.ones(n)
    resampled = np.zeros(n, dtype=np.bool_)
    live = np.ones(n, dtype=np.int64)
    trial = np.empty((S + 1, ss))
    trial_lm = np.empty(S + 1)
    delta = np.empty(S + 1)
    ratio = np.empty(S + 1)
    last_t = n - 1
    for t in range(1, n):
        lse = _normalize(logw, W)
        ess = relative_ess(W)
        ess_hist[t] = ess
        live[t] = _count_live(acode, lastj)
        if threshold >= 1.0 or ess < threshold:
            resampled[t] = True
            log_z += lse - math.log(N)
            if conditional:
                A = conditional_multinomial_resample(W, rng)
            else:
                A = multinomial_resample(W, rng)
            nblk = nblk[A]
            sizes = sizes[A]
            stats = stats[A]
            lm = lm[A]
            lg = lg[A]
            lg_s = lg_s[A]
            acode = acode[A]
            lastj = lastj[A]
            logw[:] = 0.0
            parents[t] = A
        else:
            for p in range(N):
                parents[t, p] = p
        x = Xs[t]
        for p in range(N):
            forced = cond[t] if (conditional and p == 0) else -1
            choice, inc = _extend(
                p, t, x, S, nblk, sizes, stats, lm, lg, lg_s, acode, lastj,
                log_tau1bar, pcode, p1, p2, anneal, drho, code, params,
                trial, trial_lm, delta, ratio, forced, rng,
            )
            choices[t, p] = choice
            logw[p] += weight_sign * inc
        if conditional and early_stop and t >= S - 1 and t < n - 1:
            merged = True
            for p in range(N):
                if nblk[p] != 1:
                    merged = False
                    break
            if merged:
                last_t = t
                break
    lse = _normalize(logw, W)
    log_z += lse - math.log(N)
    k = _categorical(W, rng.random())
    path = np.zeros(n, dtype=np.int64)
    kk = k
    for t in range(last_t, 0, -1):
        path[t] = choices[t, kk]
        kk = parents[t, kk]
    out_stats = stats[k].copy()
    out_sizes = sizes[k].copy()
    out_nblk = nblk[k]
    if last_t < n - 1:
        # every particle is in the merge-absorbing state: the rest is forced
        for t in range(last_t + 1, n):
            stat_add(code, params, out_stats[0], Xs[t])
            out_sizes[0] += 1
        log_z = np.nan
    return path, out_stats, out_sizes, out_nblk, log_z, ess_hist, resampled, live, last_t


@numba.njit(cache=True)
def _stat_size(code, params):
    if code == 0:
        D = int(params[0])
        return 1 + D + D * D
    elif code == 1:
        return 1 + int(params[0])
    return int(params[0])


@numba.njit(cache=True)
def rgs_codes(labels):
    """Relabel by order of first appearance."""
    n = labels.shape[0]
    out = np.empty(n, dtype=np.int64)
    keys = np.empty(n, dtype=np.int64)
    vals = np.empty(n, dtype=np.int64)
    m = 0
    for t in range(n):
        lab = labels[t]
        found = -1
        for q in range(m):
            if keys[q] == lab:
                found = vals[q]
                break
        if found < 0:
            keys[m] = lab
            vals[m] = m
            found = m
            m += 1
        out[t] = found
    return out


@numba.njit(cache=True)
def _shuffle(a, rng):
    for k in range(a.shape[0] - 1, 0, -1):
        j = int(rng.random() * (k + 1))
        tmp = a[k]
        a[k] = a[j]
        a[j] = tmp


@numba.njit(cache=True)
def _restricted_chain(
    Xc, anchor_pos, labels, S, log_tau1bar, pcode, p1, p2, N, threshold, anneal, code, params,
    n_steps, rng, weight_sign, early_stop,
):
    n = Xc.shape[0]
    is_anchor = np.zeros(n, dtype=np.bool_)
    for a in anchor_pos:
        is_anchor[a] = True
    rest = np.empty(n - S, dtype=np.int64)
    r = 0
    for i in range(n):
        if not is_anchor[i]:
            rest[r] = i
            r += 1
    sigma = np.empty(n, dtype=np.int64)
    Xs = np.empty_like(Xc)
    out = np.empty((n_steps, n), dtype=np.int64)
    anchors = anchor_pos.copy()
    for step in range(n_steps):
        _shuffle(anchors, rng)
        _shuffle(rest, rng)
        for t in range(S):
            sigma[t] = anchors[t]
        for t in range(n - S):
            sigma[S + t] = rest[t]
        for t in range(n):
            Xs[t] = Xc[sigma[t]]
        cond = rgs_codes(labels[sigma])
        res = _smc(Xs, S, cond, True, log_tau1bar, pcode, p1, p2, N, threshold, anneal, code, params, rng,
                   weight_sign, early_stop)
        path = res[0]
        for t in range(n):
            labels[sigma[t]] = path[t]
        out[step] = rgs_codes(labels)
    return out


# --------------------------------------------------------------------------- Python layer


def _log_tau1_closed(prior: PartitionPrior, j: int) -> float:
    if j < 0:
        return -math.inf
    if isinstance(prior, DirichletProcess):
        return j * math.log(prior.alpha)
    if isinstance(prior, PitmanYor):
        a, d = prior.alpha, prior.discount
        if d == 0.0:
            return j * math.log(a)
        if a > 0:
            return float(j * math.log(d) + gammaln(a / d + j) - gammaln(a / d))
        return float(sum(math.log(a + d * k) for k in range(j)))
    if isinstance(prior, FiniteDirichlet):
        if j > prior.K:
            return -math.inf
        return float(gammaln(prior.K + 1) - gammaln(prior.K - j + 1))
    raise TypeError(f"unknown partition prior {prior!r}")


def tau1_bar_table(prior: PartitionPrior, n_anchors: int, full_cluster_count: int, restricted_count: int) -> np.ndarray:
    """``table[j] = log tau1(j + C - |c_bar|)`` for ``j = 1..|s|`` (index 0 unused)."""
    out = np.full(n_anchors + 1, -np.inf)
    for j in range(1, n_anchors + 1):
        out[j] = _log_tau1_closed(prior, j + full_cluster_count - restricted_count)
    return out


@dataclass
class RestrictedProblem:
    """Everything the kernel needs about one split-merge sub-problem."""

    sigma: np.ndarray
    n_anchors: int
    Xs: np.ndarray
    log_tau1bar: np.ndarray
    model: LikelihoodModel
    prior: PartitionPrior

    @classmethod
    def build(cls, X, sigma, n_anchors, full_cluster_count, restricted_count, model, prior):
        sigma = np.asarray(sigma, dtype=np.int64)
        Xs = np.ascontiguousarray(np.asarray(X, dtype=np.float64)[sigma])
        table = tau1_bar_table(prior, n_anchors, full_cluster_count, restricted_count)
        return cls(sigma, int(n_anchors), Xs, table, model, prior)

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    def anneal_for(self, anneal: bool) -> bool:
        # with n == |s| there is no tempering stage; the plain targets are used
        return bool(anneal and self.n > self.n_anchors)


@dataclass
class SMCResult:
    joins: np.ndarray
    block_stats: np.ndarray
    block_sizes: np.ndarray
    num_blocks: int
    log_normalizer: float
    ess: np.ndarray
    resampled: np.ndarray
    live_states: np.ndarray
    last_generation: int


def run_smc(
    problem: RestrictedProblem,
    num_particles: int,
    ess_threshold: float,
    anneal: bool,
    rng: np.random.Generator,
    conditional_joins: np.ndarray | None = None,
    early_stop: bool = True,
    weight_sign: float = 1.0,
) -> SMCResult:
    """Run (conditional) SMC over allocation paths of one sub-problem.

    With ``conditional_joins`` particle 0 follows that path (particle Gibbs);
    otherwise every particle is free and ``log_normalizer`` estimates
    ``log sum_c gamma_n(c)``.
    """
    pcode, p1, p2 = prior_code(problem.prior)
    conditional = conditional_joins is not None
    cond = np.asarray(conditional_joins, dtype=np.int64) if conditional else np.zeros(problem.n, dtype=np.int64)
    m = problem.model
    out = _smc(
        problem.Xs, problem.n_anchors, cond, conditional, problem.log_tau1bar, pcode, p1, p2,
        int(num_particles), float(ess_threshold), problem.anneal_for(anneal), m.code, m.params, rng,
        float(weight_sign), bool(early_stop and conditional),
    )
    path, stats, sizes, nblk, log_z, ess, resampled, live, last_t = out
    return SMCResult(path, stats, sizes, int(nblk), float(log_z), ess, resampled, live, int(last_t))


def estimate_log_normalizer(problem: RestrictedProblem, num_particles: int, ess_threshold: float, anneal: bool, rng) -> float:
    """Unconditional SMC estimate of ``log sum gamma_n`` over the restricted support."""
    return run_smc(problem, num_particles, ess_threshold, anneal, rng).log_normalizer


# ------------------------------------------------------------------ single-particle interface


@dataclass
class Particle:
    """One particle; arrays carry a leading axis of length one so the compiled step can be reused."""

    joins: list[int]
    nblk: np.ndarray
    sizes: np.ndarray
    stats: np.ndarray
    lm: np.ndarray
    lg: np.ndarray
    lg_s: np.ndarray
    acode: np.ndarray
    lastj: np.ndarray
    log_weight: float = 0.0

    @property
    def t(self) -> int:
        return len(self.joins)

    @property
    def log_gamma(self) -> float:
        return float(self.lg[0])

    @property
    def num_blocks(self) -> int:
        return int(self.nblk[0])

    def states(self, n_anchors: int) -> list:
        return states_from_joins(self.joins, n_anchors)

    def copy(self) -> "Particle":
        return Particle(
            list(self.joins), *(a.copy() for a in (self.nblk, self.sizes, self.stats, self.lm, self.lg, self.lg_s, self.acode, self.lastj)),
            log_weight=self.log_weight,
        )


def initial_particle(problem: RestrictedProblem) -> Particle:
    pcode, p1, p2 = prior_code(problem.prior)
    m = problem.model
    arrays = _init_particles(problem.Xs, problem.n_anchors, 1, problem.log_tau1bar, pcode, p1, p2, m.code, m.params, m.stat_size)
    return Particle([0], *arrays)


def log_gamma(particle: Particle) -> float:
    """Cached log intermediate target of the particle's current prefix (no recomputation)."""
    return particle.log_gamma


def annealed_log_gamma(particle: Particle, n: int, n_anchors: int) -> float:
    """Log of the tempered intermediate target for the particle's prefix.

    Indicator of the support while anchors are placed, then
    ``rho_t * log gamma_|s| + log gamma_t - log gamma_|s|`` with
    ``rho_t = (t - |s|) / (n - |s|)``, which equals ``log gamma_n`` at ``t = n``.
    """
    t = particle.t
    lg = float(particle.lg[0])
    if t <= n_anchors or n == n_anchors:
        if t < n:
            return 0.0 if lg > -math.inf else -math.inf
        return lg
    lg_s = float(particle.lg_s[0])
    rho = (t - n_anchors) / (n - n_anchors)
    return rho * lg_s + (lg - lg_s)


def successors(particle: Particle, n_anchors: int) -> list[int]:
    k = particle.num_blocks
    return list(range(k + 1 if particle.t < n_anchors else k))


def propose_and_weight(
    particle: Particle,
    problem: RestrictedProblem,
    anneal: bool,
    rng: np.random.Generator,
    forced: int | None = None,
):
    """Extend ``particle`` in place by one allocation.

    Returns ``(next state, log incremental weight)``; the state is an
    :class:`AllocState` for two anchors and a :class:`GeneralState` otherwise.
    """
    t = particle.t
    if t >= problem.n:
        raise PathError("particle already covers the whole closure")
    pcode, p1, p2 = prior_code(problem.prior)
    m = problem.model
    S = problem.n_anchors
    anneal = problem.anneal_for(anneal)
    drho = 1.0 / (problem.n - S) if anneal else 0.0
    ss = m.stat_size
    choice, log_inc = _extend(
        0, t, problem.Xs[t], S, particle.nblk, particle.sizes, particle.stats, particle.lm, particle.lg,
        particle.lg_s, particle.acode, particle.lastj, problem.log_tau1bar, pcode, p1, p2, anneal, drho,
        m.code, m.params, np.empty((S + 1, ss)), np.empty(S + 1), np.empty(S + 1), np.empty(S + 1),
        -1 if forced is None else int(forced), rng,
    )
    particle.joins.append(int(choice))
    particle.log_weight += log_inc
    return states_from_joins(particle.joins, S)[-1], float(log_inc)


# --------------------------------------------------------------------------- kernel entry points


def pgsm_step(
    X: np.ndarray,
    c_bar: Clustering,
    anchors: Sequence[int],
    full_cluster_count: int,
    model: LikelihoodModel,
    prior: PartitionPrior,
    config: PGSMConfig,
    rng: np.random.Generator,
    return_result: bool = False,
):
    """One particle Gibbs update of the restricted clustering ``c_bar``.

    Leaves the restricted target invariant.  ``c_bar`` must have an anchor in
    every block; ``X`` is indexed by the original observation indices.
    """
    anchors = [int(a) for a in anchors]
    if len(anchors) != config.num_anchors:
        raise ValueError(f"config expects {config.num_anchors} anchors, got {len(anchors)}")
    if len(set(anchors)) != len(anchors):
        raise PartitionError("anchors must be distinct")
    closure = sorted(c_bar.indices)
    sigma = sample_permutation(anchors, closure, rng)
    cond = joins_of(sigma, c_bar, config.num_anchors)
    problem = RestrictedProblem.build(X, sigma, config.num_anchors, full_cluster_count, len(c_bar), model, prior)
    res = run_smc(
        problem, config.num_particles, config.ess_threshold, config.anneal, rng,
        conditional_joins=cond, early_stop=config.early_stop, weight_sign=config.weight_sign,
    )
    blocks: dict[int, list[int]] = {}
    for i, j in zip(sigma, res.joins):
        blocks.setdefault(int(j), []).append(int(i))
    out = Clustering(blocks.values())
    if return_result:
        return out, res
    return out


@dataclass
class MoveInfo:
    anchors: np.ndarray
    closure_size: int
    changed: bool
    result: SMCResult | None = field(default=None, repr=False)


def split_merge_move(state, prior: PartitionPrior, anchor_proposal, config: PGSMConfig, rng: np.random.Generator) -> MoveInfo:
    """Draw anchors, run the particle Gibbs kernel on their closure, write the result back.

    ``state`` is a :class:`~pgsm.state.ClusterState` updated in place; blocks
    without an anchor are untouched.
    """
    anchors = np.asarray(anchor_proposal.sample(state, rng), dtype=np.int64)
    S = anchors.size
    if S != config.num_anchors:
        raise ValueError(f"anchor proposal returned {S} anchors, config expects {config.num_anchors}")
    labels = state.labels
    slots = np.unique(labels[anchors])
    closure = np.flatnonzero(np.isin(labels, slots))
    sigma = np.concatenate([rng.permutation(anchors), rng.permutation(np.setdiff1d(closure, anchors))])
    cond = rgs_codes(labels[sigma])
    problem = RestrictedProblem.build(state.X, sigma, S, state.num_clusters, slots.size, state.model, prior)
    res = run_smc(
        problem, config.num_particles, config.ess_threshold, config.anneal, rng,
        conditional_joins=cond, early_stop=config.early_stop, weight_sign=config.weight_sign,
    )
    changed = not np.array_equal(res.joins, cond)
    if changed:
        state.remove_blocks(slots)
        state.ensure_free(res.num_blocks)
        for j in range(res.num_blocks):
            state.add_block(sigma[res.joins == j], res.block_stats[j])
    return MoveInfo(anchors, int(closure.size), changed, res)


def iterate_pgsm_step(
    X: np.ndarray,
    c_bar: Clustering,
    anchors: Sequence[int],
    full_cluster_count: int,
    model: LikelihoodModel,
    prior: PartitionPrior,
    config: PGSMConfig,
    n_steps: int,
    rng: np.random.Generator,
) -> tuple[list[int], np.ndarray]:
    """Apply the particle Gibbs kernel ``n_steps`` times to ``c_bar`` in compiled code.

    Same kernel as repeated :func:`pgsm_step` calls.  Returns the closure
    indices (sorted) and an ``(n_steps, |s_bar|)`` array of canonical labels of
    the successive restricted clusterings, aligned with those indices.
    """
    closure = sorted(c_bar.indices)
    where = {i: k for k, i in enumerate(closure)}
    anchors = [int(a) for a in anchors]
    if len(set(anchors)) != len(anchors) or len(anchors) != config.num_anchors:
        raise PartitionError("need distinct anchors matching the configured anchor count")
    anchor_pos = np.array([where[a] for a in anchors], dtype=np.int64)
    labels = np.array([c_bar.block_index(i) for i in closure], dtype=np.int64)
    joins_of(list(anchors) + [i for i in closure if i not in set(anchors)], c_bar, config.num_anchors)
    Xc = np.ascontiguousarray(np.asarray(X, dtype=np.float64)[closure])
    S = config.num_anchors
    table = tau1_bar_table(prior, S, full_cluster_count, len(c_bar))
    pcode, p1, p2 = prior_code(prior)
    anneal = bool(config.anneal and len(closure) > S)
    out = _restricted_chain(
        Xc, anchor_pos, labels, S, table, pcode, p1, p2, config.num_particles, float(config.ess_threshold),
        anneal, model.code, model.params, int(n_steps), rng, float(config.weight_sign), bool(config.early_stop),
    )
    return closure, out

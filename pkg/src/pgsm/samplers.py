"""Baseline kernels (collapsed Gibbs, SAMS, concentration updates) and the chain driver."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numba
import numpy as np

from .anchors import make_proposal
from .core import PGSMConfig, split_merge_move
from .likelihoods import stat_add, stat_init, stat_log_marginal, stat_remove
from .partition import (
    DirichletProcess,
    PartitionPrior,
    PitmanYor,
    log_tau1_ratio,
    log_tau2,
    prior_code,
    with_alpha,
)
from .state import ClusterState, close_slot, open_slot

KERNELS = ("pgsm", "sams", "gibbs", "alpha")


# --------------------------------------------------------------------------- collapsed Gibbs


@numba.njit(cache=True)
def _log_tau1_ratio(pcode, p1, p2, C):
    if pcode == 0:
        return math.log(p1)
    elif pcode == 1:
        return math.log(p1 + p2 * C)
    if C < p2:
        return math.log(p2 - C)
    return -np.inf


@numba.njit(cache=True)
def _log_tau2_ratio(pcode, p1, p2, j):
    if pcode == 0:
        return math.log(j)
    elif pcode == 1:
        return math.log(j - p2)
    return math.log(j + p1)


@numba.njit(cache=True)
def _log_tau2_one(pcode, p1, p2):
    if pcode == 2:
        return math.log(p1)
    return 0.0


@numba.njit(cache=True)
def _gibbs_sweep(X, labels, stats, sizes, lm, active, pos, free, counts, code, params, pcode, p1, p2, start, rng):
    """Sweep points ``start..T-1``; returns the index where it stopped (``T`` when complete).

    Stops early, with the state consistent, when no free slot is left for a
    potential new block; the caller grows storage and resumes.
    """
    T = X.shape[0]
    ss = stats.shape[1]
    cap = stats.shape[0]
    logw = np.empty(cap + 1)
    trial = np.empty(ss)
    fresh = np.empty(ss)
    stat_init(code, params, fresh)
    lfresh0 = stat_log_marginal(code, params, fresh)
    for i in range(start, T):
        if counts[1] == 0 and sizes[labels[i]] > 1:
            return i
        x = X[i]
        s = labels[i]
        if sizes[s] == 1:
            close_slot(s, active, pos, free, counts)
            sizes[s] = 0
        else:
            stat_remove(code, params, stats[s], x)
            sizes[s] -= 1
            lm[s] = stat_log_marginal(code, params, stats[s])
        C = counts[0]
        mx = -np.inf
        for k in range(C):
            b = active[k]
            for q in range(ss):
                trial[q] = stats[b, q]
            stat_add(code, params, trial, x)
            logw[k] = _log_tau2_ratio(pcode, p1, p2, sizes[b]) + stat_log_marginal(code, params, trial) - lm[b]
            if logw[k] > mx:
                mx = logw[k]
        for q in range(ss):
            trial[q] = fresh[q]
        stat_add(code, params, trial, x)
        logw[C] = _log_tau1_ratio(pcode, p1, p2, C) + _log_tau2_one(pcode, p1, p2) + stat_log_marginal(code, params, trial) - lfresh0
        if logw[C] > mx:
            mx = logw[C]
        total = 0.0
        for k in range(C + 1):
            logw[k] = math.exp(logw[k] - mx)
            total += logw[k]
        u = rng.random() * total
        choice = C
        acc = 0.0
        for k in range(C + 1):
            acc += logw[k]
            if u < acc:
                choice = k
                break
        if choice == C:
            b = open_slot(active, pos, free, counts)
            stat_init(code, params, stats[b])
        else:
            b = active[choice]
        stat_add(code, params, stats[b], x)
        sizes[b] += 1
        lm[b] = stat_log_marginal(code, params, stats[b])
        labels[i] = b
    return T


def gibbs_sweep(state: ClusterState, prior: PartitionPrior, rng: np.random.Generator) -> ClusterState:
    """One systematic-scan collapsed Gibbs sweep over all observations, in place."""
    pcode, p1, p2 = prior_code(prior)
    m = state.model
    i = 0
    while i < state.T:
        i = _gibbs_sweep(
            state.X, state.labels, state.stats, state.sizes, state.lm, state.active, state.pos, state.free,
            state.counts, m.code, m.params, pcode, p1, p2, i, rng,
        )
        if i < state.T:
            state.ensure_free(1)
    return state


# --------------------------------------------------------------------------- SAMS


@numba.njit(cache=True)
def _sequential_allocation(X, order, ai, aj, forced, code, params, pcode, p1, p2, rng):
    """Allocate ``order`` between blocks seeded by ``ai`` and ``aj``.

    ``forced`` (same length as ``order``, values 0/1) replays a fixed split
    instead of sampling.  Returns ``(assignment, log q, stat_i, stat_j)``.
    """
    ss = 0
    if code == 0:
        D = int(params[0])
        ss = 1 + D + D * D
    elif code == 1:
        ss = 1 + int(params[0])
    else:
        ss = int(params[0])
    st = np.empty((2, ss))
    lmb = np.empty(2)
    size = np.ones(2, dtype=np.int64)
    stat_init(code, params, st[0])
    stat_add(code, params, st[0], X[ai])
    stat_init(code, params, st[1])
    stat_add(code, params, st[1], X[aj])
    lmb[0] = stat_log_marginal(code, params, st[0])
    lmb[1] = stat_log_marginal(code, params, st[1])
    trial = np.empty((2, ss))
    lnew = np.empty(2)
    w = np.empty(2)
    assign = np.empty(order.shape[0], dtype=np.int64)
    log_q = 0.0
    for t in range(order.shape[0]):
        x = X[order[t]]
        for k in range(2):
            for q in range(ss):
                trial[k, q] = st[k, q]
            stat_add(code, params, trial[k], x)
            lnew[k] = stat_log_marginal(code, params, trial[k])
            w[k] = _log_tau2_ratio(pcode, p1, p2, size[k]) + lnew[k] - lmb[k]
        mx = max(w[0], w[1])
        lse = mx + math.log(math.exp(w[0] - mx) + math.exp(w[1] - mx))
        if forced.shape[0] > 0:
            k = forced[t]
        else:
            k = 0 if rng.random() < math.exp(w[0] - lse) else 1
        log_q += w[k] - lse
        for q in range(ss):
            st[k, q] = trial[k, q]
        lmb[k] = lnew[k]
        size[k] += 1
        assign[t] = k
    return assign, log_q, st[0].copy(), st[1].copy()


@dataclass
class SAMSInfo:
    anchors: np.ndarray
    proposal: str
    log_accept: float
    accepted: bool


def sams_move(state: ClusterState, prior: PartitionPrior, anchor_proposal, rng: np.random.Generator) -> SAMSInfo:
    """Sequentially-allocated merge-split Metropolis-Hastings move, in place."""
    anchors = np.asarray(anchor_proposal.sample(state, rng), dtype=np.int64)
    if anchors.size != 2:
        raise ValueError("SAMS uses exactly two anchors")
    ai, aj = int(anchors[0]), int(anchors[1])
    m = state.model
    pcode, p1, p2 = prior_code(prior)
    si, sj = int(state.labels[ai]), int(state.labels[aj])
    C = state.num_clusters
    empty = np.zeros(0, dtype=np.int64)
    if si == sj:
        members = state.members(si)
        order = rng.permutation(members[(members != ai) & (members != aj)])
        assign, log_q, st_i, st_j = _sequential_allocation(state.X, order, ai, aj, empty, m.code, m.params, pcode, p1, p2, rng)
        n_i = 1 + int((assign == 0).sum())
        n_j = 1 + int((assign == 1).sum())
        lm_i = stat_log_marginal(m.code, m.params, st_i)
        lm_j = stat_log_marginal(m.code, m.params, st_j)
        log_ratio = (
            log_tau1_ratio(prior, C)
            + log_tau2(prior, n_i) + log_tau2(prior, n_j) - log_tau2(prior, n_i + n_j)
            + lm_i + lm_j - state.lm[si]
        )
        log_a = log_ratio - log_q
        accepted = math.log(rng.random()) < log_a
        if accepted:
            state.remove_blocks([si])
            state.ensure_free(2)
            state.add_block(np.concatenate([[ai], order[assign == 0]]), st_i)
            state.add_block(np.concatenate([[aj], order[assign == 1]]), st_j)
        return SAMSInfo(anchors, "split", float(log_a), bool(accepted))
    mem_i, mem_j = state.members(si), state.members(sj)
    rest = np.concatenate([mem_i[mem_i != ai], mem_j[mem_j != aj]])
    perm = rng.permutation(rest.size)
    order = rest[perm]
    forced = np.concatenate([np.zeros(mem_i.size - 1, np.int64), np.ones(mem_j.size - 1, np.int64)])[perm]
    _, log_q_rev, _, _ = _sequential_allocation(state.X, order, ai, aj, forced, m.code, m.params, pcode, p1, p2, rng)
    merged_idx = np.concatenate([mem_i, mem_j])
    merged = state.stats[si].copy()
    for k in mem_j:
        stat_add(m.code, m.params, merged, state.X[k])
    lm_merged = stat_log_marginal(m.code, m.params, merged)
    n_i, n_j = mem_i.size, mem_j.size
    log_ratio = (
        -log_tau1_ratio(prior, C - 1)
        + log_tau2(prior, n_i + n_j) - log_tau2(prior, n_i) - log_tau2(prior, n_j)
        + lm_merged - state.lm[si] - state.lm[sj]
    )
    log_a = log_ratio + log_q_rev
    accepted = math.log(rng.random()) < log_a
    if accepted:
        state.remove_blocks([si, sj])
        state.add_block(merged_idx, merged)
    return SAMSInfo(anchors, "merge", float(log_a), bool(accepted))


# --------------------------------------------------------------------------- concentration


def resample_concentration(alpha: float, C: int, T: int, a: float = 1.0, b: float = 0.1, rng=None) -> float:
    """One auxiliary-variable update of a DP concentration under a Gamma(a, rate b) prior."""
    if not (alpha > 0 and C >= 1 and T >= 1):
        raise ValueError("need alpha > 0, C >= 1 and T >= 1")
    eta = rng.beta(alpha + 1.0, T)
    rate = b - math.log(eta)
    odds = (a + C - 1.0) / (T * rate)
    shape = a + C if rng.random() < odds / (1.0 + odds) else a + C - 1.0
    return float(rng.gamma(shape, 1.0 / rate))


# --------------------------------------------------------------------------- chain driver


@dataclass(frozen=True)
class KernelSchedule:
    kernels: tuple[str, ...]

    def __post_init__(self):
        if not self.kernels:
            raise ValueError("kernel schedule must be nonempty")
        for k in self.kernels:
            if k not in KERNELS:
                raise ValueError(f"unknown kernel {k!r}; choose from {KERNELS}")

    @classmethod
    def of(cls, *kernels: str) -> "KernelSchedule":
        return cls(tuple(kernels))


@dataclass
class ChainConfig:
    iterations: int = 1000
    time_budget: float | None = None
    stride: int = 100
    init: str = "single"
    pgsm: PGSMConfig = field(default_factory=PGSMConfig)
    anchor_proposal: str = "uniform"
    threshold: float = 0.01
    adaptation_stop: float | None = None
    moves_per_iteration: int = 1
    alpha_prior: tuple[float, float] = (1.0, 0.1)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.stride < 1:
            raise ValueError("trace stride must be positive")
        if self.init not in ("single", "singletons"):
            raise ValueError("init must be 'single' or 'singletons'")
        if self.moves_per_iteration < 1:
            raise ValueError("moves_per_iteration must be positive")


@dataclass
class TraceRecord:
    iteration: int
    seconds: float
    cpu_seconds: float
    num_clusters: int
    alpha: float | None
    log_score: float
    heldout_loglik: float | None = None
    v_measure: float | None = None


class Chain:
    """A single MCMC chain executing a kernel schedule cyclically."""

    def __init__(self, X, model, prior: PartitionPrior, schedule: KernelSchedule, config: ChainConfig, rng):
        self.model = model
        self.prior = prior
        self.schedule = schedule
        self.config = config
        self.rng = rng
        if config.init == "single":
            self.state = ClusterState.single_cluster(X, model)
        else:
            self.state = ClusterState.singletons(X, model)
        if "alpha" in schedule.kernels and not isinstance(prior, (DirichletProcess, PitmanYor)):
            raise ValueError("concentration resampling needs a DP or Pitman-Yor prior")
        if "alpha" in schedule.kernels and isinstance(prior, PitmanYor) and prior.discount != 0.0:
            raise ValueError("concentration resampling is only implemented for the Dirichlet process")
        count = config.pgsm.num_anchors if "pgsm" in schedule.kernels else 2
        self.proposal = make_proposal(config.anchor_proposal, count, prior, config.threshold, config.adaptation_stop)
        if "sams" in schedule.kernels and self.proposal.count != 2:
            raise ValueError("SAMS uses exactly two anchors")
        self.iteration = 0

    @property
    def alpha(self) -> float | None:
        return getattr(self.prior, "alpha", None)

    def step(self):
        cfg = self.config
        st = self.state
        for k in self.schedule.kernels:
            if k == "gibbs":
                gibbs_sweep(st, self.prior, self.rng)
            elif k == "alpha":
                a, b = cfg.alpha_prior
                alpha = resample_concentration(self.prior.alpha, st.num_clusters, st.T, a, b, self.rng)
                self.prior = with_alpha(self.prior, alpha)
                if hasattr(self.proposal, "prior"):
                    self.proposal.prior = self.prior
            else:
                for _ in range(cfg.moves_per_iteration):
                    self.proposal.maybe_adapt(st)
                    if k == "pgsm":
                        split_merge_move(st, self.prior, self.proposal, cfg.pgsm, self.rng)
                    else:
                        sams_move(st, self.prior, self.proposal, self.rng)
        self.iteration += 1


def run_chain(
    X: np.ndarray,
    model,
    prior: PartitionPrior,
    schedule: KernelSchedule,
    config: ChainConfig,
    rng: np.random.Generator,
    heldout: np.ndarray | None = None,
    labels: Sequence[int] | None = None,
    timing: bool = True,
) -> Iterator[TraceRecord]:
    """Run a chain and yield a trace record every ``config.stride`` iterations (and at 0 and the end).

    Evaluation time (held-out likelihood, V-measure) is excluded from the
    reported sampler time.  With ``timing=False`` time fields are ``None`` so
    traces are reproducible byte for byte; the wall-clock budget is still
    honoured.
    """
    from .evaluation import heldout_predictive_loglik, v_measure

    chain = Chain(X, model, prior, schedule, config, rng)
    elapsed = 0.0
    cpu = 0.0

    def record() -> TraceRecord:
        st = chain.state
        rec = TraceRecord(
            iteration=chain.iteration,
            seconds=elapsed if timing else None,
            cpu_seconds=cpu if timing else None,
            num_clusters=st.num_clusters,
            alpha=chain.alpha,
            log_score=st.log_score(chain.prior),
        )
        if heldout is not None and len(heldout):
            rec.heldout_loglik = heldout_predictive_loglik([(st, chain.prior)], heldout)
        if labels is not None:
            rec.v_measure = v_measure(st.labels, labels)
        return rec

    yield record()
    last = 0
    while chain.iteration < config.iterations:
        if config.time_budget is not None and elapsed >= config.time_budget:
            break
        t0, c0 = time.perf_counter(), time.process_time()
        chain.step()
        elapsed += time.perf_counter() - t0
        cpu += time.process_time() - c0
        if chain.iteration % config.stride == 0:
            last = chain.iteration
            yield record()
    if chain.iteration != last:
        yield record()

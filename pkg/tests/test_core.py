import math
from collections import Counter
from itertools import permutations

import numpy as np
import pytest
from scipy import stats as sps
from scipy.special import logsumexp

from pgsm.core import (
    TRANSITIONS,
    AllocState,
    GeneralState,
    PathError,
    PGSMConfig,
    RestrictedProblem,
    annealed_log_gamma,
    conditional_multinomial_resample,
    initial_particle,
    iterate_pgsm_step,
    joins_from_states,
    joins_of,
    phi,
    phi_inverse,
    pgsm_step,
    propose_and_weight,
    relative_ess,
    run_smc,
    sample_permutation,
    split_merge_move,
    states_from_joins,
    successors,
    valid_join_paths,
)
from pgsm.evaluation import (
    empirical_distribution,
    exact_restricted_target,
    restricted_log_gamma,
    restricted_support,
    tv_distance,
)
from pgsm.likelihoods import BetaBernoulli, NormalInverseWishart
from pgsm.partition import Clustering, DirichletProcess, FiniteDirichlet, PitmanYor, restrict
from pgsm.state import ClusterState
from pgsm.bench import FixedAnchors

S1, S2, S3, S4 = AllocState.INITIAL, AllocState.MERGE, AllocState.JOIN_FIRST, AllocState.JOIN_SECOND


# --------------------------------------------------------------------------- permutation and paths


def test_transition_map():
    assert set(TRANSITIONS[S1]) == {S2, S4}
    assert set(TRANSITIONS[S2]) == {S2}
    assert set(TRANSITIONS[S3]) == {S3, S4}
    assert set(TRANSITIONS[S4]) == {S3, S4}


def test_sample_permutation_uniform(rng):
    anchors, closure = [3, 5], [3, 4, 5, 6]
    draws = Counter(tuple(sample_permutation(anchors, closure, rng)) for _ in range(20000))
    assert set(draws) == {(a, b, c, d) for a, b in permutations(anchors) for c, d in permutations([4, 6])}
    counts = np.array(list(draws.values()))
    assert sps.chisquare(counts).pvalue > 1e-3


def test_sample_permutation_anchor_only(rng):
    sigma = sample_permutation([2, 9], [2, 9], rng)
    assert sorted(sigma) == [2, 9]


def test_phi_examples():
    sigma = (3, 5, 6, 4)
    assert phi(sigma, [S1, S2, S2, S2]) == Clustering([[3, 4, 5, 6]])
    assert phi(sigma, [S1, S4, S3, S4]) == Clustering([[3, 6], [4, 5]])
    assert phi_inverse(sigma, Clustering([[3, 6], [4, 5]])) == [S1, S4, S3, S4]


def test_invalid_paths_rejected():
    with pytest.raises(PathError):
        phi((0, 1, 2), [S1, S3, S3])  # JOIN_FIRST cannot follow INITIAL
    with pytest.raises(PathError):
        phi((0, 1, 2), [S1, S2, S4])  # merge is absorbing
    with pytest.raises(PathError):
        joins_of((0, 1, 2), Clustering([[0, 1], [2]]))  # anchor-free block
    with pytest.raises(PathError):
        phi((0, 1, 2), [0, 2, 0])


def _path_respects_transitions(states):
    return states[0] == S1 and all(b in TRANSITIONS[a] for a, b in zip(states, states[1:]))


@pytest.mark.parametrize("n", range(2, 9))
def test_two_anchor_bijection(n):
    sigma = list(range(n))
    paths = list(valid_join_paths(n, 2))
    assert len(paths) == 1 + 2 ** (n - 2)
    support = restricted_support([0, 1], range(n))
    assert len(support) == len(paths)
    for joins in paths:
        states = states_from_joins(joins, 2)
        assert _path_respects_transitions(states)
        assert phi_inverse(sigma, phi(sigma, states)) == states
    for c in support:
        assert phi(sigma, phi_inverse(sigma, c)) == c


def test_three_anchor_states_are_general():
    states = states_from_joins([0, 1, 1, 0], 3)
    assert states[-1] == GeneralState((0, 1, 1), 0)
    np.testing.assert_array_equal(joins_from_states(states, 3), [0, 1, 1, 0])


def test_merge_absorbing_semantics():
    for joins in valid_join_paths(6, 2):
        if joins[1] == 0:
            assert len(phi(range(6), joins)) == 1


# --------------------------------------------------------------------------- weights


def _problem(rng, n=7, S=2, prior=None, model=None, outside=2):
    model = model or NormalInverseWishart(2)
    prior = prior or PitmanYor(0.8, 0.3)
    X = rng.standard_normal((n, model.data_dim)) * 2
    sigma = rng.permutation(n)
    return X, RestrictedProblem.build(X, sigma, S, outside + 1, 1, model, prior), outside


def _brute_gamma(X, problem, joins, outside):
    c = phi(problem.sigma, list(joins), problem.n_anchors)
    return restricted_log_gamma(c, outside + 1, 1, X, problem.model, problem.prior)


@pytest.mark.parametrize("S", [2, 3])
@pytest.mark.parametrize("prior", [DirichletProcess(1.5), PitmanYor(0.8, 0.3), FiniteDirichlet(0.7, 5)], ids=repr)
def test_log_gamma_matches_from_scratch(S, prior, rng):
    for _ in range(10):
        X, prob, outside = _problem(rng, S=S, prior=prior)
        p = initial_particle(prob)
        assert math.isclose(p.log_gamma, _brute_gamma(X, prob, p.joins, outside), rel_tol=1e-8, abs_tol=1e-8)
        while p.t < prob.n:
            propose_and_weight(p, prob, False, rng)
            assert math.isclose(p.log_gamma, _brute_gamma(X, prob, p.joins, outside), rel_tol=1e-8, abs_tol=1e-8)


@pytest.mark.parametrize("S", [2, 3])
@pytest.mark.parametrize("anneal", [False, True])
def test_incremental_weight_matches_brute_force(S, anneal, rng):
    for _ in range(10):
        X, prob, outside = _problem(rng, S=S)
        n = prob.n
        p = initial_particle(prob)
        stop = int(rng.integers(1, n))
        while p.t < stop:
            propose_and_weight(p, prob, anneal, rng)
        # oracle: successors' targets evaluated from scratch
        succ = successors(p, S)
        if anneal:
            cur = annealed_log_gamma(p, n, S)
            nxt = []
            for j in succ:
                q = p.copy()
                propose_and_weight(q, prob, anneal, rng, forced=j)
                nxt.append(annealed_log_gamma(q, n, S))
        else:
            cur = _brute_gamma(X, prob, p.joins, outside)
            nxt = [_brute_gamma(X, prob, p.joins + [j], outside) for j in succ]
        expected = logsumexp(np.array(nxt) - cur)
        q = p.copy()
        _, log_inc = propose_and_weight(q, prob, anneal, rng)
        assert math.isclose(log_inc, expected, rel_tol=1e-8, abs_tol=1e-8)


def test_annealed_weights_before_and_after_anchor_stage(rng):
    X, prob, outside = _problem(rng, n=6, S=2)
    p = initial_particle(prob)
    _, w = propose_and_weight(p, prob, True, rng)
    # the anchor stage has an indicator target: two successors, weight 2 (constant over particles)
    assert math.isclose(w, math.log(2))
    _, w = propose_and_weight(p, prob, True, rng)
    assert np.isfinite(w)


def test_proposal_frequencies_follow_target_ratio(rng):
    X, prob, outside = _problem(rng, n=6, S=2)
    p = initial_particle(prob)
    for j in (1, 0, 1):
        propose_and_weight(p, prob, False, rng, forced=j)
    ratios = np.array([_brute_gamma(X, prob, p.joins + [j], outside) for j in successors(p, 2)])
    probs = np.exp(ratios - logsumexp(ratios))
    draws = np.bincount([propose_and_weight(p.copy(), prob, False, rng)[0] - 3 for _ in range(20000)], minlength=2)
    assert sps.chisquare(draws, 20000 * probs).pvalue > 1e-3


def test_symmetric_blocks_give_even_proposal(rng):
    X = np.array([[1.0], [1.0], [0.3]])
    prob = RestrictedProblem.build(X, [0, 1, 2], 2, 1, 1, NormalInverseWishart(1), DirichletProcess(1.0))
    p = initial_particle(prob)
    propose_and_weight(p, prob, False, rng, forced=1)
    picks = np.array([propose_and_weight(p.copy(), prob, False, rng)[0] for _ in range(20000)]) == S3
    assert abs(picks.mean() - 0.5) < 4 * math.sqrt(0.25 / 20000)


def test_forced_merge_is_deterministic(rng):
    X, prob, _ = _problem(rng, n=5)
    p = initial_particle(prob)
    propose_and_weight(p, prob, False, rng, forced=0)
    for _ in range(3):
        state, _ = propose_and_weight(p, prob, False, rng)
        assert state == S2


@pytest.mark.parametrize("n", [3, 5, 9])
def test_annealed_endpoint_equals_plain_target(n, rng):
    for _ in range(20):
        X, prob, _ = _problem(rng, n=n)
        p = initial_particle(prob)
        while p.t < n:
            propose_and_weight(p, prob, True, rng)
        assert abs(annealed_log_gamma(p, n, 2) - p.log_gamma) <= 1e-12 * max(1.0, abs(p.log_gamma))


# --------------------------------------------------------------------------- resampling


def test_relative_ess_examples():
    assert relative_ess(np.full(7, 1 / 7)) == pytest.approx(1.0)
    assert relative_ess(np.array([1.0, 0, 0, 0])) == pytest.approx(0.25)
    assert relative_ess(np.array([0.5, 0.5, 0, 0])) == pytest.approx(0.5)
    with pytest.raises(Exception):
        relative_ess(np.zeros(3))


def test_conditional_resampling(rng):
    A = [conditional_multinomial_resample(np.array([1.0, 0.0]), rng) for _ in range(100)]
    assert all(a[0] == 0 and a[1] == 0 for a in A)
    A = np.concatenate([conditional_multinomial_resample(np.full(3, 1 / 3), rng)[1:] for _ in range(30000)])
    assert sps.chisquare(np.bincount(A, minlength=3)).pvalue > 1e-3


@pytest.mark.parametrize("threshold", [0.0, 0.5, 1.0])
def test_ess_gating(threshold, rng):
    for _ in range(20):
        X, prob, _ = _problem(rng, n=9)
        res = run_smc(prob, 10, threshold, True, rng, conditional_joins=np.zeros(9, dtype=np.int64), early_stop=False)
        gen = np.arange(1, prob.n)
        assert np.all((res.ess >= 0) & (res.ess <= 1 + 1e-12))
        if threshold == 1.0:
            assert res.resampled[gen].all()
        elif threshold == 0.0:
            assert not res.resampled.any()
        else:
            np.testing.assert_array_equal(res.resampled[gen], res.ess[gen] < 0.5)


# --------------------------------------------------------------------------- kernel invariance


def _chain_tv(X, c0, anchors, full_C, model, prior, config, steps, rng):
    closure, out = iterate_pgsm_step(X, c0, anchors, full_C, model, prior, config, steps, rng)
    emp = empirical_distribution(Clustering.from_labels(row, closure) for row in map(tuple, out))
    exact = exact_restricted_target(anchors, closure, full_C, len(c0), X, model, prior)
    return tv_distance(emp, exact)


def test_two_point_closure(rng):
    X = np.array([[0.0], [0.4]])
    model, prior = NormalInverseWishart(1), DirichletProcess(1.0)
    tv = _chain_tv(X, Clustering([[0, 1]]), [0, 1], 1, model, prior, PGSMConfig(), 100000, rng)
    assert tv <= 0.02


def test_strong_merge_prior(rng):
    X = np.ones((4, 3))
    model, prior = BetaBernoulli(3), DirichletProcess(0.01)
    closure, out = iterate_pgsm_step(X, Clustering([[0, 2], [1, 3]]), [0, 1], 2, model, prior, PGSMConfig(), 5000, rng)
    merged = (out.max(axis=1) == 0).mean()
    assert merged > 0.5


@pytest.mark.parametrize("config", [
    PGSMConfig(num_particles=2, ess_threshold=0.0, anneal=False),
    PGSMConfig(num_particles=5, ess_threshold=1.0),
    PGSMConfig(num_particles=20, num_anchors=3),
    PGSMConfig(num_particles=4, early_stop=False),
], ids=["N2-plain", "N5-always", "three-anchors", "no-early-stop"])
def test_restricted_kernel_invariance(config, rng):
    X = np.array([[0.0], [0.3], [4.0], [4.2], [8.0], [1.0]])
    model, prior = NormalInverseWishart(1), PitmanYor(1.0, 0.2)
    anchors = [0, 2, 4][: config.num_anchors]
    exact = exact_restricted_target(anchors, range(6), 3, 1, X, model, prior)
    keys = list(exact)
    c0 = keys[int(rng.choice(len(keys), p=[exact[k] for k in keys]))]
    tv = _chain_tv(X, c0, anchors, 2 + len(c0), model, prior, config, 60000, rng)
    assert tv <= 0.03


def test_python_and_compiled_kernels_agree(rng):
    # pgsm_step driven from Python against the compiled loop, same target
    X = np.array([[0.0], [0.5], [3.0], [3.3]])
    model, prior = NormalInverseWishart(1), DirichletProcess(1.0)
    config = PGSMConfig(num_particles=5)
    c = Clustering([[0, 1, 2, 3]])
    draws = []
    for _ in range(4000):
        c = pgsm_step(X, c, [0, 2], 1, model, prior, config, rng)
        draws.append(c)
    exact = exact_restricted_target([0, 2], range(4), 1, 1, X, model, prior)
    assert tv_distance(empirical_distribution(draws), exact) < 0.05


def test_pgsm_step_rejects_bad_anchors(rng):
    X = np.zeros((3, 1))
    m, pr = NormalInverseWishart(1), DirichletProcess(1.0)
    with pytest.raises(ValueError):
        pgsm_step(X, Clustering([[0, 1, 2]]), [0, 0], 1, m, pr, PGSMConfig(), rng)
    with pytest.raises(ValueError):
        pgsm_step(X, Clustering([[0, 1, 2]]), [0, 1, 2], 1, m, pr, PGSMConfig(), rng)


def test_early_stop_keeps_merged_output(rng):
    X = np.zeros((8, 1))
    prob = RestrictedProblem.build(X, np.arange(8), 2, 1, 1, NormalInverseWishart(1), DirichletProcess(1e-6))
    stops = 0
    for _ in range(50):
        res = run_smc(prob, 3, 0.5, True, rng, conditional_joins=np.zeros(8, dtype=np.int64))
        stops += res.last_generation < 7
        if res.num_blocks == 1:
            assert res.block_sizes[0] == 8
            np.testing.assert_array_equal(res.joins, 0)
    assert stops > 0


def test_config_validation():
    with pytest.raises(ValueError):
        PGSMConfig(num_particles=1)
    with pytest.raises(ValueError):
        PGSMConfig(ess_threshold=1.5)
    with pytest.raises(ValueError):
        PGSMConfig(num_anchors=4)


# --------------------------------------------------------------------------- full-clustering move


def test_split_merge_move_keeps_state_valid(rng):
    X = rng.standard_normal((40, 2))
    model = NormalInverseWishart(2)
    st = ClusterState(X, model, rng.integers(5, size=40))
    from pgsm.anchors import UniformProposal

    for _ in range(300):
        before = st.labels.copy()
        info = split_merge_move(st, DirichletProcess(1.0), UniformProposal(), PGSMConfig(), rng)
        touched = np.isin(before, np.unique(before[info.anchors]))
        untouched = np.flatnonzero(~touched)
        # blocks without an anchor keep their members together and separate from the closure
        assert Clustering.from_labels(st.labels[untouched], untouched) == Clustering.from_labels(before[untouched], untouched)
        assert not np.intersect1d(st.labels[untouched], st.labels[touched]).size
    st.check_consistency()


def test_split_merge_move_invariance_chi_square(rng):
    # one move applied to exact posterior draws leaves the distribution unchanged
    from pgsm.anchors import UniformProposal
    from pgsm.evaluation import exact_posterior

    X = np.array([[0.0], [0.2], [2.5], [2.9], [5.0]])
    model, prior = NormalInverseWishart(1), DirichletProcess(1.0)
    post = exact_posterior(X, model, prior)
    keys = list(post)
    p = np.array([post[k] for k in keys])
    idx = rng.choice(len(keys), size=20000, p=p)
    out = Counter()
    for k in idx:
        st = ClusterState.from_clustering(X, model, keys[k])
        split_merge_move(st, prior, UniformProposal(), PGSMConfig(num_particles=5), rng)
        out[st.to_clustering()] += 1
    observed = np.array([out.get(k, 0) for k in keys])
    mask = p * 20000 >= 5
    obs, exp = observed[mask], p[mask] * 20000
    if not mask.all():
        obs, exp = np.append(obs, observed[~mask].sum()), np.append(exp, p[~mask].sum() * 20000)
    assert sps.chisquare(obs, exp).pvalue > 0.01


def test_fixed_pair_anchor_move(rng):
    # anchors always in the same singleton-pair block: a two-point split/merge
    X = np.array([[0.0], [0.1], [5.0]])
    model, prior = NormalInverseWishart(1), DirichletProcess(1.0)
    exact = exact_restricted_target([0, 1], [0, 1], 2, 1, X, model, prior)
    st = ClusterState(X, model, [0, 0, 1])
    draws = []
    for _ in range(20000):
        split_merge_move(st, prior, FixedAnchors([0, 1]), PGSMConfig(num_particles=4), rng)
        c_bar, _ = restrict(st.to_clustering(), [0, 1])
        draws.append(c_bar)
    assert tv_distance(empirical_distribution(draws), exact) < 0.02

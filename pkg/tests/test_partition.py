import math
from itertools import combinations

import numpy as np
import pytest
from scipy.special import gammaln

from pgsm.partition import (
    Clustering,
    DirichletProcess,
    FiniteDirichlet,
    PartitionError,
    PitmanYor,
    bell_number,
    canonical_labels,
    enumerate_labelings,
    enumerate_partitions,
    enumerate_partitions_of,
    log_prior,
    log_tau1,
    log_tau1_bar,
    log_tau1_ratio,
    log_tau2,
    log_tau2_ratio,
    reassemble,
    restrict,
    with_alpha,
)

PRIORS = [DirichletProcess(1.3), PitmanYor(0.7, 0.4), PitmanYor(2.0, 0.0), FiniteDirichlet(0.5, 5)]


def test_clustering_is_label_free():
    a = Clustering([[3, 1], [0], [2, 4]])
    b = Clustering.from_labels([7, 2, 9, 2, 9])
    assert a == b
    assert hash(a) == hash(b)
    assert a.blocks == ((0,), (1, 3), (2, 4))
    assert a.block_containing(4) == (2, 4)
    np.testing.assert_array_equal(a.labels(), [0, 1, 2, 1, 2])
    assert a.is_partition_of(5) and not a.is_partition_of(6)


def test_clustering_rejects_bad_blocks():
    with pytest.raises(PartitionError):
        Clustering([[0, 1], [1, 2]])
    with pytest.raises(PartitionError):
        Clustering([[0], []])
    with pytest.raises(PartitionError):
        Clustering([[1, 5]]).labels()


def test_canonical_labels():
    assert canonical_labels([5, 5, 2, 7, 2]) == (0, 0, 1, 2, 1)


@pytest.mark.parametrize("T", range(0, 9))
def test_enumeration_counts(T):
    parts = list(enumerate_partitions(T))
    assert len(parts) == bell_number(T)
    assert len(set(parts)) == len(parts)
    assert all(c.is_partition_of(T) for c in parts)


def test_bell_numbers():
    assert [bell_number(T) for T in range(8)] == [1, 1, 2, 5, 15, 52, 203, 877]


def test_enumeration_refuses_large_T():
    with pytest.raises(ValueError):
        next(enumerate_labelings(13))


def test_enumerate_partitions_of_arbitrary_indices():
    parts = list(enumerate_partitions_of([10, 4, 7]))
    assert len(parts) == 5
    assert all(c.indices == {4, 7, 10} for c in parts)


@pytest.mark.parametrize("prior", PRIORS, ids=repr)
def test_ratios_match_differences(prior):
    for j in range(1, 5):
        assert math.isclose(log_tau2_ratio(prior, j), log_tau2(prior, j + 1) - log_tau2(prior, j), abs_tol=1e-12)
        assert math.isclose(log_tau1_ratio(prior, j), log_tau1(prior, j + 1) - log_tau1(prior, j), abs_tol=1e-12)


def _crp_prob(labels, alpha, d):
    # sequential seating probability of a Pitman-Yor restaurant
    p, sizes = 1.0, []
    for n, k in enumerate(labels):
        if k == len(sizes):
            p *= (alpha + d * len(sizes)) / (alpha + n)
            sizes.append(1)
        else:
            p *= (sizes[k] - d) / (alpha + n)
            sizes[k] += 1
    return p


@pytest.mark.parametrize("prior", PRIORS[:3], ids=repr)
def test_product_form_matches_sequential_seating(prior):
    d = getattr(prior, "discount", 0.0)
    T = 6
    labs = list(enumerate_labelings(T))
    seq = np.array([_crp_prob(lab, prior.alpha, d) for lab in labs])
    np.testing.assert_allclose(seq.sum(), 1.0, rtol=1e-12)
    lp = np.array([log_prior(prior, Clustering.from_labels(lab)) for lab in labs])
    # equal up to a constant depending only on T
    np.testing.assert_allclose(np.exp(lp - lp.max()) / np.exp(lp - lp.max()).sum(), seq, rtol=1e-10)


def test_finite_dirichlet_matches_urn_scheme():
    # K labelled components, symmetric Dirichlet(delta): brute force over label vectors
    K, delta, T = 3, 0.7, 4
    from itertools import product
    probs = {}
    for z in product(range(K), repeat=T):
        counts = np.bincount(z, minlength=K)
        lp = gammaln(K * delta) - gammaln(K * delta + T) + np.sum(gammaln(delta + counts) - gammaln(delta))
        c = Clustering.from_labels(z)
        probs[c] = probs.get(c, 0.0) + math.exp(lp)
    prior = FiniteDirichlet(delta, K)
    parts = list(enumerate_partitions(T))
    lp = np.array([log_prior(prior, c) for c in parts])
    q = np.exp(lp - lp.max())
    q /= q.sum()
    for c, qc in zip(parts, q):
        assert math.isclose(probs.get(c, 0.0), qc, rel_tol=1e-10, abs_tol=1e-15)


def test_finite_dirichlet_support():
    prior = FiniteDirichlet(1.0, 2)
    assert log_tau1(prior, 3) == -math.inf
    assert log_tau1_ratio(prior, 2) == -math.inf


def test_prior_validation():
    with pytest.raises(ValueError):
        DirichletProcess(0.0)
    with pytest.raises(ValueError):
        PitmanYor(1.0, 1.0)
    with pytest.raises(ValueError):
        FiniteDirichlet(1.0, 0)


def test_with_alpha():
    assert with_alpha(DirichletProcess(1.0), 2.5) == DirichletProcess(2.5)
    with pytest.raises(TypeError):
        with_alpha(FiniteDirichlet(1.0, 3), 2.0)


def test_tau1_bar_offsets_cluster_count():
    prior = PitmanYor(0.9, 0.3)
    assert log_tau1_bar(prior, 2, 5, 1) == log_tau1(prior, 6)
    with pytest.raises(ValueError):
        log_tau1_bar(prior, 2, 1, 2)


def test_restrict_and_reassemble_round_trip():
    for c in enumerate_partitions(6):
        for anchors in combinations(range(6), 2):
            c_bar, closure = restrict(c, anchors)
            assert all(any(a in b for a in anchors) for b in c_bar)
            assert closure == set().union(*c_bar.blocks)
            assert reassemble(c, c_bar, c_bar) == c
            merged = Clustering([sorted(closure)])
            out = reassemble(c, c_bar, merged)
            assert out.is_partition_of(6)
            assert len(out) == len(c) - len(c_bar) + 1


def test_restrict_errors():
    c = Clustering([[0, 1], [2]])
    with pytest.raises(PartitionError):
        restrict(c, [0, 0])
    with pytest.raises(PartitionError):
        restrict(c, [0, 7])
    c_bar, _ = restrict(c, [0, 1])
    with pytest.raises(PartitionError):
        reassemble(c, c_bar, Clustering([[0], [1], [2]]))

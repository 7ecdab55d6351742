import math

import numpy as np
import pytest
from scipy.special import logsumexp

from pgsm.likelihoods import (
    BetaBernoulli,
    GenotypeState,
    NormalInverseWishart,
    NumericalError,
    PyCloneDatum,
    PyCloneGrid,
    make_model,
    pyclone_grid,
    pyclone_log_marginal,
    pyclone_matrix,
    pyclone_precompute_xi,
    pyclone_xi,
    read_pyclone_file,
)

from oracles import beta_bernoulli_quadrature, niw_student_t_chain, pyclone_brute_force


@pytest.mark.parametrize("D", [1, 2, 8])
def test_niw_incremental_matches_batch(D, rng):
    model = NormalInverseWishart(D)
    Y = 3.0 * rng.standard_normal((100, D)) + 5.0
    stat = model.empty_stat()
    for m in range(1, 101):
        stat = model.add(stat, Y[m - 1])
        ref = model.log_marginal_batch(Y[:m])
        assert abs(model.log_marginal(stat) - ref) <= 1e-8 * max(1.0, abs(ref))
    # downdates back to a shorter prefix
    for m in range(100, 10, -1):
        stat = model.remove(stat, Y[m - 1])
        ref = model.log_marginal_batch(Y[: m - 1])
        assert abs(model.log_marginal(stat) - ref) <= 1e-8 * max(1.0, abs(ref))


@pytest.mark.parametrize("D", [1, 3])
def test_niw_matches_student_t_predictive_chain(D, rng):
    S0 = np.eye(D) + 0.3 * np.ones((D, D))
    model = NormalInverseWishart(D, nu0=D + 3.5, r0=0.7, u0=np.arange(D) * 0.5, S0=S0)
    Y = rng.standard_normal((12, D))
    ref = niw_student_t_chain(Y, model.nu0, model.r0, model.u0, model.S0)
    np.testing.assert_allclose(model.log_marginal_of(Y), ref, rtol=1e-9)


def test_niw_statistic_tracks_posterior(rng):
    model = NormalInverseWishart(3)
    Y = rng.standard_normal((7, 3))
    m, u, L = model.unpack(model.stat_of(Y))
    nu_m, r_m, u_ref, S_ref = model.batch_posterior(Y)
    assert m == 7
    np.testing.assert_allclose(u, u_ref, rtol=1e-12)
    np.testing.assert_allclose(L @ L.T, S_ref, rtol=1e-10)


def test_niw_validation():
    with pytest.raises(ValueError):
        NormalInverseWishart(2, nu0=0.5)
    with pytest.raises(ValueError):
        NormalInverseWishart(2, S0=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        NormalInverseWishart(2).add(NormalInverseWishart(2).empty_stat(), [1.0, 2.0, 3.0])


def test_niw_downdate_failure_is_reported():
    model = NormalInverseWishart(2)
    stat = model.stat_of(np.array([[0.0, 0.0], [1.0, 1.0]]))
    # removing a point that was never added breaks positive definiteness
    with pytest.raises(NumericalError):
        for _ in range(3):
            stat = model.remove(stat, np.array([50.0, -50.0]))


@pytest.mark.parametrize("a0,b0", [(1.0, 1.0), (0.5, 2.0), (3.0, 0.7)])
def test_beta_bernoulli_matches_quadrature(a0, b0, rng):
    model = BetaBernoulli(4, a0, b0)
    for m in range(1, 11):
        Y = (rng.uniform(size=(m, 4)) < 0.3).astype(float)
        ref = beta_bernoulli_quadrature(Y, a0, b0)
        assert abs(model.log_marginal_of(Y) - ref) <= 1e-10 * max(1.0, abs(ref))


@pytest.mark.parametrize("M", [2, 11, 101])
def test_pyclone_matches_brute_force(M, rng):
    model = PyCloneGrid(M)
    Y = -rng.uniform(0.0, 3.0, size=(6, M))
    for m in range(1, 7):
        ref = pyclone_brute_force(Y[:m])
        got = model.log_marginal_of(Y[:m])
        assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))
        assert math.isclose(pyclone_log_marginal(Y[:m].sum(axis=0)), ref, rel_tol=1e-12)


def _telescoping_gap(model, Y):
    stat = model.empty_stat()
    acc = 0.0
    for y in Y:
        acc += model.log_predictive(stat, y)
        stat = model.add(stat, y)
    return abs(acc - model.log_marginal_of(Y))


def test_telescoping_identities(rng):
    cases = [
        (NormalInverseWishart(1), rng.standard_normal((30, 1))),
        (NormalInverseWishart(4), rng.standard_normal((30, 4))),
        (BetaBernoulli(6, 0.5, 0.5), (rng.uniform(size=(30, 6)) < 0.5).astype(float)),
        (PyCloneGrid(21), -rng.uniform(0, 2, size=(30, 21))),
    ]
    for model, Y in cases:
        assert _telescoping_gap(model, Y) <= 1e-8


def test_empty_block_has_unit_likelihood():
    for model in (NormalInverseWishart(2), BetaBernoulli(3), PyCloneGrid(5)):
        assert model.log_marginal(model.empty_stat()) == 0.0


def test_make_model():
    assert isinstance(make_model("niw", 2, r0=2.0), NormalInverseWishart)
    assert isinstance(make_model("bernoulli", 3), BetaBernoulli)
    assert make_model("pyclone", 7).M == 7
    with pytest.raises(ValueError):
        make_model("poisson", 1)


def test_pyclone_xi_limits():
    s = GenotypeState("AB", "AB", "BB", 1.0)
    phi = pyclone_grid(5)
    xi = pyclone_xi(s, phi, t=1.0, error_rate=0.0)
    # pure tumour: mixes heterozygous reference with homozygous-B variant
    np.testing.assert_allclose(xi, 0.5 * (1 - phi) + 1.0 * phi)
    assert np.all((xi >= 0) & (xi <= 1))


def test_pyclone_precompute_sums_states():
    states = [GenotypeState("AB", "AB", "AB", 2.0), GenotypeState("AB", "AB", "BB", 1.0)]
    d = PyCloneDatum("m1", 30, 100, 0.8, states)
    out = pyclone_precompute_xi(d, M=11)
    from scipy.stats import binom

    grid = pyclone_grid(11)
    terms = [math.log(w / 3) + binom.logpmf(30, 100, pyclone_xi(s, grid, 0.8)) for s, w in zip(states, (2, 1))]
    np.testing.assert_allclose(out, logsumexp(np.stack(terms), axis=0), rtol=1e-12)


def test_read_pyclone_file(tmp_path):
    p = tmp_path / "muts.tsv"
    p.write_text(
        "mutation_id\tb_count\td_count\ttumour_content\tg_N\tg_R\tg_V\tweight\n"
        "a\t10\t50\t0.9\tAA\tAA\tAB\t1\n"
        "a\t10\t50\t0.9\tAA\tAA\tBB\t1\n"
        "b\t3\t40\t0.9\tAA\tAA\tAB\t1\n"
    )
    data = read_pyclone_file(p)
    assert [d.mutation_id for d in data] == ["a", "b"]
    assert len(data[0].states) == 2
    assert pyclone_matrix(data, M=7).shape == (2, 7)


def test_pyclone_datum_validation():
    with pytest.raises(ValueError):
        PyCloneDatum("x", 5, 3, 0.5)
    with pytest.raises(ValueError):
        PyCloneDatum("x", 1, 3, 1.5)


def test_niw_single_point_default_value():
    # one-dimensional, weak default prior, y = 0
    val = NormalInverseWishart(1).log_marginal_of(np.zeros((1, 1)))
    ref = -0.5 * math.log(math.pi) - 0.5 * math.log(2) + math.lgamma(2) - math.lgamma(1.5)
    assert math.isclose(val, ref, rel_tol=1e-12)
    assert math.isclose(math.exp(val), 0.4502, abs_tol=1e-4)


def test_niw_single_point_quadrature():
    # integrate N(y | mu, s2) N(mu | 0, s2) IG(s2 | nu0/2, S0/2) numerically
    from scipy import integrate, stats

    y = 0.7
    f = lambda mu, s2: (stats.norm.pdf(y, mu, math.sqrt(s2)) * stats.norm.pdf(mu, 0.0, math.sqrt(s2))
                        * stats.invgamma.pdf(s2, 1.5, scale=0.5))
    val, _ = integrate.dblquad(f, 0.0, np.inf, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-10)
    got = NormalInverseWishart(1).log_marginal_of(np.array([[y]]))
    assert math.isclose(got, math.log(val), rel_tol=1e-7)


def test_beta_bernoulli_two_successes():
    # standard marginal of y = (1, 1) under a uniform prior is 1/3
    got = BetaBernoulli(1).log_marginal_of(np.ones((2, 1)))
    assert math.isclose(got, math.log(1 / 3), rel_tol=1e-12)

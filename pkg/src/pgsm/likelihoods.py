"""Conjugate component models with incrementally updated sufficient statistics.

Every model stores its sufficient statistic as a flat float64 vector so the
compiled samplers can treat all models uniformly.  The kernels below dispatch
on an integer model code; :class:`LikelihoodModel` wraps them for Python use.

Layouts
-------
NIW      params = [D, nu0, r0, log|S0|, sum_d lgamma((nu0+1-d)/2), u0 (D), chol(S0) (D*D)]
         stat   = [m, u_m (D), chol(S_m) (D*D)]
Bernoulli params = [D, a0, b0, log B(a0, b0)]
         stat   = [m, successes (D)]
PyClone  params = [M, log M]
         stat   = sum of the per-datum log-likelihood grids (M)
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import binom

MODEL_NIW, MODEL_BERNOULLI, MODEL_PYCLONE = 0, 1, 2

_LOG_PI = math.log(math.pi)


class NumericalError(ArithmeticError):
    """A sufficient-statistic update broke down numerically."""


# --------------------------------------------------------------------------- NIW kernels


@numba.njit(cache=True, inline="always")
def _chol_update(L, D, off, v):
    # L stored row-major at stat[off:off+D*D]; v is overwritten
    for k in range(D):
        lkk = L[off + k * D + k]
        r = math.sqrt(lkk * lkk + v[k] * v[k])
        c = r / lkk
        s = v[k] / lkk
        L[off + k * D + k] = r
        for i in range(k + 1, D):
            lik = (L[off + i * D + k] + s * v[i]) / c
            L[off + i * D + k] = lik
            v[i] = c * v[i] - s * lik


@numba.njit(cache=True, inline="always")
def _chol_downdate(L, D, off, v):
    for k in range(D):
        lkk = L[off + k * D + k]
        r2 = lkk * lkk - v[k] * v[k]
        if not r2 > 0.0:
            raise NumericalError("Cholesky downdate lost positive definiteness")
        r = math.sqrt(r2)
        c = r / lkk
        s = v[k] / lkk
        L[off + k * D + k] = r
        for i in range(k + 1, D):
            lik = (L[off + i * D + k] - s * v[i]) / c
            L[off + i * D + k] = lik
            v[i] = c * v[i] - s * lik


@numba.njit(cache=True, inline="always")
def _niw_init(params, stat):
    D = int(params[0])
    stat[0] = 0.0
    for d in range(D):
        stat[1 + d] = params[6 + d]
    for k in range(D * D):
        stat[1 + D + k] = params[6 + D + k]


@numba.njit(cache=True, inline="always")
def _niw_add(params, stat, x):
    D = int(params[0])
    r0 = params[2]
    m = stat[0]
    r_prev = r0 + m
    r_new = r_prev + 1.0
    if D == 1:
        # scalar case without workspace allocation
        u_new = (r_prev * stat[1] + x[0]) / r_new
        v0 = (x[0] - u_new) * math.sqrt(r_new / r_prev)
        stat[1] = u_new
        stat[2] = math.sqrt(stat[2] * stat[2] + v0 * v0)
        stat[0] = m + 1.0
        return
    v = np.empty(D)
    for d in range(D):
        u_new = (r_prev * stat[1 + d] + x[d]) / r_new
        stat[1 + d] = u_new
        v[d] = x[d] - u_new
    scale = math.sqrt(r_new / r_prev)
    for d in range(D):
        v[d] *= scale
    _chol_update(stat, D, 1 + D, v)
    stat[0] = m + 1.0


@numba.njit(cache=True, inline="always")
def _niw_remove(params, stat, x):
    D = int(params[0])
    r0 = params[2]
    m = stat[0]
    if m < 1.0:
        raise NumericalError("cannot remove from an empty statistic")
    if m == 1.0:
        _niw_init(params, stat)
        return
    r_new = r0 + m
    r_prev = r_new - 1.0
    scale = math.sqrt(r_new / r_prev)
    if D == 1:
        v0 = scale * (x[0] - stat[1])
        r2 = stat[2] * stat[2] - v0 * v0
        if not r2 > 0.0:
            raise NumericalError("Cholesky downdate lost positive definiteness")
        stat[2] = math.sqrt(r2)
        stat[1] = (r_new * stat[1] - x[0]) / r_prev
        stat[0] = m - 1.0
        return
    v = np.empty(D)
    for d in range(D):
        v[d] = scale * (x[d] - stat[1 + d])
    _chol_downdate(stat, D, 1 + D, v)
    for d in range(D):
        stat[1 + d] = (r_new * stat[1 + d] - x[d]) / r_prev
    stat[0] = m - 1.0


@numba.njit(cache=True, inline="always")
def _niw_log_marginal(params, stat):
    m = stat[0]
    if m == 0.0:
        return 0.0
    D = int(params[0])
    nu0 = params[1]
    r0 = params[2]
    nu_m = nu0 + m
    r_m = r0 + m
    logdet = 0.0
    off = 1 + D
    for k in range(D):
        logdet += math.log(stat[off + k * D + k])
    logdet *= 2.0
    lg = 0.0
    for d in range(1, D + 1):
        lg += math.lgamma(0.5 * (nu_m + 1.0 - d))
    return (
        -0.5 * m * D * 1.1447298858494002  # log(pi)
        + 0.5 * D * (math.log(r0) - math.log(r_m))
        + 0.5 * nu0 * params[3]
        - 0.5 * nu_m * logdet
        + lg
        - params[4]
    )


# --------------------------------------------------------------------------- Bernoulli kernels


@numba.njit(cache=True, inline="always")
def _bb_init(params, stat):
    for k in range(stat.shape[0]):
        stat[k] = 0.0


@numba.njit(cache=True, inline="always")
def _bb_add(params, stat, x):
    D = int(params[0])
    stat[0] += 1.0
    for d in range(D):
        stat[1 + d] += x[d]


@numba.njit(cache=True, inline="always")
def _bb_remove(params, stat, x):
    D = int(params[0])
    stat[0] -= 1.0
    for d in range(D):
        stat[1 + d] -= x[d]


@numba.njit(cache=True, inline="always")
def _bb_log_marginal(params, stat):
    m = stat[0]
    if m == 0.0:
        return 0.0
    D = int(params[0])
    a0 = params[1]
    b0 = params[2]
    total = 0.0
    for d in range(D):
        a = a0 + stat[1 + d]
        b = b0 + m - stat[1 + d]
        total += math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    return total - D * params[3]


# --------------------------------------------------------------------------- PyClone kernels


@numba.njit(cache=True, inline="always")
def _pyclone_init(params, stat):
    for k in range(stat.shape[0]):
        stat[k] = 0.0


@numba.njit(cache=True, inline="always")
def _pyclone_add(params, stat, x):
    for k in range(stat.shape[0]):
        stat[k] += x[k]


@numba.njit(cache=True, inline="always")
def _pyclone_remove(params, stat, x):
    for k in range(stat.shape[0]):
        stat[k] -= x[k]


@numba.njit(cache=True, inline="always")
def _pyclone_log_marginal(params, stat):
    mx = -np.inf
    for k in range(stat.shape[0]):
        if stat[k] > mx:
            mx = stat[k]
    if mx == -np.inf:
        return -np.inf
    acc = 0.0
    for k in range(stat.shape[0]):
        acc += math.exp(stat[k] - mx)
    return mx + math.log(acc) - params[1]


# --------------------------------------------------------------------------- dispatch


@numba.njit(cache=True, inline="always")
def stat_init(code, params, stat):
    if code == 0:
        _niw_init(params, stat)
    elif code == 1:
        _bb_init(params, stat)
    else:
        _pyclone_init(params, stat)


@numba.njit(cache=True, inline="always")
def stat_add(code, params, stat, x):
    if code == 0:
        _niw_add(params, stat, x)
    elif code == 1:
        _bb_add(params, stat, x)
    else:
        _pyclone_add(params, stat, x)


@numba.njit(cache=True, inline="always")
def stat_remove(code, params, stat, x):
    if code == 0:
        _niw_remove(params, stat, x)
    elif code == 1:
        _bb_remove(params, stat, x)
    else:
        _pyclone_remove(params, stat, x)


@numba.njit(cache=True, inline="always")
def stat_log_marginal(code, params, stat):
    if code == 0:
        return _niw_log_marginal(params, stat)
    elif code == 1:
        return _bb_log_marginal(params, stat)
    return _pyclone_log_marginal(params, stat)


@numba.njit(cache=True)
def stat_log_predictive(code, params, stat, x, scratch):
    """log L(x | block) using ``scratch`` as workspace; ``stat`` is untouched."""
    for k in range(stat.shape[0]):
        scratch[k] = stat[k]
    stat_add(code, params, scratch, x)
    return stat_log_marginal(code, params, scratch) - stat_log_marginal(code, params, stat)


@numba.njit(cache=True)
def build_stat(code, params, stat_size, X, idx):
    stat = np.empty(stat_size)
    stat_init(code, params, stat)
    for i in idx:
        stat_add(code, params, stat, X[i])
    return stat


# --------------------------------------------------------------------------- Python layer


class LikelihoodModel:
    """A conjugate component model.

    ``add``/``remove`` return new statistics (the inputs are not modified).
    The compiled samplers use the same kernels in place.
    """

    code: int = -1
    name: str = ""

    def __init__(self, params: np.ndarray, stat_size: int, data_dim: int):
        self.params = np.ascontiguousarray(params, dtype=np.float64)
        self.params.setflags(write=False)
        self.stat_size = int(stat_size)
        self.data_dim = int(data_dim)

    def _check(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.data_dim,):
            raise ValueError(f"{self.name}: datum must have shape ({self.data_dim},), got {x.shape}")
        return x

    def empty_stat(self) -> np.ndarray:
        stat = np.empty(self.stat_size)
        stat_init(self.code, self.params, stat)
        return stat

    def add(self, stat: np.ndarray, x) -> np.ndarray:
        out = np.array(stat, dtype=np.float64)
        stat_add(self.code, self.params, out, self._check(x))
        return out

    def remove(self, stat: np.ndarray, x) -> np.ndarray:
        out = np.array(stat, dtype=np.float64)
        stat_remove(self.code, self.params, out, self._check(x))
        return out

    def log_marginal(self, stat: np.ndarray) -> float:
        return float(stat_log_marginal(self.code, self.params, np.asarray(stat, dtype=np.float64)))

    def log_predictive(self, stat: np.ndarray, x) -> float:
        stat = np.asarray(stat, dtype=np.float64)
        return float(stat_log_predictive(self.code, self.params, stat, self._check(x), np.empty(self.stat_size)))

    def stat_of(self, X: np.ndarray, idx: Sequence[int] | None = None) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        idx = np.arange(X.shape[0]) if idx is None else np.asarray(list(idx), dtype=np.int64)
        return build_stat(self.code, self.params, self.stat_size, X, idx)

    def log_marginal_of(self, X: np.ndarray, idx: Sequence[int] | None = None) -> float:
        return self.log_marginal(self.stat_of(X, idx))

    def validate_data(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.data_dim:
            raise ValueError(f"{self.name}: data must have shape (T, {self.data_dim}), got {X.shape}")
        return X


class NormalInverseWishart(LikelihoodModel):
    """Multivariate normal with a normal-inverse-Wishart prior on (mean, covariance).

    Defaults follow the usual weak prior ``(nu, r, u, S) = (D + 2, 1, 0, I)``.
    The statistic keeps the Cholesky factor of the scatter matrix so each
    update is a rank-one modification costing O(D^2) and ``|S_m|`` is read
    off the diagonal in O(D).
    """

    code = MODEL_NIW
    name = "niw"

    def __init__(self, D: int, nu0: float | None = None, r0: float = 1.0, u0=None, S0=None):
        D = int(D)
        if D < 1:
            raise ValueError("dimension must be positive")
        nu0 = float(D + 2) if nu0 is None else float(nu0)
        if not nu0 > D - 1:
            raise ValueError(f"nu0 must exceed D - 1 = {D - 1}, got {nu0}")
        if not r0 > 0:
            raise ValueError("r0 must be positive")
        u0 = np.zeros(D) if u0 is None else np.asarray(u0, dtype=np.float64).reshape(D)
        S0 = np.eye(D) if S0 is None else np.asarray(S0, dtype=np.float64).reshape(D, D)
        if not np.allclose(S0, S0.T):
            raise ValueError("S0 must be symmetric")
        try:
            L0 = np.linalg.cholesky(S0)
        except np.linalg.LinAlgError as exc:
            raise ValueError("S0 must be positive definite") from exc
        self.D, self.nu0, self.r0, self.u0, self.S0 = D, nu0, float(r0), u0, S0
        log_det_S0 = 2.0 * float(np.sum(np.log(np.diag(L0))))
        lg0 = float(sum(gammaln(0.5 * (nu0 + 1 - d)) for d in range(1, D + 1)))
        params = np.concatenate([[D, nu0, r0, log_det_S0, lg0, 0.0], u0, L0.ravel()])
        super().__init__(params, 1 + D + D * D, D)

    def unpack(self, stat: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
        """``(m, u_m, L_m)`` with ``L_m L_m^T = S_m``."""
        D = self.D
        return int(stat[0]), stat[1 : 1 + D].copy(), stat[1 + D :].reshape(D, D).copy()

    def scatter(self, stat: np.ndarray) -> np.ndarray:
        _, _, L = self.unpack(stat)
        return L @ L.T

    def batch_posterior(self, Y: np.ndarray) -> tuple[float, float, np.ndarray, np.ndarray]:
        """Posterior ``(nu_m, r_m, u_m, S_m)`` from the closed-form batch formulas."""
        Y = np.asarray(Y, dtype=np.float64).reshape(-1, self.D)
        m = Y.shape[0]
        r_m = self.r0 + m
        u_m = (self.r0 * self.u0 + Y.sum(axis=0)) / r_m
        S_m = self.S0 + Y.T @ Y + self.r0 * np.outer(self.u0, self.u0) - r_m * np.outer(u_m, u_m)
        return self.nu0 + m, r_m, u_m, S_m

    def log_marginal_batch(self, Y: np.ndarray) -> float:
        """O(D^3) from-scratch evaluation of the marginal likelihood."""
        Y = np.asarray(Y, dtype=np.float64).reshape(-1, self.D)
        m = Y.shape[0]
        if m == 0:
            return 0.0
        nu_m, r_m, _, S_m = self.batch_posterior(Y)
        _, logdet_m = np.linalg.slogdet(S_m)
        _, logdet_0 = np.linalg.slogdet(self.S0)
        d = np.arange(1, self.D + 1)
        return float(
            -0.5 * m * self.D * _LOG_PI
            + 0.5 * self.D * (math.log(self.r0) - math.log(r_m))
            + 0.5 * self.nu0 * logdet_0
            - 0.5 * nu_m * logdet_m
            + np.sum(gammaln(0.5 * (nu_m + 1 - d)) - gammaln(0.5 * (self.nu0 + 1 - d)))
        )


class BetaBernoulli(LikelihoodModel):
    """Independent Bernoulli dimensions, each with a shared Beta(a0, b0) prior."""

    code = MODEL_BERNOULLI
    name = "bernoulli"

    def __init__(self, D: int, a0: float = 1.0, b0: float = 1.0):
        D = int(D)
        if D < 1 or not a0 > 0 or not b0 > 0:
            raise ValueError("need D >= 1 and positive Beta parameters")
        self.D, self.a0, self.b0 = D, float(a0), float(b0)
        lbeta0 = float(gammaln(a0) + gammaln(b0) - gammaln(a0 + b0))
        super().__init__(np.array([D, a0, b0, lbeta0]), 1 + D, D)


class PyCloneGrid(LikelihoodModel):
    """Discretised PyClone model: a datum is its log-likelihood grid over M prevalence values."""

    code = MODEL_PYCLONE
    name = "pyclone"

    def __init__(self, M: int):
        M = int(M)
        if M < 2:
            raise ValueError("grid needs at least two points")
        self.M = M
        super().__init__(np.array([M, math.log(M)]), M, M)


def pyclone_log_marginal(stat: np.ndarray) -> float:
    """``log( (1/M) sum_k exp(stat_k) )``; an empty block (zero vector) gives 0."""
    stat = np.asarray(stat, dtype=np.float64)
    return float(logsumexp(stat) - math.log(stat.shape[0]))


# --------------------------------------------------------------------------- PyClone data


@dataclass(frozen=True)
class GenotypeState:
    """A (normal, reference-population, variant-population) genotype triple and its prior weight."""

    normal: str
    reference: str
    variant: str
    weight: float


@dataclass
class PyCloneDatum:
    mutation_id: str
    b_count: int
    d_count: int
    tumour_content: float
    states: list[GenotypeState] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.b_count <= self.d_count:
            raise ValueError(f"{self.mutation_id}: need 0 <= b_count <= d_count")
        if not 0.0 <= self.tumour_content <= 1.0:
            raise ValueError(f"{self.mutation_id}: tumour content must lie in [0, 1]")


def _copy_number(g: str) -> int:
    return len(g)


def _b_fraction(g: str, error_rate: float) -> float:
    c = len(g)
    if c == 0:
        raise ValueError("genotype must contain at least one allele")
    nb = g.count("B")
    if nb == 0:
        return error_rate
    if nb == c:
        return 1.0 - error_rate
    return nb / c


def pyclone_xi(state: GenotypeState, phi: np.ndarray, t: float, error_rate: float = 1e-3) -> np.ndarray:
    """Probability of sampling a B read given genotype state, prevalence ``phi`` and tumour content ``t``."""
    phi = np.asarray(phi, dtype=np.float64)
    cN, cR, cV = (_copy_number(g) for g in (state.normal, state.reference, state.variant))
    mN, mR, mV = (_b_fraction(g, error_rate) for g in (state.normal, state.reference, state.variant))
    num = (1 - t) * cN * mN + t * (1 - phi) * cR * mR + t * phi * cV * mV
    den = (1 - t) * cN + t * (1 - phi) * cR + t * phi * cV
    return num / den


def pyclone_grid(M: int) -> np.ndarray:
    """M equally spaced prevalence values including both endpoints."""
    return np.linspace(0.0, 1.0, int(M))


def pyclone_precompute_xi(
    datum: PyCloneDatum,
    states: Sequence[GenotypeState] | None = None,
    t: float | None = None,
    M: int = 101,
    error_rate: float = 1e-3,
) -> np.ndarray:
    """Per-grid-point log-likelihood of one mutation, summed over its genotype states."""
    states = list(datum.states if states is None else states)
    t = datum.tumour_content if t is None else t
    if not states:
        raise ValueError(f"{datum.mutation_id}: empty genotype-state set")
    w = np.array([s.weight for s in states], dtype=np.float64)
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError(f"{datum.mutation_id}: genotype weights must be nonnegative with positive sum")
    log_w = np.log(w / w.sum())
    grid = pyclone_grid(M)
    terms = np.empty((len(states), grid.shape[0]))
    for k, state in enumerate(states):
        xi = pyclone_xi(state, grid, t, error_rate)
        terms[k] = log_w[k] + binom.logpmf(datum.b_count, datum.d_count, xi)
    return logsumexp(terms, axis=0)


def read_pyclone_file(path: str | Path) -> list[PyCloneDatum]:
    """Read a delimited file with columns mutation_id, b_count, d_count, tumour_content, g_N, g_R, g_V, weight.

    Rows sharing a mutation_id contribute one genotype state each.
    """
    path = Path(path)
    text = path.read_text()
    dialect = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",\t;")
    rows = list(csv.DictReader(text.splitlines(), dialect=dialect))
    required = {"mutation_id", "b_count", "d_count", "tumour_content", "g_N", "g_R", "g_V", "weight"}
    if not rows:
        raise ValueError(f"{path}: no data rows")
    missing = required - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    data: dict[str, PyCloneDatum] = {}
    for row in rows:
        mid = row["mutation_id"]
        if mid not in data:
            data[mid] = PyCloneDatum(mid, int(row["b_count"]), int(row["d_count"]), float(row["tumour_content"]))
        data[mid].states.append(GenotypeState(row["g_N"], row["g_R"], row["g_V"], float(row["weight"])))
    return list(data.values())


def pyclone_matrix(data: Sequence[PyCloneDatum], M: int = 101, error_rate: float = 1e-3) -> np.ndarray:
    """Stack the precomputed grids of all mutations into a (T, M) array."""
    return np.vstack([pyclone_precompute_xi(d, M=M, error_rate=error_rate) for d in data])


def make_model(kind: str, dim: int, **hyper) -> LikelihoodModel:
    """Construct a model by name (``niw``, ``bernoulli``, ``pyclone``)."""
    if kind == "niw":
        return NormalInverseWishart(dim, **hyper)
    if kind == "bernoulli":
        return BetaBernoulli(dim, **hyper)
    if kind == "pyclone":
        return PyCloneGrid(dim)
    raise ValueError(f"unknown model {kind!r}")

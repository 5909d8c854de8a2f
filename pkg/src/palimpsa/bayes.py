"""Variational objective for a single memory row, with analytic gradients.

The objective trades three costs against each other for one output row i:
fitting the new datum (plasticity), staying near the resting prior
(forgetting), and staying near the previous posterior (stability). All
covariance-only terms are collected into one remainder so that `total`
is the exact objective up to an additive constant that does not depend
on the mean.

Closed-form facts used by the tests:
  precision' = alpha * prec_prev + (1 - alpha) * I_prior * I + beta k k^T
  mean'      = precision'^{-1} (alpha * prec_prev mu_prev + beta v k)
The importance recurrence is the diagonal specialization: when the data
coupling k k^T is diagonal (one-hot k, or d_k = 1) the two coincide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError
from .types import DualState, HeadParams

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianDiag:
    """Axis-aligned Gaussian: mean and per-coordinate variance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "var", np.asarray(self.var, dtype=np.float64))
        if self.mean.ndim != 1 or self.var.shape != self.mean.shape:
            raise DomainError("mean and var must be matching 1-d arrays")
        if not np.isfinite(self.mean).all() or not np.isfinite(self.var).all():
            raise DomainError("mean/var must be finite")
        if np.any(self.var <= 0.0):
            raise DomainError("var must be > 0 elementwise")


@dataclass(frozen=True)
class GaussianFull:
    """General Gaussian with a symmetric positive definite covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=np.float64))
        if self.mean.ndim != 1 or self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise DomainError("cov must be (d, d) matching mean")
        if not np.isfinite(self.mean).all() or not np.isfinite(self.cov).all():
            raise DomainError("mean/cov must be finite")
        if not np.allclose(self.cov, self.cov.T, atol=1e-12, rtol=0.0):
            raise DomainError("cov must be symmetric within 1e-12")
        try:
            np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as e:
            raise DomainError(f"cov is not positive definite: {e}") from e


@dataclass(frozen=True)
class Datum:
    """One observation routed to a single output row: key, value row, rate."""

    k: np.ndarray
    v_i: float
    beta_i: float

    def __post_init__(self):
        object.__setattr__(self, "k", np.asarray(self.k, dtype=np.float64))
        if self.k.ndim != 1 or not np.isfinite(self.k).all():
            raise DomainError("k must be a finite 1-d array")
        if not (np.isfinite(self.v_i) and np.isfinite(self.beta_i)):
            raise DomainError("v_i and beta_i must be finite")
        if self.beta_i < 0.0:
            raise DomainError("beta_i must be >= 0")


@dataclass(frozen=True)
class FreeEnergyTerms:
    plasticity: float
    forgetting: float
    stability: float
    cov_const: float
    total: float


# ---------- helpers over either Gaussian form ----------


def _mean_cov(g) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(g, GaussianDiag):
        return g.mean, np.diag(g.var)
    if isinstance(g, GaussianFull):
        return g.mean, g.cov
    raise DomainError(f"expected GaussianDiag or GaussianFull, got {type(g).__name__}")


def _prec_of(g) -> np.ndarray:
    if isinstance(g, GaussianDiag):
        return np.diag(1.0 / g.var)
    if isinstance(g, GaussianFull):
        return np.linalg.inv(g.cov)  # PD already checked at construction
    raise DomainError(f"expected GaussianDiag or GaussianFull, got {type(g).__name__}")


def _chol(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise DomainError(f"covariance is not positive definite: {e}") from e


def _logdet(cov: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(_chol(cov)))))


def _as_cov(sigma) -> np.ndarray:
    """Covariance part: a 1-d array of variances or a full matrix."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 1:
        if np.any(sigma <= 0.0):
            raise DomainError("variances must be > 0")
        return np.diag(sigma)
    if sigma.ndim == 2:
        return GaussianFull(mean=np.zeros(sigma.shape[0]), cov=sigma).cov
    raise DomainError("sigma must be a variance vector or a covariance matrix")


# ---------- Gaussian identities ----------


def gaussian_kl(p, q) -> float:
    """KL(p || q) for Gaussians; non-negative, zero iff p == q."""
    mu1, cov1 = _mean_cov(p)
    mu2, cov2 = _mean_cov(q)
    d = mu1.shape[0]
    chol2 = _chol(cov2)
    # tr(cov2^{-1} cov1) without forming the inverse
    tr = float(np.trace(np.linalg.solve(chol2.T, np.linalg.solve(chol2, cov1))))
    diff = mu2 - mu1
    w = np.linalg.solve(chol2, diff)
    quad = float(w @ w)
    return 0.5 * (tr + quad - d + _logdet(cov2) - _logdet(cov1))


def gaussian_entropy(p) -> float:
    mu, cov = _mean_cov(p)
    d = mu.shape[0]
    return 0.5 * d * math.log(2.0 * math.pi * math.e) + 0.5 * _logdet(cov)


def gaussian_cross_entropy(p, q) -> float:
    """H(p, q) = -E_p[log q], computed in closed form.

    Equals gaussian_entropy(p) + gaussian_kl(p, q); the dual-path agreement
    is exercised by the tests.
    """
    mu1, cov1 = _mean_cov(p)
    mu2, cov2 = _mean_cov(q)
    d = mu1.shape[0]
    chol2 = _chol(cov2)
    tr = float(np.trace(np.linalg.solve(chol2.T, np.linalg.solve(chol2, cov1))))
    diff = mu2 - mu1
    w = np.linalg.solve(chol2, diff)
    quad = float(w @ w)
    return 0.5 * (tr + quad + d * LOG_2PI + _logdet(cov2))


# ---------- the objective ----------


def _new_precision(prev, datum: Datum, alpha: float, hp: HeadParams) -> np.ndarray:
    prec_prev = _prec_of(prev)
    d = prec_prev.shape[0]
    return alpha * prec_prev + (1.0 - alpha) * hp.prior_precision * np.eye(d) + datum.beta_i * np.outer(datum.k, datum.k)


def free_energy(mu, sigma, prev, datum: Datum, alpha: float, hp: HeadParams) -> FreeEnergyTerms:
    """Evaluate the row objective at mean `mu` and covariance part `sigma`.

    sigma is a variance vector (diagonal family) or a full covariance.
    alpha in (0, 1]; alpha == 1 switches the forgetting term off.
    """
    if not (0.0 < alpha <= 1.0):
        raise DomainError(f"alpha must be in (0, 1], got {alpha}")
    mu = np.asarray(mu, dtype=np.float64)
    cov = _as_cov(sigma)
    mu_prev, _ = _mean_cov(prev)
    prec_prev = _prec_of(prev)
    d = mu.shape[0]

    resid = float(mu @ datum.k - datum.v_i)
    plasticity = 0.5 * datum.beta_i * resid * resid
    forgetting = 0.5 * (1.0 - alpha) * hp.prior_precision * float(mu @ mu)
    diff = mu_prev - mu
    stability = 0.5 * alpha * float(diff @ (prec_prev @ diff))

    p_new = alpha * prec_prev + (1.0 - alpha) * hp.prior_precision * np.eye(d) + datum.beta_i * np.outer(datum.k, datum.k)
    logdet_prev = _logdet_prec_inv(prev)
    cov_const = 0.5 * (
        float(np.trace(p_new @ cov))
        - _logdet(cov)
        - d
        + alpha * logdet_prev
        - (1.0 - alpha) * d * math.log(hp.prior_precision)
    )
    total = plasticity + forgetting + stability + cov_const
    return FreeEnergyTerms(
        plasticity=plasticity, forgetting=forgetting, stability=stability, cov_const=cov_const, total=total
    )


def _logdet_prec_inv(prev) -> float:
    """log det of prev's covariance, computed from its native form."""
    if isinstance(prev, GaussianDiag):
        return float(np.sum(np.log(prev.var)))
    _, cov = _mean_cov(prev)
    return _logdet(cov)


def grad_free_energy_mu(mu, prev, datum: Datum, alpha: float, hp: HeadParams) -> np.ndarray:
    """d(total)/d(mu): alpha prec_prev (mu - mu_prev) + (1-alpha) I_prior mu
    + beta (k k^T mu - v k)."""
    if not (0.0 < alpha <= 1.0):
        raise DomainError(f"alpha must be in (0, 1], got {alpha}")
    mu = np.asarray(mu, dtype=np.float64)
    mu_prev, _ = _mean_cov(prev)
    prec_prev = _prec_of(prev)
    return (
        alpha * (prec_prev @ (mu - mu_prev))
        + (1.0 - alpha) * hp.prior_precision * mu
        + datum.beta_i * (datum.k * float(datum.k @ mu) - datum.v_i * datum.k)
    )


def grad_free_energy_cov(A_factor, prev, datum: Datum, alpha: float, hp: HeadParams) -> np.ndarray:
    """d(total)/dA for cov = A A^T: P_new A - A^{-T}.

    Vanishes at any factor of the closed-form covariance. For a diagonal
    family the tangent directions are diagonal, so stationarity there means
    the gradient's diagonal vanishes; its diagonal zero is at 1/sqrt of the
    importance-row precision.
    """
    if not (0.0 < alpha <= 1.0):
        raise DomainError(f"alpha must be in (0, 1], got {alpha}")
    A = np.asarray(A_factor, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("A_factor must be square")
    try:
        A_inv_t = np.linalg.inv(A).T
    except np.linalg.LinAlgError as e:
        raise DomainError(f"A_factor is singular: {e}") from e
    return _new_precision(prev, datum, alpha, hp) @ A - A_inv_t


def closed_form_row_update(prev, datum: Datum, alpha: float, hp: HeadParams) -> GaussianFull:
    """Exact single-step posterior for one row: solve with the new precision."""
    mu_prev, _ = _mean_cov(prev)
    prec_prev = _prec_of(prev)
    p_new = _new_precision(prev, datum, alpha, hp)
    rhs = alpha * (prec_prev @ mu_prev) + datum.beta_i * datum.v_i * datum.k
    cov = np.linalg.inv(p_new)
    cov = 0.5 * (cov + cov.T)
    return GaussianFull(mean=np.linalg.solve(p_new, rhs), cov=cov)


# ---------- direct weighted-posterior accumulation ----------


def weighted_posterior_oracle(data: Sequence[Datum], alphas: Sequence[float], hp: HeadParams) -> GaussianDiag:
    """Diagonal posterior for one row from a rest start, by direct summation.

    Every discount weight w_t = prod_{s>t} alpha_s is formed on its own;
    no intermediate posterior is ever materialized, which makes this an
    independent check of the sequential importance recurrence.
    """
    if len(data) != len(alphas):
        raise DomainError("data and alphas must have equal length")
    for a in alphas:
        if not (0.0 < a <= 1.0):
            raise DomainError(f"alphas must lie in (0, 1], got {a}")
    d_k = hp.d_k if not data else data[0].k.shape[0]
    T = len(data)
    precision = math.prod(alphas) * hp.prior_precision * np.ones(d_k)
    weighted_mean = np.zeros(d_k)
    for t in range(T):
        w_t = math.prod(alphas[t + 1 :])
        precision = precision + w_t * ((1.0 - alphas[t]) * hp.prior_precision + data[t].beta_i * data[t].k ** 2)
        weighted_mean = weighted_mean + w_t * data[t].beta_i * data[t].v_i * data[t].k
    return GaussianDiag(mean=weighted_mean / precision, var=1.0 / precision)


def dual_state_row(state: DualState, row: int) -> GaussianDiag:
    """Row `row` of a dual state viewed as a diagonal posterior."""
    return GaussianDiag(mean=state.mu[row], var=1.0 / state.imp[row])

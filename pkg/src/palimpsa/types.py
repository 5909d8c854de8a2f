"""Shared value types for the fast-weight recurrences.

All arrays are float64 C-contiguous numpy arrays unless a caller opts into
another dtype. Validation is done once at construction; the step kernels
assume validated inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DomainError, NumericError, RuleContractError


class RuleKind(Enum):
    """Which per-token state update a scan should apply."""

    PALIMPSA = "palimpsa"
    MAMBA2_LIMIT = "mamba2-limit"
    DELTANET = "deltanet"
    GATED_DELTANET = "gated-deltanet"
    LONGHORN = "longhorn"
    MESA = "mesa"


def _as_f64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class HeadParams:
    """Static per-head parameters.

    d_k / d_v: key and value dimensions.
    decay_rate: A >= 0, the rate in alpha = exp(-A * d).
    prior_precision: I_prior > 0, precision of the zero-mean resting prior.
    """

    d_k: int
    d_v: int
    decay_rate: float = 0.0
    prior_precision: float = 1.0

    def __post_init__(self):
        if self.d_k < 1 or self.d_v < 1:
            raise DomainError(f"dimensions must be >= 1, got d_k={self.d_k} d_v={self.d_v}")
        if not (np.isfinite(self.decay_rate) and self.decay_rate >= 0.0):
            raise DomainError(f"decay_rate must be finite and >= 0, got {self.decay_rate}")
        if not (np.isfinite(self.prior_precision) and self.prior_precision > 0.0):
            raise DomainError(f"prior_precision must be finite and > 0, got {self.prior_precision}")


@dataclass(frozen=True)
class StepInput:
    """One token's contribution to a head: key, value, query, beta, step size.

    beta is always a length-d_v vector of per-row importances. Rules defined
    with a scalar learning rate read it through `scalar_beta`, which requires
    every entry to be identical.
    """

    k: np.ndarray
    v: np.ndarray
    q: np.ndarray
    beta: np.ndarray
    d: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "k", _as_f64(self.k, "k"))
        object.__setattr__(self, "v", _as_f64(self.v, "v"))
        object.__setattr__(self, "q", _as_f64(self.q, "q"))
        object.__setattr__(self, "beta", _as_f64(self.beta, "beta"))
        if self.k.ndim != 1 or self.q.ndim != 1 or self.v.ndim != 1 or self.beta.ndim != 1:
            raise RuleContractError("k, v, q, beta must be 1-d arrays")
        if self.k.shape != self.q.shape:
            raise RuleContractError(f"k and q must share a shape, got {self.k.shape} vs {self.q.shape}")
        if self.beta.shape != self.v.shape:
            raise RuleContractError(f"beta must have v's shape, got {self.beta.shape} vs {self.v.shape}")
        if np.any(self.beta < 0.0):
            raise RuleContractError("beta entries must be >= 0")
        if not (np.isfinite(self.d) and self.d >= 0.0):
            raise DomainError(f"step size d must be finite and >= 0, got {self.d}")

    @property
    def scalar_beta(self) -> float:
        """Single learning rate for scalar-beta rules; rejects mixed vectors."""
        b0 = float(self.beta[0])
        if np.any(self.beta != b0):
            raise RuleContractError("this rule needs a scalar beta; got a vector with unequal entries")
        return b0

    def check_dims(self, hp: HeadParams) -> None:
        if self.k.shape[0] != hp.d_k or self.v.shape[0] != hp.d_v:
            raise RuleContractError(
                f"input dims ({self.k.shape[0]}, {self.v.shape[0]}) do not match head ({hp.d_k}, {hp.d_v})"
            )


@dataclass(frozen=True)
class DualState:
    """Mean/importance pair: mu and imp are both (d_v, d_k).

    imp holds the per-entry precision of the memory; it must stay strictly
    positive and, for a state evolved from rest, never drops below the prior
    precision.
    """

    mu: np.ndarray
    imp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_f64(self.mu, "mu"))
        object.__setattr__(self, "imp", _as_f64(self.imp, "imp"))
        if self.mu.ndim != 2 or self.imp.shape != self.mu.shape:
            raise RuleContractError(f"mu and imp must be matching 2-d arrays, got {self.mu.shape} vs {self.imp.shape}")
        if np.any(self.imp <= 0.0):
            raise RuleContractError("imp entries must be > 0")

    @staticmethod
    def rest(hp: HeadParams) -> "DualState":
        """State of a head that has seen nothing: zero mean, prior precision."""
        return DualState(
            mu=np.zeros((hp.d_v, hp.d_k)),
            imp=np.full((hp.d_v, hp.d_k), hp.prior_precision),
        )


@dataclass(frozen=True)
class MesaState:
    """Mean plus a full (shared) precision matrix for the Mesa rule.

    mu is (d_v, d_k); prec is (d_k, d_k), symmetric positive definite.
    Positive definiteness is checked by attempting a Cholesky factorization.
    """

    mu: np.ndarray
    prec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_f64(self.mu, "mu"))
        object.__setattr__(self, "prec", _as_f64(self.prec, "prec"))
        if self.mu.ndim != 2 or self.prec.ndim != 2:
            raise RuleContractError("mu and prec must be 2-d arrays")
        d_k = self.mu.shape[1]
        if self.prec.shape != (d_k, d_k):
            raise RuleContractError(f"prec must be ({d_k}, {d_k}), got {self.prec.shape}")
        if not np.allclose(self.prec, self.prec.T, atol=1e-12, rtol=0.0):
            raise RuleContractError("prec must be symmetric within 1e-12")
        try:
            np.linalg.cholesky(self.prec)
        except np.linalg.LinAlgError as e:
            raise NumericError(f"prec is not positive definite: {e}") from e

    @staticmethod
    def rest(hp: HeadParams) -> "MesaState":
        return MesaState(
            mu=np.zeros((hp.d_v, hp.d_k)),
            prec=np.eye(hp.d_k) * hp.prior_precision,
        )


@dataclass
class ScanOutputs:
    """Result of a sequential scan: per-token readouts plus the final state.

    trace (opt-in) holds every intermediate state and costs O(L) state
    copies; leave it off for long sequences.
    """

    outputs: np.ndarray  # (L, d_v)
    final: object  # DualState | MesaState | np.ndarray, matching the rule
    trace: list = field(default_factory=list)

"""Single-token state update rules and the reference sequential scan.

Every rule is a pure function from (state, input, head params) to a new
state. The dual-state rule tracks a per-entry importance (precision) next
to the mean; the others keep whatever state their published form uses.
Keys and queries arrive as-is: any normalization is the caller's job.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DomainError, NumericError, RuleContractError
from .types import DualState, HeadParams, MesaState, RuleKind, ScanOutputs, StepInput

# Sentinel for the no-forgetting memory window (alpha == 1).
INFINITE_WINDOW = math.inf


def alpha_from_step(decay_rate: float, d: float) -> float:
    """Retention factor alpha = exp(-decay_rate * d); both arguments >= 0.

    alpha lies in (0, 1]; alpha == 1 means nothing is ever forgotten.
    """
    if not (np.isfinite(decay_rate) and decay_rate >= 0.0):
        raise DomainError(f"decay_rate must be finite and >= 0, got {decay_rate}")
    if not (np.isfinite(d) and d >= 0.0):
        raise DomainError(f"step size d must be finite and >= 0, got {d}")
    return math.exp(-decay_rate * d)


def memory_window(alpha: float) -> float:
    """Effective window N = 1 / (1 - alpha); INFINITE_WINDOW at alpha == 1."""
    if not (0.0 < alpha <= 1.0):
        raise DomainError(f"alpha must be in (0, 1], got {alpha}")
    if alpha == 1.0:
        return INFINITE_WINDOW
    return 1.0 / (1.0 - alpha)


def readout(mu: np.ndarray, q: np.ndarray) -> np.ndarray:
    """y = mu q, the memory applied to a query. Linear in both arguments."""
    mu = np.asarray(mu, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if mu.ndim != 2 or q.ndim != 1 or mu.shape[1] != q.shape[0]:
        raise RuleContractError(f"readout needs (d_v, d_k) x (d_k,), got {mu.shape} x {q.shape}")
    return mu @ q


# ---------- dual-state rules ----------


def palimpsa_step(state: DualState, inp: StepInput, hp: HeadParams) -> DualState:
    """Importance-weighted update of (mu, imp).

    imp' = alpha * imp + (1 - alpha) * I_prior + beta (x) k^2
    mu'  = alpha * (imp / imp') * mu + ((beta * v) (x) k) / imp'

    New evidence is blended against the old mean in proportion to accumulated
    importance; forgetting relaxes the importance toward the prior precision.
    """
    inp.check_dims(hp)
    alpha = alpha_from_step(hp.decay_rate, inp.d)
    imp_new = alpha * state.imp + (1.0 - alpha) * hp.prior_precision + np.outer(inp.beta, inp.k**2)
    mu_new = alpha * (state.imp / imp_new) * state.mu + np.outer(inp.beta * inp.v, inp.k) / imp_new
    if not (np.isfinite(imp_new).all() and np.isfinite(mu_new).all()):
        raise NumericError("non-finite state after update")
    return DualState(mu=mu_new, imp=imp_new)


def mamba2_limit_step(state: DualState, inp: StepInput, hp: HeadParams) -> DualState:
    """Vanishing-importance limit: imp pinned at the prior, mu decays linearly.

    mu' = alpha * mu + ((beta * v) (x) k) / I_prior. imp is returned unchanged.
    """
    inp.check_dims(hp)
    alpha = alpha_from_step(hp.decay_rate, inp.d)
    mu_new = alpha * state.mu + np.outer(inp.beta * inp.v, inp.k) / hp.prior_precision
    if not np.isfinite(mu_new).all():
        raise NumericError("non-finite state after update")
    return DualState(mu=mu_new, imp=state.imp)


# ---------- matrix-state rules (scalar beta) ----------


def deltanet_step(mu: np.ndarray, inp: StepInput) -> np.ndarray:
    """Delta rule without forgetting: mu' = mu (I - beta k k^T) + beta v k^T."""
    mu = np.asarray(mu, dtype=np.float64)
    beta = inp.scalar_beta
    proj = np.eye(inp.k.shape[0]) - beta * np.outer(inp.k, inp.k)
    mu_new = mu @ proj + beta * np.outer(inp.v, inp.k)
    if not np.isfinite(mu_new).all():
        raise NumericError("non-finite state after update")
    return mu_new


def gated_deltanet_step(mu: np.ndarray, inp: StepInput, hp: HeadParams) -> np.ndarray:
    """Delta rule with a decay gate: mu' = mu (alpha (I - beta k k^T)) + beta v k^T.

    At alpha == 1 this reduces exactly to deltanet_step.
    """
    mu = np.asarray(mu, dtype=np.float64)
    beta = inp.scalar_beta
    alpha = alpha_from_step(hp.decay_rate, inp.d)
    proj = alpha * (np.eye(inp.k.shape[0]) - beta * np.outer(inp.k, inp.k))
    mu_new = mu @ proj + beta * np.outer(inp.v, inp.k)
    if not np.isfinite(mu_new).all():
        raise NumericError("non-finite state after update")
    return mu_new


def longhorn_step(mu: np.ndarray, inp: StepInput) -> np.ndarray:
    """Per-row closed-form online update with an implicit step size.

    Row i: mu'_i = (1 - beta_i k^2 / (1 + beta_i k.k)) * mu_i
                   + (beta_i v_i / (1 + beta_i k.k)) * k

    beta may differ per row; the step size d is ignored (no forgetting).
    """
    mu = np.asarray(mu, dtype=np.float64)
    ksq = float(inp.k @ inp.k)
    denom = 1.0 + inp.beta * ksq  # (d_v,)
    shrink = 1.0 - np.outer(inp.beta, inp.k**2) / denom[:, None]
    mu_new = shrink * mu + np.outer(inp.beta * inp.v / denom, inp.k)
    if not np.isfinite(mu_new).all():
        raise NumericError("non-finite state after update")
    return mu_new


# ---------- full-precision rule ----------


def mesa_step(state: MesaState, inp: StepInput, hp: HeadParams) -> MesaState:
    """Shared full-precision update with a direct solve for the new mean.

    prec' = alpha * prec + (1 - alpha) * I_prior * I + beta k k^T
    mu'_i solves  prec' mu'_i = alpha * prec mu_i + beta v_i k   (batched rows)
    """
    inp.check_dims(hp)
    beta = inp.scalar_beta
    alpha = alpha_from_step(hp.decay_rate, inp.d)
    d_k = hp.d_k
    prec_new = alpha * state.prec + (1.0 - alpha) * hp.prior_precision * np.eye(d_k) + beta * np.outer(inp.k, inp.k)
    prec_new = 0.5 * (prec_new + prec_new.T)  # keep symmetry exact under roundoff
    # rhs columns are the per-row right-hand sides: (d_k, d_v)
    rhs = alpha * (state.prec @ state.mu.T) + beta * np.outer(inp.k, inp.v)
    try:
        np.linalg.cholesky(prec_new)
        mu_new = np.linalg.solve(prec_new, rhs).T
    except np.linalg.LinAlgError as e:
        raise NumericError(f"precision update lost positive definiteness: {e}") from e
    if not np.isfinite(mu_new).all():
        raise NumericError("non-finite state after update")
    return MesaState(mu=mu_new, prec=prec_new)


# ---------- reference scan ----------

_DUAL_RULES = (RuleKind.PALIMPSA, RuleKind.MAMBA2_LIMIT)
_MATRIX_RULES = (RuleKind.DELTANET, RuleKind.GATED_DELTANET, RuleKind.LONGHORN)


def _state_mu(state) -> np.ndarray:
    if isinstance(state, (DualState, MesaState)):
        return state.mu
    return state


def sequential_scan(
    rule: RuleKind,
    init,
    inputs: Sequence[StepInput],
    hp: HeadParams,
    keep_trace: bool = False,
) -> ScanOutputs:
    """Left-to-right reference evaluation of a rule over a token sequence.

    Returns per-token readouts y_t = mu_t q_t as an (L, d_v) array plus the
    final state. Error locations are reported by step index. keep_trace
    stores every intermediate state (O(L) memory).
    """
    if rule in _DUAL_RULES and not isinstance(init, DualState):
        raise RuleContractError(f"{rule.value} needs a DualState initial state")
    if rule is RuleKind.MESA and not isinstance(init, MesaState):
        raise RuleContractError("mesa needs a MesaState initial state")
    if rule in _MATRIX_RULES:
        init = np.asarray(init, dtype=np.float64)
        if init.ndim != 2:
            raise RuleContractError(f"{rule.value} needs a (d_v, d_k) matrix state")

    state = init
    outs = np.zeros((len(inputs), hp.d_v))
    trace: list = []
    for t, inp in enumerate(inputs):
        try:
            if rule is RuleKind.PALIMPSA:
                state = palimpsa_step(state, inp, hp)
            elif rule is RuleKind.MAMBA2_LIMIT:
                state = mamba2_limit_step(state, inp, hp)
            elif rule is RuleKind.DELTANET:
                state = deltanet_step(state, inp)
            elif rule is RuleKind.GATED_DELTANET:
                state = gated_deltanet_step(state, inp, hp)
            elif rule is RuleKind.LONGHORN:
                state = longhorn_step(state, inp)
            elif rule is RuleKind.MESA:
                state = mesa_step(state, inp, hp)
            else:
                raise RuleContractError(f"unknown rule {rule!r}")
        except NumericError as e:
            raise NumericError(str(e), where=f"step {t}") from e
        outs[t] = readout(_state_mu(state), inp.q)
        if keep_trace:
            trace.append(state)
    return ScanOutputs(outputs=outs, final=state, trace=trace)

"""Hand-rolled reverse-mode gradients for the dual-state recurrence.

forward_with_tape keeps only each chunk's carry-in state. backward walks
chunks from last to first, rebuilding a chunk's token states from its
checkpoint before running the adjoint sweep, so memory stays at
O(chunks + chunk_len) states regardless of sequence length. The sweep
differentiates the readout through both the mean and the importance
(quotient rule through the importance in the decayed carry and in the
write injection), and routes decay-gate gradients to both the per-step
distance and the per-head rate.

Supported rules: the dual-state update and its frozen-importance limit.
The full-precision solve rule is a verification path with no backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import DomainError, NumericError, RuleContractError
from .scan import ChunkPlan, _chunk_bounds, chunked_forward, pack_inputs, state_to_element
from .types import DualState, HeadParams, RuleKind, StepInput
from .rules import mamba2_limit_step, palimpsa_step

_SUPPORTED = (RuleKind.PALIMPSA, RuleKind.MAMBA2_LIMIT)

GROUPS = ("k", "v", "q", "beta", "d", "A", "I_prior", "init_mu", "init_imp")


@dataclass(frozen=True)
class StateGrads:
    """Gradient with respect to a DualState; same shapes, unconstrained values."""

    mu: np.ndarray
    imp: np.ndarray


@dataclass(frozen=True)
class GradBundle:
    """Gradients for every forward input. Shapes mirror the packed inputs."""

    d_k_in: np.ndarray  # (L, d_k)
    d_v_in: np.ndarray  # (L, d_v)
    d_q_in: np.ndarray  # (L, d_k)
    d_beta: np.ndarray  # (L, d_v)
    d_d: np.ndarray  # (L,)
    d_A: float
    d_I_prior: float
    d_init: StateGrads

    def __post_init__(self):
        arrays = (self.d_k_in, self.d_v_in, self.d_q_in, self.d_beta, self.d_d, self.d_init.mu, self.d_init.imp)
        finite = all(np.isfinite(a).all() for a in arrays)
        if not finite or not math.isfinite(self.d_A) or not math.isfinite(self.d_I_prior):
            raise NumericError("non-finite gradient bundle")

    def groups(self) -> dict[str, np.ndarray]:
        """Flat array per parameter group, for comparisons and reports."""
        return {
            "k": self.d_k_in,
            "v": self.d_v_in,
            "q": self.d_q_in,
            "beta": self.d_beta,
            "d": self.d_d,
            "A": np.array([self.d_A]),
            "I_prior": np.array([self.d_I_prior]),
            "init_mu": self.d_init.mu,
            "init_imp": self.d_init.imp,
        }


@dataclass(frozen=True)
class CheckpointStore:
    """Chunk carry-in states retained by a taped forward pass.

    checkpoints[0] is always the initial state; checkpoints[c] is the state
    entering chunk c, enough to rebuild that chunk's internal trace.
    """

    rule: RuleKind
    plan: ChunkPlan
    checkpoints: list
    n_tokens: int


def forward_with_tape(
    inputs: Sequence[StepInput],
    init: DualState,
    hp: HeadParams,
    plan: ChunkPlan | None = None,
    rule: RuleKind = RuleKind.PALIMPSA,
):
    """Chunked forward pass that retains checkpoints for a later backward.

    For the dual-state rule the outputs are the chunked evaluator's,
    bit for bit; the tape is just its checkpoint list.
    """
    plan = plan or ChunkPlan()
    if rule not in _SUPPORTED:
        raise RuleContractError(f"no backward for rule {rule.value!r}")
    if not plan.retain_checkpoints:
        plan = replace(plan, retain_checkpoints=True)
    if rule is RuleKind.PALIMPSA:
        res = chunked_forward(inputs, init, hp, plan)
        return res.outputs, CheckpointStore(rule=rule, plan=plan, checkpoints=res.checkpoints, n_tokens=len(inputs))

    # Frozen-importance limit: a linear recurrence on the mean alone.
    L = len(inputs)
    K, V, Q, B, D = pack_inputs(inputs, hp)
    outputs = np.zeros((L, hp.d_v))
    mu = init.mu.copy()
    checkpoints = [init]
    for ci, (lo, hi) in enumerate(_chunk_bounds(L, plan.chunk_len)):
        if ci > 0:
            checkpoints.append(DualState(mu=mu.copy(), imp=init.imp.copy()))
        for t in range(lo, hi):
            al = math.exp(-hp.decay_rate * D[t])
            mu = al * mu + np.outer(B[t] * V[t], K[t]) / hp.prior_precision
            outputs[t] = mu @ Q[t]
        if not np.isfinite(outputs[lo:hi]).all():
            raise NumericError("non-finite readout", where=f"chunk {ci}")
    return outputs, CheckpointStore(rule=rule, plan=plan, checkpoints=checkpoints, n_tokens=L)


def recompute_chunk(store: CheckpointStore, chunk_index: int, inputs: Sequence[StepInput], hp: HeadParams):
    """Rebuild one chunk's per-token states from its checkpoint."""
    bounds = _chunk_bounds(store.n_tokens, store.plan.chunk_len)
    lo, hi = bounds[chunk_index]
    step = palimpsa_step if store.rule is RuleKind.PALIMPSA else mamba2_limit_step
    state = store.checkpoints[chunk_index]
    states = []
    for t in range(lo, hi):
        state = step(state, inputs[t], hp)
        states.append(state)
    return states


def backward(
    store: CheckpointStore,
    upstream: np.ndarray,
    inputs: Sequence[StepInput],
    hp: HeadParams,
) -> GradBundle:
    """Exact gradients of sum_t <upstream_t, y_t> for every forward input.

    The sweep is serial from the last chunk to the first; within a chunk
    the token states are recomputed forward from the checkpoint, then the
    adjoint runs right to left. Accumulation order is fixed, so results
    are deterministic.
    """
    L = store.n_tokens
    if len(inputs) != L:
        raise DomainError(f"inputs length {len(inputs)} does not match taped length {L}")
    G = np.asarray(upstream, dtype=np.float64)
    if G.shape != (L, hp.d_v):
        raise DomainError(f"upstream shape {G.shape} does not match outputs shape ({L}, {hp.d_v})")

    K, V, Q, B, D = pack_inputs(inputs, hp)
    A = hp.decay_rate
    Ip = hp.prior_precision
    init = store.checkpoints[0]

    d_K = np.zeros_like(K)
    d_V = np.zeros_like(V)
    d_Q = np.zeros_like(Q)
    d_B = np.zeros_like(B)
    d_D = np.zeros_like(D)
    d_A = 0.0
    d_Ip = 0.0
    Gm = np.zeros((hp.d_v, hp.d_k))
    Gi = np.zeros((hp.d_v, hp.d_k))

    bounds = _chunk_bounds(L, store.plan.chunk_len) if L else []
    palimpsa = store.rule is RuleKind.PALIMPSA

    for ci in range(len(bounds) - 1, -1, -1):
        lo, hi = bounds[ci]
        C = hi - lo
        ck = store.checkpoints[ci]
        als = np.exp(-A * D[lo:hi])

        if palimpsa:
            carry = state_to_element(ck, hp)
            M_run, I_run = carry.M, carry.Ibar
            Ms = np.empty((C, hp.d_v, hp.d_k))
            Is = np.empty((C, hp.d_v, hp.d_k))
            for j in range(C):
                t = lo + j
                M_run = als[j] * M_run + np.outer(B[t] * V[t], K[t])
                I_run = als[j] * I_run + np.outer(B[t], K[t] ** 2)
                Ms[j] = M_run
                Is[j] = I_run
            for j in range(C - 1, -1, -1):
                t = lo + j
                imp = Is[j] + Ip
                mu = Ms[j] / imp
                Gmu = np.outer(G[t], Q[t])
                d_Q[t] = mu.T @ G[t]
                Gm = Gm + Gmu / imp
                gimp = -(Gmu * mu) / imp
                Gi = Gi + gimp
                d_Ip += gimp.sum()
                if j > 0:
                    Mp, Ibp = Ms[j - 1], Is[j - 1]
                else:
                    Mp, Ibp = carry.M, carry.Ibar
                ga = float((Gm * Mp).sum() + (Gi * Ibp).sum())
                gk = Gm @ K[t]
                d_B[t] += gk * V[t] + Gi @ (K[t] ** 2)
                d_V[t] += gk * B[t]
                d_K[t] += Gm.T @ (B[t] * V[t]) + 2.0 * K[t] * (Gi.T @ B[t])
                d_D[t] += ga * (-A * als[j])
                d_A += ga * (-D[t] * als[j])
                Gm = als[j] * Gm
                Gi = als[j] * Gi
                if not (np.isfinite(Gm).all() and np.isfinite(Gi).all()):
                    raise NumericError("non-finite adjoint", where=f"step {t}")
        else:
            mus = np.empty((C, hp.d_v, hp.d_k))
            mu_run = ck.mu
            for j in range(C):
                t = lo + j
                mu_run = als[j] * mu_run + np.outer(B[t] * V[t], K[t]) / Ip
                mus[j] = mu_run
            for j in range(C - 1, -1, -1):
                t = lo + j
                Gm = Gm + np.outer(G[t], Q[t])
                d_Q[t] = mus[j].T @ G[t]
                Mp = mus[j - 1] if j > 0 else ck.mu
                ga = float((Gm * Mp).sum())
                gk = Gm @ K[t]
                d_B[t] += gk * V[t] / Ip
                d_V[t] += gk * B[t] / Ip
                d_K[t] += Gm.T @ (B[t] * V[t]) / Ip
                d_Ip -= float((Gm * np.outer(B[t] * V[t], K[t])).sum()) / Ip**2
                d_D[t] += ga * (-A * als[j])
                d_A += ga * (-D[t] * als[j])
                Gm = als[j] * Gm
                if not np.isfinite(Gm).all():
                    raise NumericError("non-finite adjoint", where=f"step {t}")

    if palimpsa:
        # Initial state entered the scan as (imp0 * mu0, imp0 - I_prior).
        d_init = StateGrads(mu=Gm * init.imp, imp=Gm * init.mu + Gi)
        d_Ip -= Gi.sum()
    else:
        d_init = StateGrads(mu=Gm.copy(), imp=np.zeros_like(init.imp))

    return GradBundle(
        d_k_in=d_K,
        d_v_in=d_V,
        d_q_in=d_Q,
        d_beta=d_B,
        d_d=d_D,
        d_A=float(d_A),
        d_I_prior=float(d_Ip),
        d_init=d_init,
    )


def _loss_raw(K, V, Q, B, D, A, Ip, mu0, imp0, upstream, rule: RuleKind) -> float:
    """Scalar loss sum_t <upstream_t, y_t> evaluated from raw arrays.

    Finite-difference target: probes may step a hair outside the validated
    domain (beta or d slightly below zero), so this path skips the input
    types entirely and applies the update formulas directly.
    """
    mu = np.array(mu0, dtype=np.float64)
    imp = np.array(imp0, dtype=np.float64)
    total = 0.0
    for t in range(K.shape[0]):
        al = math.exp(-A * D[t])
        if rule is RuleKind.PALIMPSA:
            imp_new = al * imp + (1.0 - al) * Ip + np.outer(B[t], K[t] ** 2)
            mu = (al * (imp / imp_new)) * mu + np.outer(B[t] * V[t], K[t]) / imp_new
            imp = imp_new
        else:
            mu = al * mu + np.outer(B[t] * V[t], K[t]) / Ip
        total += float(upstream[t] @ (mu @ Q[t]))
    return total


@dataclass(frozen=True)
class GradCheckReport:
    """Worst symmetric relative error per parameter group."""

    worst: dict
    tol: float
    trials: int

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.worst.values())

    def __str__(self):
        lines = [f"grad_check: {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g}, trials {self.trials})"]
        for name, err in self.worst.items():
            lines.append(f"  {name:9s} max rel err {err:.3e}")
        return "\n".join(lines)


def grad_check(
    inputs: Sequence[StepInput],
    init: DualState,
    hp: HeadParams,
    plan: ChunkPlan | None = None,
    trials: int = 3,
    rule: RuleKind = RuleKind.PALIMPSA,
    seed: int = 0,
    tol: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare the adjoint sweep against central finite differences.

    Sized for small problems only: d_k * d_v * L must stay <= 1e4 so the
    per-scalar probing finishes quickly. `floor` sets the denominator
    floor of the relative error: entries below it are held to the
    absolute bound tol * floor, which is what a central-difference
    oracle on an O(1) loss can actually resolve.
    """
    from .oracles import fd_grad, rel_err

    L = len(inputs)
    if hp.d_k * hp.d_v * max(L, 1) > 10_000:
        raise DomainError("grad_check is for small sizes (d_k * d_v * L <= 1e4)")
    rng = np.random.default_rng(seed)
    K, V, Q, B, D = pack_inputs(inputs, hp)
    worst = {name: 0.0 for name in GROUPS}

    for _ in range(max(1, trials)):
        G = rng.standard_normal((L, hp.d_v))
        _, store = forward_with_tape(inputs, init, hp, plan, rule=rule)
        bundle = backward(store, G, inputs, hp)
        base = {"K": K, "V": V, "Q": Q, "B": B, "D": D, "mu0": init.mu, "imp0": init.imp,
                "A": np.array([hp.decay_rate]), "Ip": np.array([hp.prior_precision])}

        def loss_of(key, x):
            z = dict(base)
            z[key] = x
            return _loss_raw(z["K"], z["V"], z["Q"], z["B"], z["D"], float(z["A"][0]), float(z["Ip"][0]),
                             z["mu0"], z["imp0"], G, rule)

        for name, analytic, key in (
            ("k", bundle.d_k_in, "K"),
            ("v", bundle.d_v_in, "V"),
            ("q", bundle.d_q_in, "Q"),
            ("beta", bundle.d_beta, "B"),
            ("d", bundle.d_d, "D"),
            ("A", np.array([bundle.d_A]), "A"),
            ("I_prior", np.array([bundle.d_I_prior]), "Ip"),
            ("init_mu", bundle.d_init.mu, "mu0"),
            ("init_imp", bundle.d_init.imp, "imp0"),
        ):
            numeric = fd_grad(lambda x: loss_of(key, x), base[key])
            worst[name] = max(worst[name], rel_err(analytic, numeric, floor=floor))

    return GradCheckReport(worst=worst, tol=tol, trials=max(1, trials))

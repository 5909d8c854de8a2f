"""Chunk-parallel evaluation of the dual-state recurrence.

The per-token update is rewritten as an associative combine over elements
(M, Ibar, a) where M carries importance-weighted means, Ibar carries the
importance offset from the prior precision, and a is the accumulated decay.
Centering the importance at the prior makes the prior re-injection term
vanish from the leaves, so a leaf is just the token's write.

Within a chunk everything is combined serially left to right; parallelism
is only across chunks. For fixed inputs and chunk length the output is
bitwise identical for every worker count: workers change who computes a
chunk, never the order of arithmetic inside it.
"""

from __future__ import annotations

import atexit
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import multiprocessing
import numpy as np

from .errors import DomainError, NumericError, RuleContractError
from .types import DualState, HeadParams, StepInput

# Test hook: when true, combine() flips the sign of the decay-weighted term.
# Exists so the verify command can prove the equivalence suites catch a
# deliberately broken operator. Never enable outside of that check.
FAULT_COMBINE_SIGN_FLIP = False


@dataclass(frozen=True)
class ScanElement:
    """One segment's effect: M (d_v, d_k), Ibar (d_v, d_k), decay product a.

    For a single token: M = (beta * v) (x) k, Ibar = beta (x) k^2, a = alpha.
    a stays in (0, 1] for leaves; long products may underflow toward 0,
    which is harmless because a only ever scales older contributions.
    """

    M: np.ndarray
    Ibar: np.ndarray
    a: float


@dataclass(frozen=True)
class ChunkPlan:
    """How to slice and execute a chunked evaluation."""

    chunk_len: int = 64
    workers: int = 1
    retain_checkpoints: bool = True

    def __post_init__(self):
        if self.chunk_len < 1:
            raise DomainError(f"chunk_len must be >= 1, got {self.chunk_len}")
        if self.workers < 1:
            raise DomainError(f"workers must be >= 1, got {self.workers}")


@dataclass
class ChunkedResult:
    outputs: np.ndarray  # (L, d_v)
    final: DualState
    checkpoints: list | None  # carry-in DualState per chunk; [0] is the initial state


def identity_element(d_v: int, d_k: int) -> ScanElement:
    return ScanElement(M=np.zeros((d_v, d_k)), Ibar=np.zeros((d_v, d_k)), a=1.0)


def leaf_of_step(inp: StepInput, hp: HeadParams) -> ScanElement:
    """Element representing a single token's write."""
    inp.check_dims(hp)
    alpha = math.exp(-hp.decay_rate * inp.d)
    return ScanElement(
        M=np.outer(inp.beta * inp.v, inp.k),
        Ibar=np.outer(inp.beta, inp.k**2),
        a=alpha,
    )


def combine(newer: ScanElement, older: ScanElement) -> ScanElement:
    """Sequence `older` then `newer`. Associative; identity is (0, 0, 1)."""
    sign = -1.0 if FAULT_COMBINE_SIGN_FLIP else 1.0
    return ScanElement(
        M=newer.M + sign * newer.a * older.M,
        Ibar=newer.Ibar + sign * newer.a * older.Ibar,
        a=newer.a * older.a,
    )


def state_to_element(state: DualState, hp: HeadParams) -> ScanElement:
    """Absorb an initial state into the scan as a leading element."""
    return ScanElement(M=state.imp * state.mu, Ibar=state.imp - hp.prior_precision, a=1.0)


def element_to_state(e: ScanElement, hp: HeadParams) -> DualState:
    """Uncenter back to (mu, imp); requires imp = Ibar + I_prior > 0."""
    imp = e.Ibar + hp.prior_precision
    if np.any(imp <= 0.0) or not np.isfinite(imp).all():
        raise NumericError("importance lost positivity when uncentering")
    return DualState(mu=e.M / imp, imp=imp)


# ---------- packed token arrays ----------


def pack_inputs(inputs: Sequence[StepInput], hp: HeadParams):
    """Stack per-token fields into contiguous arrays (K, V, Q, B, D)."""
    L = len(inputs)
    K = np.zeros((L, hp.d_k))
    V = np.zeros((L, hp.d_v))
    Q = np.zeros((L, hp.d_k))
    B = np.zeros((L, hp.d_v))
    D = np.zeros(L)
    for t, inp in enumerate(inputs):
        inp.check_dims(hp)
        K[t] = inp.k
        V[t] = inp.v
        Q[t] = inp.q
        B[t] = inp.beta
        D[t] = inp.d
    return K, V, Q, B, D


# ---------- worker tasks (module level so they pickle) ----------


def _write_shared(K, V, Q, B, D) -> str:
    """Spill the packed arrays to a scratch file workers can memmap.

    Shipping the data through pool pipes costs more than the scan itself
    at large L; a file in /dev/shm (tmpfs) makes the transfer one memcpy
    and lets every worker map it read-only.
    """
    shm_dir = "/dev/shm" if os.path.isdir("/dev/shm") else None
    fd, path = tempfile.mkstemp(prefix="palimpsa-scan-", dir=shm_dir)
    with os.fdopen(fd, "wb") as f:
        for arr in (K, V, Q, B, D):
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return path


def _load_rows(src, lo: int, hi: int):
    """Rows [lo, hi) of (K, V, Q, B, D) as plain arrays.

    The file branch copies out of the memmap: per-row indexing on a
    memmap subclass is about twice as slow as on a base ndarray, which
    matters in the per-token loops.
    """
    if src[0] == "mem":
        K, V, Q, B, D = src[1]
        return K[lo:hi], V[lo:hi], Q[lo:hi], B[lo:hi], D[lo:hi]
    _, path, L, d_k, d_v = src
    mm = np.memmap(path, dtype=np.float64, mode="r")
    out = []
    offset = 0
    for i, cols in enumerate((d_k, d_v, d_k, d_v, 1)):
        block = np.array(mm[offset + lo * cols : offset + hi * cols])
        out.append(block if i == 4 else block.reshape(hi - lo, cols))
        offset += L * cols
    return tuple(out)


def _scan_chunk_serial(K, V, B, alphas, sign, want_prefix):
    """Serial left-to-right combine of a chunk's leaves.

    Returns either the running prefix per token (two (C, d_v, d_k) arrays
    plus the decay prefix) or just the chunk total.
    """
    C = K.shape[0]
    d_v, d_k = V.shape[1], K.shape[1]
    M = np.zeros((d_v, d_k))
    Ibar = np.zeros((d_v, d_k))
    a = 1.0
    if want_prefix:
        Ms = np.zeros((C, d_v, d_k))
        Is = np.zeros((C, d_v, d_k))
        As = np.zeros(C)
    for t in range(C):
        al = alphas[t]
        M = np.outer(B[t] * V[t], K[t]) + (sign * al) * M
        Ibar = np.outer(B[t], K[t] ** 2) + (sign * al) * Ibar
        a = al * a
        if want_prefix:
            Ms[t] = M
            Is[t] = Ibar
            As[t] = a
    if want_prefix:
        return Ms, Is, As
    return M, Ibar, a


def _phase1_task(args):
    """Chunk totals for a contiguous group of chunks (absolute bounds)."""
    src, bounds, decay_rate, sign = args
    g_lo = bounds[0][0]
    K, V, Q, B, D = _load_rows(src, g_lo, bounds[-1][1])
    out = []
    for lo, hi in bounds:
        a, b = lo - g_lo, hi - g_lo
        alphas = np.exp(-decay_rate * D[a:b])
        out.append(_scan_chunk_serial(K[a:b], V[a:b], B[a:b], alphas, sign, want_prefix=False))
    return out


def _phase3_task(args):
    """Finalize per-token states against carry-ins and read out queries."""
    src, bounds, carries, decay_rate, prior_precision, sign = args
    g_lo = bounds[0][0]
    K, V, Q, B, D = _load_rows(src, g_lo, bounds[-1][1])
    ys = []
    for (lo, hi), (M_in, Ibar_in) in zip(bounds, carries):
        a, b = lo - g_lo, hi - g_lo
        alphas = np.exp(-decay_rate * D[a:b])
        Ms, Is, As = _scan_chunk_serial(K[a:b], V[a:b], B[a:b], alphas, sign, want_prefix=True)
        y = np.zeros((hi - lo, V.shape[1]))
        for t in range(hi - lo):
            M = Ms[t] + (sign * As[t]) * M_in
            imp = Is[t] + (sign * As[t]) * Ibar_in + prior_precision
            y[t] = (M / imp) @ Q[a + t]
        ys.append(y)
    return ys


# ---------- cached worker pools ----------

_POOLS: dict[int, ProcessPoolExecutor] = {}


def _get_pool(workers: int) -> ProcessPoolExecutor:
    pool = _POOLS.get(workers)
    if pool is None:
        ctx = multiprocessing.get_context("fork")
        pool = ProcessPoolExecutor(max_workers=workers, mp_context=ctx)
        _POOLS[workers] = pool
    return pool


def _shutdown_pools():
    for pool in _POOLS.values():
        pool.shutdown(wait=False, cancel_futures=True)
    _POOLS.clear()


atexit.register(_shutdown_pools)


def _run_tasks(task_fn, arg_list, workers: int):
    if workers == 1 or len(arg_list) <= 1:
        return [task_fn(a) for a in arg_list]
    pool = _get_pool(workers)
    return list(pool.map(task_fn, arg_list))


# ---------- driver ----------


def _chunk_bounds(L: int, chunk_len: int):
    return [(lo, min(lo + chunk_len, L)) for lo in range(0, L, chunk_len)]


def _group(seq, n_groups: int):
    """Split a list into at most n_groups contiguous runs (sizes differ by <= 1)."""
    n = len(seq)
    n_groups = max(1, min(n_groups, n))
    out = []
    start = 0
    for g in range(n_groups):
        size = n // n_groups + (1 if g < n % n_groups else 0)
        out.append(seq[start : start + size])
        start += size
    return out


def chunked_forward(
    inputs: Sequence[StepInput],
    init: DualState,
    hp: HeadParams,
    plan: ChunkPlan | None = None,
) -> ChunkedResult:
    """Evaluate the dual-state recurrence over chunks.

    Phase 1 computes each chunk's total element (parallel across chunks),
    phase 2 folds carries serially left to right, phase 3 finalizes every
    token against its chunk's carry-in and reads out the queries (parallel).
    Numeric failures name the chunk and token offset. Checkpoints, when
    retained, are the carry-in state of each chunk; checkpoint 0 is `init`.
    """
    plan = plan or ChunkPlan()
    if not isinstance(init, DualState):
        raise RuleContractError("chunked_forward needs a DualState initial state")
    L = len(inputs)
    if L == 0:
        return ChunkedResult(
            outputs=np.zeros((0, hp.d_v)),
            final=init,
            checkpoints=[init] if plan.retain_checkpoints else None,
        )
    K, V, Q, B, D = pack_inputs(inputs, hp)
    sign = -1.0 if FAULT_COMBINE_SIGN_FLIP else 1.0
    bounds = _chunk_bounds(L, plan.chunk_len)
    n_chunks = len(bounds)
    groups = _group(bounds, plan.workers * 4)

    # Workers read the token arrays through a scratch file; task messages
    # then carry only bounds and carries. The arithmetic is identical on
    # both paths, so outputs stay bitwise equal across worker counts.
    parallel = plan.workers > 1 and len(groups) > 1
    src = ("file", _write_shared(K, V, Q, B, D), L, hp.d_k, hp.d_v) if parallel else ("mem", (K, V, Q, B, D))
    try:
        # Phase 1: chunk totals.
        p1_args = [(src, list(g), hp.decay_rate, sign) for g in groups]
        totals = []
        for res in _run_tasks(_phase1_task, p1_args, plan.workers):
            totals.extend(res)

        # Phase 2: serial carry fold; checkpoints are carry-in states.
        carry = state_to_element(init, hp)
        carries = []
        checkpoints = [init] if plan.retain_checkpoints else None
        for c, (M_tot, I_tot, a_tot) in enumerate(totals):
            carries.append((carry.M, carry.Ibar))
            if not (np.isfinite(M_tot).all() and np.isfinite(I_tot).all()):
                raise NumericError("non-finite chunk total", where=f"chunk {c}")
            carry = combine(ScanElement(M=M_tot, Ibar=I_tot, a=a_tot), carry)
            try:
                if plan.retain_checkpoints and c + 1 < n_chunks:
                    checkpoints.append(element_to_state(carry, hp))
            except NumericError as e:
                raise NumericError(str(e), where=f"chunk {c}") from e
        final = element_to_state(carry, hp)

        # Phase 3: finalize tokens and read out.
        p3_args = []
        for gi, g in enumerate(groups):
            base = sum(len(x) for x in groups[:gi])
            p3_args.append((src, list(g), carries[base : base + len(g)],
                            hp.decay_rate, hp.prior_precision, sign))
        outputs = np.zeros((L, hp.d_v))
        chunk_idx = 0
        for res in _run_tasks(_phase3_task, p3_args, plan.workers):
            for y in res:
                lo, hi = bounds[chunk_idx]
                bad = ~np.isfinite(y)
                if bad.any():
                    off = int(np.argwhere(bad.any(axis=1))[0][0])
                    raise NumericError("non-finite readout", where=f"chunk {chunk_idx}, offset {off}")
                outputs[lo:hi] = y
                chunk_idx += 1
    finally:
        if parallel:
            try:
                os.unlink(src[1])
            except OSError:
                pass
    return ChunkedResult(outputs=outputs, final=final, checkpoints=checkpoints)

"""Batched chunk-parallel recurrence kernel used by the trainable model.

Works on (batch, heads, length, ...) arrays. Within a chunk, pairwise
decay factors are built in log space from the cumulative per-token decay,
so no ratio of tiny exponentials ever appears. The importance offset is
accumulated centered at zero (prior added only at readout); every term of
the offset is nonnegative, so the importance floor holds exactly even in
32-bit arithmetic.

The backward pass recomputes each chunk's internal quantities from the
retained carry states, mirroring the hand-derived adjoint of the
sequential rule; it is validated against that reference in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, NumericError


@dataclass(frozen=True)
class KernelConfig:
    chunk_len: int = 32
    prior_precision: float = 1.0
    metaplastic: bool = True  # False freezes the importance at the prior
    state_budget_bytes: int = 512 * 2**20  # keep per-token states on the
    # tape when they fit; beyond this, backward recomputes them per chunk

    def __post_init__(self):
        if self.chunk_len < 1:
            raise DomainError("chunk_len must be >= 1")
        if self.prior_precision <= 0.0:
            raise DomainError("prior_precision must be > 0")
        if self.state_budget_bytes < 0:
            raise DomainError("state_budget_bytes must be >= 0")


@dataclass
class KernelTape:
    """Everything backward needs: inputs, per-chunk carry-in states, config."""

    k: np.ndarray
    v: np.ndarray
    q: np.ndarray
    beta: np.ndarray
    d: np.ndarray
    A: np.ndarray
    cfg: KernelConfig
    m_carries: list  # carry-in M per chunk, (B, H, d_v, d_k)
    i_carries: list  # carry-in centered importance per chunk (metaplastic only)
    states: list | None = None  # optional per-chunk (mu, imp, OM, OI)


def _chunk_slices(L: int, c: int):
    return [(lo, min(lo + c, L)) for lo in range(0, L, c)]


def _decay_tables(d_c: np.ndarray, A: np.ndarray):
    """Per-chunk decay quantities from step distances.

    d_c: (B, H, c) distances; A: (H,) rates. Returns (Dm, e, lc) where
    Dm[t, s] = exp(lc[t] - lc[s]) on s <= t (0 above the diagonal) and
    e[t] = exp(lc[t]) scales the carry into token t.
    """
    la = -A[None, :, None] * d_c
    lc = np.cumsum(la, axis=-1)
    diff = lc[..., :, None] - lc[..., None, :]
    mask = np.tril(np.ones((d_c.shape[-1], d_c.shape[-1]), dtype=bool))
    zero = np.zeros((), dtype=diff.dtype)
    Dm = np.where(mask, np.exp(np.where(mask, diff, zero)), zero)
    return Dm, np.exp(lc), lc


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (B,H,c,x), (B,H,c,y) -> (B,H,c,x,y)
    return a[..., :, None] * b[..., None, :]


def _mix(Dm: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Causal within-chunk accumulation: out[t] = sum_{s<=t} Dm[t,s] X[s]."""
    B, H, c, dv, dk = X.shape
    return (Dm @ X.reshape(B, H, c, dv * dk)).reshape(B, H, c, dv, dk)


def _mix_t(Dm: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Transpose mix: out[s] = sum_{t>=s} Dm[t,s] X[t]."""
    B, H, c, dv, dk = X.shape
    return (np.swapaxes(Dm, -1, -2) @ X.reshape(B, H, c, dv * dk)).reshape(B, H, c, dv, dk)


def kernel_forward(k, v, q, beta, d, A, cfg: KernelConfig):
    """Run the recurrence over (B, L, H, ...) inputs from a rest start.

    k, q: (B, L, H, d_k); v, beta: (B, L, H, d_v); d: (B, L, H); A: (H,).
    v is the mean-write payload (any input gating already applied);
    beta drives only the importance accumulation.

    Returns (y, final_imp, tape): y (B, L, H, d_v), final importance
    (B, H, d_v, d_k) including the prior.
    """
    B, L, H, dk = k.shape
    dv = v.shape[-1]
    dt = k.dtype
    # head-major layout for the chunk matmuls
    kh = np.ascontiguousarray(np.swapaxes(k, 1, 2))
    vh = np.ascontiguousarray(np.swapaxes(v, 1, 2))
    qh = np.ascontiguousarray(np.swapaxes(q, 1, 2))
    bh = np.ascontiguousarray(np.swapaxes(beta, 1, 2))
    dh = np.ascontiguousarray(np.swapaxes(d, 1, 2))
    A = np.asarray(A, dtype=dt)
    Ip = dt.type(cfg.prior_precision)

    y = np.zeros((B, H, L, dv), dtype=dt)
    Mc = np.zeros((B, H, dv, dk), dtype=dt)
    Ic = np.zeros((B, H, dv, dk), dtype=dt)
    m_carries, i_carries = [], []
    per_token = B * H * L * dv * dk * dt.itemsize
    retain = per_token * (4 if cfg.metaplastic else 2) <= cfg.state_budget_bytes
    states = [] if retain else None

    for lo, hi in _chunk_slices(L, cfg.chunk_len):
        m_carries.append(Mc)
        i_carries.append(Ic)
        Dm, e, _ = _decay_tables(dh[:, :, lo:hi], A)
        OM = _outer(vh[:, :, lo:hi], kh[:, :, lo:hi])
        M = _mix(Dm, OM) + e[..., None, None] * Mc[:, :, None]
        if cfg.metaplastic:
            OI = _outer(bh[:, :, lo:hi], kh[:, :, lo:hi] ** 2)
            Ibar = _mix(Dm, OI) + e[..., None, None] * Ic[:, :, None]
            imp = Ibar + Ip
            Ic = Ibar[:, :, -1]
        else:
            OI = None
            imp = Ip
        mu = M / imp
        y[:, :, lo:hi] = np.einsum("bhtvk,bhtk->bhtv", mu, qh[:, :, lo:hi])
        Mc = M[:, :, -1]
        if retain:
            states.append((mu, imp if cfg.metaplastic else None, OM, OI))

    if not np.isfinite(y).all():
        bad_t = int(np.argwhere((~np.isfinite(y)).any(axis=(0, 1, 3)))[0][0])
        raise NumericError("non-finite kernel output", where=f"step {bad_t}")
    final_imp = (Ic + Ip) if cfg.metaplastic else np.full((B, H, dv, dk), Ip, dtype=dt)
    tape = KernelTape(k=kh, v=vh, q=qh, beta=bh, d=dh, A=A, cfg=cfg,
                      m_carries=m_carries, i_carries=i_carries, states=states)
    return np.ascontiguousarray(np.swapaxes(y, 1, 2)), final_imp, tape


def kernel_backward(tape: KernelTape, gy: np.ndarray):
    """Gradients of sum <gy, y> for every kernel input.

    gy: (B, L, H, d_v). Returns (gk, gv, gq, gbeta, gd, gA) with input
    shapes; gA is (H,).
    """
    cfg = tape.cfg
    kh, vh, qh, bh, dh, A = tape.k, tape.v, tape.q, tape.beta, tape.d, tape.A
    B, H, L, dk = kh.shape
    dv = vh.shape[-1]
    dt = kh.dtype
    Ip = dt.type(cfg.prior_precision)
    gyh = np.swapaxes(np.asarray(gy, dtype=dt), 1, 2)

    gk = np.zeros_like(kh)
    gv = np.zeros_like(vh)
    gq = np.zeros_like(qh)
    gb = np.zeros_like(bh)
    gd = np.zeros_like(dh)
    gA = np.zeros_like(A)
    GMc = np.zeros((B, H, dv, dk), dtype=dt)
    GIc = np.zeros((B, H, dv, dk), dtype=dt)

    slices = _chunk_slices(L, cfg.chunk_len)
    for ci in range(len(slices) - 1, -1, -1):
        lo, hi = slices[ci]
        Mc, Ic = tape.m_carries[ci], tape.i_carries[ci]
        Kc, Vc, Qc, Bc = kh[:, :, lo:hi], vh[:, :, lo:hi], qh[:, :, lo:hi], bh[:, :, lo:hi]
        Dm, e, _ = _decay_tables(dh[:, :, lo:hi], A)

        if tape.states is not None:
            mu, imp, OM, OI = tape.states[ci]
            if imp is None:
                imp = Ip
        else:
            # recompute the chunk's forward quantities
            OM = _outer(Vc, Kc)
            M = _mix(Dm, OM) + e[..., None, None] * Mc[:, :, None]
            if cfg.metaplastic:
                OI = _outer(Bc, Kc**2)
                Ibar = _mix(Dm, OI) + e[..., None, None] * Ic[:, :, None]
                imp = Ibar + Ip
            else:
                imp = Ip
            mu = M / imp

        # readout adjoints
        Gmu = _outer(gyh[:, :, lo:hi], Qc)
        gq[:, :, lo:hi] = np.einsum("bhtvk,bhtv->bhtk", mu, gyh[:, :, lo:hi])
        GM = Gmu / imp
        if cfg.metaplastic:
            GIbar = -(Gmu * mu) / imp
        # fold in the adjoint of this chunk's outgoing carry (its last state)
        GM[:, :, -1] += GMc
        if cfg.metaplastic:
            GIbar[:, :, -1] += GIc

        # leaf adjoints through the causal mix; the (t, s) contractions all
        # flatten the (d_v, d_k) plane so BLAS does the heavy lifting
        c = hi - lo
        vk = dv * dk
        GMr = GM.reshape(B, H, c, vk)
        GOM = _mix_t(Dm, GM)
        gv[:, :, lo:hi] = np.einsum("bhsvk,bhsk->bhsv", GOM, Kc)
        gk_c = np.einsum("bhsvk,bhsv->bhsk", GOM, Vc)
        GD = GMr @ OM.reshape(B, H, c, vk).swapaxes(-1, -2)
        Ge = (GMr @ Mc.reshape(B, H, vk, 1))[..., 0]
        GMc = (e[:, :, None, :] @ GMr)[:, :, 0].reshape(B, H, dv, dk)
        if cfg.metaplastic:
            GIr = GIbar.reshape(B, H, c, vk)
            GOI = _mix_t(Dm, GIbar)
            gb[:, :, lo:hi] = np.einsum("bhsvk,bhsk->bhsv", GOI, Kc**2)
            gk_c += 2.0 * Kc * np.einsum("bhsvk,bhsv->bhsk", GOI, Bc)
            GD += GIr @ OI.reshape(B, H, c, vk).swapaxes(-1, -2)
            Ge += (GIr @ Ic.reshape(B, H, vk, 1))[..., 0]
            GIc = (e[:, :, None, :] @ GIr)[:, :, 0].reshape(B, H, dv, dk)
        gk[:, :, lo:hi] = gk_c

        # decay adjoints: through the pairwise table and the carry scaling
        W = GD * Dm
        Glc = W.sum(axis=-1) - W.sum(axis=-2) + Ge * e
        Gla = np.flip(np.cumsum(np.flip(Glc, axis=-1), axis=-1), axis=-1)
        gd[:, :, lo:hi] = -A[None, :, None] * Gla
        gA += np.einsum("bht,bht->h", dh[:, :, lo:hi], -Gla)

    back = lambda x: np.ascontiguousarray(np.swapaxes(x, 1, 2))
    return back(gk), back(gv), back(gq), back(gb), back(gd), gA

"""Independent reference computations used to pin down expected test values.

Nothing here shares code with the production kernels: sums are unrolled,
matrix work is done with explicit loops or a different identity, and the
one frozen scalar constant is produced with extended-precision arithmetic.
The CLI `oracle` command prints these values; tests import them.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import mpmath
import numpy as np

from .types import DualState, HeadParams, MesaState, StepInput


def exp_neg_extended(x: float, sig: int = 15) -> str:
    """exp(-x) evaluated at 50-digit working precision, formatted to `sig`
    significant digits. Used to freeze retention-factor constants."""
    with mpmath.workdps(50):
        val = mpmath.exp(-mpmath.mpf(repr(x)))
        return mpmath.nstr(val, sig, strip_zeros=False)


# ---------- unrolled batch summations (no recurrence) ----------


def palimpsa_unrolled(inputs: Sequence[StepInput], init: DualState, hp: HeadParams) -> DualState:
    """Final dual state via direct discounted sums.

    Each suffix weight w_t = prod_{s>t} alpha_s is computed independently
    per term, so no intermediate state is ever formed.
    """
    alphas = [math.exp(-hp.decay_rate * inp.d) for inp in inputs]
    T = len(inputs)
    w_all = math.prod(alphas)
    imp = w_all * init.imp.copy()
    num = w_all * (init.imp * init.mu)
    for t in range(T):
        w_t = math.prod(alphas[t + 1 :])
        inp = inputs[t]
        imp = imp + w_t * ((1.0 - alphas[t]) * hp.prior_precision + np.outer(inp.beta, inp.k**2))
        num = num + w_t * np.outer(inp.beta * inp.v, inp.k)
    return DualState(mu=num / imp, imp=imp)


def mamba2_limit_unrolled(inputs: Sequence[StepInput], init: DualState, hp: HeadParams) -> DualState:
    """Final mean of the pinned-importance rule via direct discounted sums."""
    alphas = [math.exp(-hp.decay_rate * inp.d) for inp in inputs]
    mu = math.prod(alphas) * init.mu.copy()
    for t, inp in enumerate(inputs):
        w_t = math.prod(alphas[t + 1 :])
        mu = mu + w_t * np.outer(inp.beta * inp.v, inp.k) / hp.prior_precision
    return DualState(mu=mu, imp=init.imp.copy())


# ---------- scalar-loop transcriptions ----------


def readout_naive(mu: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.zeros(mu.shape[0])
    for i in range(mu.shape[0]):
        acc = 0.0
        for j in range(mu.shape[1]):
            acc += float(mu[i, j]) * float(q[j])
        out[i] = acc
    return out


def longhorn_transcription(mu: np.ndarray, inp: StepInput) -> np.ndarray:
    """Row-by-row scalar transcription of the implicit online update."""
    d_v, d_k = mu.shape
    kk = sum(float(inp.k[j]) ** 2 for j in range(d_k))
    out = np.zeros_like(mu)
    for i in range(d_v):
        b = float(inp.beta[i])
        denom = 1.0 + b * kk
        eps = b / denom
        for j in range(d_k):
            out[i, j] = (1.0 - eps * float(inp.k[j]) ** 2) * float(mu[i, j]) + eps * float(inp.v[i]) * float(inp.k[j])
    return out


def deltanet_transcription(mu: np.ndarray, inp: StepInput, alpha: float = 1.0) -> np.ndarray:
    """Explicit matrix arithmetic for mu (alpha (I - b k k^T)) + b v k^T."""
    d_v, d_k = mu.shape
    b = float(inp.beta[0])
    proj = [[alpha * ((1.0 if r == c else 0.0) - b * float(inp.k[r]) * float(inp.k[c])) for c in range(d_k)] for r in range(d_k)]
    out = np.zeros_like(mu)
    for i in range(d_v):
        for c in range(d_k):
            acc = 0.0
            for r in range(d_k):
                acc += float(mu[i, r]) * proj[r][c]
            out[i, c] = acc + b * float(inp.v[i]) * float(inp.k[c])
    return out


# ---------- rank-one recursive-inverse path for the full-precision rule ----------


def mesa_sherman_morrison(inputs: Sequence[StepInput], init: MesaState, hp: HeadParams) -> MesaState:
    """Track the covariance directly through rank-one inverse updates.

    The precision update per step is a scale plus d_k + 1 rank-one additions
    (the diagonal prior re-injection entry by entry, then the data term), so
    the inverse can be carried with Sherman-Morrison only: no linear solves.
    """
    d_k = hp.d_k
    sigma = np.linalg.inv(init.prec)  # starting point only; steps stay solve-free
    prec = init.prec.copy()
    mu = init.mu.copy()
    for inp in inputs:
        beta = inp.scalar_beta
        alpha = math.exp(-hp.decay_rate * inp.d)
        rhs = alpha * (prec @ mu.T) + beta * np.outer(inp.k, inp.v)  # (d_k, d_v)
        sigma = sigma / alpha
        prec = alpha * prec
        c = (1.0 - alpha) * hp.prior_precision
        if c != 0.0:
            for j in range(d_k):
                u = sigma[:, j].copy()
                sigma = sigma - (c / (1.0 + c * sigma[j, j])) * np.outer(u, u)
                prec[j, j] += c
        if beta != 0.0:
            u = sigma @ inp.k
            sigma = sigma - (beta / (1.0 + beta * float(inp.k @ u))) * np.outer(u, u)
            prec = prec + beta * np.outer(inp.k, inp.k)
        mu = (sigma @ rhs).T
    return MesaState(mu=mu, prec=0.5 * (prec + prec.T))


# ---------- finite differences and error metrics ----------


def fd_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h_scale: float = 1e-5) -> np.ndarray:
    """Central-difference gradient with per-coordinate h = h_scale * (1 + |x|)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.shape[0]):
        h = h_scale * (1.0 + abs(float(flat[i])))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        gf[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Worst elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------- Monte-Carlo Gaussian cross-check ----------


def kl_monte_carlo(mean1, cov1, mean2, cov2, n: int = 1_000_000, seed: int = 0):
    """Estimate KL(p1 || p2) by sampling; returns (estimate, standard_error)."""
    rng = np.random.default_rng(seed)
    mean1 = np.asarray(mean1, dtype=np.float64)
    mean2 = np.asarray(mean2, dtype=np.float64)
    cov1 = np.asarray(cov1, dtype=np.float64)
    cov2 = np.asarray(cov2, dtype=np.float64)
    d = mean1.shape[0]
    chol1 = np.linalg.cholesky(cov1)
    x = mean1 + rng.standard_normal((n, d)) @ chol1.T

    def logpdf(xs, mean, cov):
        chol = np.linalg.cholesky(cov)
        diff = xs - mean
        sol = np.linalg.solve(chol, diff.T)  # (d, n)
        quad = np.sum(sol**2, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (quad + d * math.log(2.0 * math.pi) + logdet)

    ratio = logpdf(x, mean1, cov1) - logpdf(x, mean2, cov2)
    return float(np.mean(ratio)), float(np.std(ratio, ddof=1) / math.sqrt(n))


# ---------- independent optimizer transcription ----------


def adam_transcription(
    x0: float,
    grads: Sequence[float],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> float:
    """Scalar decoupled-weight-decay Adam, written out step by step."""
    x = float(x0)
    m = 0.0
    v = 0.0
    for t, g in enumerate(grads, start=1):
        g = float(g)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        x = x - lr * (mhat / (math.sqrt(vhat) + eps) + weight_decay * x)
    return x

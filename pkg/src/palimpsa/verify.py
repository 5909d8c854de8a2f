"""Randomized property suites behind the `verify` subcommand.

Each suite draws its own cases from a seeded generator, measures the worst
deviation against the suite's tolerance, and reports a SuiteResult. The
acceptance tests call the same functions with their own (larger) sample
counts, so the CLI report and the test gate exercise identical code.

Suite worst-case semantics: `worst` is the largest absolute deviation
observed (for band checks, the largest distance outside the band, 0 when
every case lands inside). A suite passes iff worst <= tol and no
structural check (bitwise equality across worker counts) failed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import scan as scan_mod
from .autodiff import backward, forward_with_tape, grad_check
from .bayes import (
    Datum,
    GaussianDiag,
    GaussianFull,
    closed_form_row_update,
    dual_state_row,
    free_energy,
    gaussian_cross_entropy,
    gaussian_entropy,
    gaussian_kl,
    grad_free_energy_cov,
    grad_free_energy_mu,
    weighted_posterior_oracle,
)
from .errors import ConfigError, PalimpsaError
from .oracles import fd_grad, mesa_sherman_morrison, rel_err
from .rules import (
    deltanet_step,
    gated_deltanet_step,
    mamba2_limit_step,
    mesa_step,
    palimpsa_step,
    sequential_scan,
)
from .scan import ChunkPlan, chunked_forward
from .types import DualState, HeadParams, MesaState, RuleKind, StepInput


@dataclass
class SuiteResult:
    name: str
    samples: int
    worst: float
    tol: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:24s} samples={self.samples:<5d} worst={self.worst:.3e}  tol={self.tol:g}"


def _random_inputs(rng, T, d_k, d_v, beta_scale=1.0, d_max=0.5):
    out = []
    for _ in range(T):
        out.append(
            StepInput(
                k=rng.standard_normal(d_k),
                v=rng.standard_normal(d_v),
                q=rng.standard_normal(d_k),
                beta=rng.uniform(0.0, beta_scale, size=d_v),
                d=float(rng.uniform(0.0, d_max)),
            )
        )
    return out


def _random_spd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T + d * np.eye(d))


def _random_full(rng, d):
    return GaussianFull(mean=rng.standard_normal(d), cov=_random_spd(rng, d, 0.3))


def _random_datum(rng, d):
    return Datum(k=rng.standard_normal(d), v_i=float(rng.standard_normal()), beta_i=float(rng.uniform(0, 2)))


# ---------- suites ----------


def run_scan_equivalence(
    seed: int = 0,
    samples: int = 25,
    max_len: int = 1024,
    chunk_lens: tuple = (1, 2, 7, 16, 64),
    workers: tuple = (1, 2, 8),
) -> SuiteResult:
    """Chunked evaluation equals the sequential reference; worker counts
    change nothing, bit for bit.

    Lengths are drawn mostly small with a long tail up to max_len so the
    suite covers the full range without spending its whole budget on the
    largest cases.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    mismatches = 0
    lengths = []
    for case in range(samples):
        bucket = rng.random()
        if bucket < 0.7:
            L = int(rng.integers(1, min(65, max_len + 1)))
        elif bucket < 0.9:
            L = int(rng.integers(1, min(257, max_len + 1)))
        else:
            L = int(rng.integers(max_len // 4 + 1, max_len + 1))
        lengths.append(L)
        d_k = int(rng.integers(1, 7))
        d_v = int(rng.integers(1, 7))
        hp = HeadParams(d_k=d_k, d_v=d_v, decay_rate=float(rng.uniform(0.0, 1.2)),
                        prior_precision=float(rng.uniform(0.5, 2.0)))
        inputs = _random_inputs(rng, L, d_k, d_v, beta_scale=1.5, d_max=0.6)
        if case % 2 == 0:
            init = DualState.rest(hp)
        else:
            init = DualState(mu=rng.standard_normal((d_v, d_k)),
                             imp=hp.prior_precision + rng.uniform(0.0, 2.0, (d_v, d_k)))
        ref = sequential_scan(RuleKind.PALIMPSA, init, inputs, hp)
        for cl in chunk_lens:
            base = chunked_forward(inputs, init, hp, ChunkPlan(chunk_len=cl, workers=workers[0]))
            dev = max(
                float(np.max(np.abs(base.outputs - ref.outputs))),
                float(np.max(np.abs(base.final.mu - ref.final.mu))),
                float(np.max(np.abs(base.final.imp - ref.final.imp))),
            )
            worst = max(worst, dev)
            for w in workers[1:]:
                alt = chunked_forward(inputs, init, hp, ChunkPlan(chunk_len=cl, workers=w))
                same = (
                    alt.outputs.tobytes() == base.outputs.tobytes()
                    and alt.final.mu.tobytes() == base.final.mu.tobytes()
                    and alt.final.imp.tobytes() == base.final.imp.tobytes()
                )
                if not same:
                    mismatches += 1
    tol = 1e-10
    return SuiteResult(
        name="scan-equivalence",
        samples=samples,
        worst=worst,
        tol=tol,
        passed=worst <= tol and mismatches == 0,
        detail={"bitwise_mismatches": mismatches, "max_len_drawn": max(lengths),
                "chunk_lens": list(chunk_lens), "workers": list(workers)},
    )


def run_oracle_closure(seed: int = 0, samples: int = 50) -> SuiteResult:
    """With no forgetting, each state row is the diagonal regression
    posterior formed by direct summation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        d_k = int(rng.integers(1, 7))
        d_v = int(rng.integers(1, 5))
        T = int(rng.integers(1, 13))
        hp = HeadParams(d_k=d_k, d_v=d_v, decay_rate=0.0,
                        prior_precision=float(rng.uniform(0.5, 2.0)))
        inputs = _random_inputs(rng, T, d_k, d_v, beta_scale=2.0, d_max=0.5)
        state = DualState.rest(hp)
        for inp in inputs:
            state = palimpsa_step(state, inp, hp)
        alphas = [1.0] * T
        for r in range(d_v):
            data = [Datum(k=inp.k, v_i=float(inp.v[r]), beta_i=float(inp.beta[r])) for inp in inputs]
            oracle = weighted_posterior_oracle(data, alphas, hp)
            row = dual_state_row(state, r)
            worst = max(
                worst,
                float(np.max(np.abs(row.mean - oracle.mean))),
                float(np.max(np.abs(1.0 / row.var - 1.0 / oracle.var))),
            )
    tol = 1e-12
    return SuiteResult("oracle-closure", samples, worst, tol, worst <= tol)


def run_stationarity(seed: int = 0, samples: int = 200) -> SuiteResult:
    """The closed-form row update sits at a stationary point of the
    variational objective; analytic gradients also match finite
    differences at random probe points."""
    rng = np.random.default_rng(seed)
    worst_grad = 0.0
    worst_fd = 0.0
    for trial in range(samples):
        d = int(rng.integers(2, 6))
        hp = HeadParams(d_k=d, d_v=1, prior_precision=float(rng.uniform(0.6, 1.8)))
        if trial % 2 == 0:
            prev = _random_full(rng, d)
        else:
            prev = GaussianDiag(mean=rng.standard_normal(d), var=rng.uniform(0.4, 2.0, d))
        datum = _random_datum(rng, d)
        alpha = float(rng.uniform(0.2, 1.0))
        best = closed_form_row_update(prev, datum, alpha, hp)
        g_mu = grad_free_energy_mu(best.mean, prev, datum, alpha, hp)
        g_cov = grad_free_energy_cov(np.linalg.cholesky(best.cov), prev, datum, alpha, hp)
        worst_grad = max(worst_grad, float(np.max(np.abs(g_mu))), float(np.max(np.abs(g_cov))))
        if trial % 5 == 0:
            # FD cross-check away from the stationary point, where the
            # gradient is O(1) and relative error is meaningful.
            mu0 = rng.standard_normal(d)
            cov0 = _random_spd(rng, d, 0.2)
            analytic_mu = grad_free_energy_mu(mu0, prev, datum, alpha, hp)
            numeric_mu = fd_grad(lambda m: free_energy(m, cov0, prev, datum, alpha, hp).total, mu0)
            worst_fd = max(worst_fd, rel_err(analytic_mu, numeric_mu))
            A0 = np.linalg.cholesky(cov0)
            analytic_cov = grad_free_energy_cov(A0, prev, datum, alpha, hp)
            numeric_cov = fd_grad(lambda A: free_energy(mu0, A @ A.T, prev, datum, alpha, hp).total, A0)
            worst_fd = max(worst_fd, rel_err(analytic_cov, numeric_cov))
    tol = 1e-8
    fd_tol = 1e-6
    return SuiteResult(
        name="stationarity",
        samples=samples,
        worst=worst_grad,
        tol=tol,
        passed=worst_grad <= tol and worst_fd <= fd_tol,
        detail={"worst_fd_rel": worst_fd, "fd_tol": fd_tol},
    )


def run_gradient_check(seed: int = 0, samples: int = 10, L: int = 12, d_k: int = 4, d_v: int = 4) -> SuiteResult:
    """Adjoint sweep vs central differences for every input group, plus
    chunk-length invariance of the gradients."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_chunk = 0.0
    chunk_tol = 1e-10
    for case in range(samples):
        hp = HeadParams(d_k=d_k, d_v=d_v, decay_rate=float(rng.uniform(0.05, 0.8)),
                        prior_precision=float(rng.uniform(0.6, 1.6)))
        inputs = _random_inputs(rng, L, d_k, d_v, beta_scale=1.5, d_max=0.5)
        init = DualState(mu=0.3 * rng.standard_normal((d_v, d_k)),
                         imp=hp.prior_precision + rng.uniform(0.0, 1.0, (d_v, d_k)))
        # floor 1e-5: below it the FD oracle resolves ~1e-10 absolute, so
        # smaller entries are held to tol * floor instead of pure relative.
        report = grad_check(inputs, init, hp, trials=1, seed=seed * 1000 + case, tol=1e-5, floor=1e-5)
        worst = max(worst, max(report.worst.values()))

        G = rng.standard_normal((L, d_v))
        bundles = []
        for cl in (1, 5, L):
            _, store = forward_with_tape(inputs, init, hp, ChunkPlan(chunk_len=cl))
            bundles.append(backward(store, G, inputs, hp))
        for other in bundles[1:]:
            for a, b in (
                (bundles[0].d_k_in, other.d_k_in),
                (bundles[0].d_v_in, other.d_v_in),
                (bundles[0].d_q_in, other.d_q_in),
                (bundles[0].d_beta, other.d_beta),
                (bundles[0].d_d, other.d_d),
            ):
                worst_chunk = max(worst_chunk, float(np.max(np.abs(a - b))))
            worst_chunk = max(worst_chunk, abs(bundles[0].d_A - other.d_A),
                              abs(bundles[0].d_I_prior - other.d_I_prior))
    tol = 1e-5
    return SuiteResult(
        name="gradient-check",
        samples=samples,
        worst=worst,
        tol=tol,
        passed=worst <= tol and worst_chunk <= chunk_tol,
        detail={"worst_chunk_dev": worst_chunk, "chunk_tol": chunk_tol, "L": L, "d_k": d_k, "d_v": d_v},
    )


def run_gaussian_identity(seed: int = 0, samples: int = 50) -> SuiteResult:
    """Cross-entropy decomposes into entropy plus divergence."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        d = int(rng.integers(1, 6))
        p = _random_full(rng, d)
        q = _random_full(rng, d)
        lhs = gaussian_cross_entropy(p, q)
        rhs = gaussian_entropy(p) + gaussian_kl(p, q)
        worst = max(worst, abs(lhs - rhs))
    tol = 1e-12
    return SuiteResult("gaussian-identity", samples, worst, tol, worst <= tol)


def run_deltanet_gate_identity(seed: int = 0, samples: int = 50) -> SuiteResult:
    """With the forgetting gate pinned open the gated delta rule is the
    plain delta rule."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        d_k = int(rng.integers(1, 7))
        d_v = int(rng.integers(1, 5))
        hp = HeadParams(d_k=d_k, d_v=d_v, decay_rate=0.0, prior_precision=1.0)
        mu = rng.standard_normal((d_v, d_k))
        inp = StepInput(
            k=rng.standard_normal(d_k),
            v=rng.standard_normal(d_v),
            q=rng.standard_normal(d_k),
            beta=np.full(d_v, float(rng.uniform(0.0, 1.0))),
            d=float(rng.uniform(0.0, 1.0)),
        )
        gated = gated_deltanet_step(mu, inp, hp)
        plain = deltanet_step(mu, inp)
        worst = max(worst, float(np.max(np.abs(gated - plain))))
    tol = 1e-15
    return SuiteResult("deltanet-gate-identity", samples, worst, tol, worst <= tol)


def run_mesa_dual_route(seed: int = 0, samples: int = 8, T: int = 64, d_k: int = 8) -> SuiteResult:
    """Direct linear solves and rank-one inverse updates track the same
    full-precision state."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        d_v = int(rng.integers(1, 5))
        hp = HeadParams(d_k=d_k, d_v=d_v, decay_rate=float(rng.uniform(0.1, 0.5)),
                        prior_precision=1.0)
        inputs = []
        for _ in range(T):
            inputs.append(StepInput(
                k=rng.standard_normal(d_k),
                v=rng.standard_normal(d_v),
                q=rng.standard_normal(d_k),
                beta=np.full(d_v, float(rng.uniform(0.0, 1.0))),
                d=float(rng.uniform(0.0, 0.4)),
            ))
        init = MesaState.rest(hp)
        state = init
        for inp in inputs:
            state = mesa_step(state, inp, hp)
        oracle = mesa_sherman_morrison(inputs, init, hp)
        worst = max(worst,
                    float(np.max(np.abs(state.prec - oracle.prec))),
                    float(np.max(np.abs(state.mu - oracle.mu))))
    tol = 1e-8
    return SuiteResult("mesa-dual-route", samples, worst, tol, worst <= tol, detail={"T": T, "d_k": d_k})


def run_limit_convergence(seed: int = 0, samples: int = 25, T: int = 32) -> SuiteResult:
    """Scaling the write rate down by s (payload held fixed) closes the gap
    to the pinned-importance rule one decade per decade: consecutive gap
    ratios stay in [8, 12]."""
    rng = np.random.default_rng(seed)
    worst_outside = 0.0
    ratios = []
    for _ in range(samples):
        d_k = int(rng.integers(2, 6))
        d_v = int(rng.integers(1, 5))
        hp = HeadParams(d_k=d_k, d_v=d_v, decay_rate=float(rng.uniform(0.1, 0.8)),
                        prior_precision=1.0)
        base = _random_inputs(rng, T, d_k, d_v, beta_scale=1.0, d_max=0.3)
        gaps = {}
        for s in (1e-2, 1e-3, 1e-4):
            sp = DualState.rest(hp)
            sm = DualState.rest(hp)
            for inp in base:
                scaled = StepInput(k=inp.k, v=inp.v / s, q=inp.q, beta=inp.beta * s, d=inp.d)
                sp = palimpsa_step(sp, scaled, hp)
                sm = mamba2_limit_step(sm, scaled, hp)
            gaps[s] = float(np.max(np.abs(sp.mu - sm.mu)))
        for r in (gaps[1e-2] / gaps[1e-3], gaps[1e-3] / gaps[1e-4]):
            ratios.append(r)
            if r < 8.0:
                worst_outside = max(worst_outside, 8.0 - r)
            elif r > 12.0:
                worst_outside = max(worst_outside, r - 12.0)
    return SuiteResult(
        name="limit-convergence",
        samples=samples,
        worst=worst_outside,
        tol=0.0,
        passed=worst_outside <= 0.0,
        detail={"ratio_min": min(ratios), "ratio_max": max(ratios), "band": [8.0, 12.0], "T": T},
    )


SUITES = {
    "scan-equivalence": run_scan_equivalence,
    "oracle-closure": run_oracle_closure,
    "stationarity": run_stationarity,
    "gradient-check": run_gradient_check,
    "gaussian-identity": run_gaussian_identity,
    "deltanet-gate-identity": run_deltanet_gate_identity,
    "mesa-dual-route": run_mesa_dual_route,
    "limit-convergence": run_limit_convergence,
}


def run_suites(
    seed: int = 0,
    samples: int = 25,
    name_filter: str | None = None,
    fault: str | None = None,
) -> tuple[list[SuiteResult], dict[str, float]]:
    """Run (a filtered subset of) all suites.

    `fault="combine-sign-flip"` flips a sign inside the scan combine for
    the duration of the run; it exists to prove the equivalence suite
    detects a broken operator, and must make the run fail.

    Returns the results plus wall seconds per suite (reported on stdout
    only; timings never go into the NDJSON report, which stays
    byte-reproducible).
    """
    names = [n for n in SUITES if name_filter is None or name_filter in n]
    if name_filter is not None and not names:
        raise ConfigError(f"--filter {name_filter!r} matches no suite; have {sorted(SUITES)}")
    if fault is not None and fault != "combine-sign-flip":
        raise ConfigError(f"unknown fault {fault!r}; have ('combine-sign-flip',)")
    results = []
    seconds: dict[str, float] = {}
    if fault == "combine-sign-flip":
        scan_mod.FAULT_COMBINE_SIGN_FLIP = True
    try:
        for name in names:
            t0 = time.perf_counter()
            try:
                results.append(SUITES[name](seed=seed, samples=samples))
            except PalimpsaError as e:
                # A numeric blow-up inside a property suite is a failed
                # property, not a harness crash (the fault hook can push
                # importances negative mid-scan).
                results.append(SuiteResult(name=name, samples=samples, worst=float("inf"),
                                           tol=0.0, passed=False, detail={"error": str(e)}))
            seconds[name] = time.perf_counter() - t0
    finally:
        scan_mod.FAULT_COMBINE_SIGN_FLIP = False
    return results, seconds

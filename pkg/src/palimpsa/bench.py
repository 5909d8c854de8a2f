"""Throughput microbenchmark: sequential reference vs chunked evaluation.

Times are monotonic wall clock, median of `reps` runs after `warmup`
discarded iterations. Inputs are deterministic per seed and reused across
every grid point of the same (L, d_model), so engines and rules see
identical data. The model dimension maps to a single head with
d_k = d_v = d_model // 4, mirroring the usual head-width fraction at
desk scale.

Nothing here is gated on absolute numbers; reports carry the machine
fingerprint so results are never compared across hosts silently.
"""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rules import sequential_scan
from .scan import ChunkPlan, chunked_forward
from .types import DualState, HeadParams, RuleKind, StepInput

_RULES = {
    "palimpsa": RuleKind.PALIMPSA,
    "mamba2-limit": RuleKind.MAMBA2_LIMIT,
}


@dataclass(frozen=True)
class BenchRow:
    engine: str  # sequential | chunked
    rule: str
    seq_len: int
    d_model: int
    chunk_len: int  # 0 for the sequential engine
    workers: int  # 1 for the sequential engine
    reps: int
    wall_min_s: float
    wall_median_s: float
    wall_max_s: float

    @property
    def tokens_per_s(self) -> float:
        return self.seq_len / self.wall_median_s


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    env: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    ratios: list = field(default_factory=list)  # chunked palimpsa vs mamba2-limit cost


def environment_fingerprint() -> dict:
    import multiprocessing

    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": multiprocessing.cpu_count(),
    }


def _bench_inputs(seed: int, L: int, d_k: int, d_v: int):
    rng = np.random.default_rng((seed, L, d_k, d_v))
    K = rng.standard_normal((L, d_k))
    V = rng.standard_normal((L, d_v))
    Q = rng.standard_normal((L, d_k))
    B = rng.uniform(0.1, 1.0, (L, d_v))
    D = rng.uniform(0.05, 0.3, L)
    return [StepInput(k=K[t], v=V[t], q=Q[t], beta=B[t], d=float(D[t])) for t in range(L)]


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def _measure(fn, reps: int, warmup: int) -> tuple[float, float, float]:
    for _ in range(warmup):
        fn()
    times = [_time_once(fn) for _ in range(reps)]
    return min(times), statistics.median(times), max(times)


def run_bench(
    rules: list,
    engines: list,
    seq_lens: list,
    d_models: list,
    chunk_lens: list,
    workers: list,
    reps: int = 5,
    warmup: int = 2,
    seed: int = 0,
) -> BenchReport:
    if reps < 5:
        raise ConfigError(f"bench needs reps >= 5, got {reps}")
    report = BenchReport(env=environment_fingerprint())
    for L in seq_lens:
        for dm in d_models:
            d_k = d_v = max(1, dm // 4)
            hp = HeadParams(d_k=d_k, d_v=d_v, decay_rate=0.3, prior_precision=1.0)
            inputs = _bench_inputs(seed, L, d_k, d_v)
            init = DualState.rest(hp)
            for rule_name in rules:
                kind = _RULES[rule_name]
                if "sequential" in engines:
                    lo, med, hi = _measure(lambda: sequential_scan(kind, init, inputs, hp), reps, warmup)
                    report.rows.append(BenchRow("sequential", rule_name, L, dm, 0, 1, reps, lo, med, hi))
                if "chunked" in engines and kind is RuleKind.PALIMPSA:
                    for cl in chunk_lens:
                        for w in workers:
                            plan = ChunkPlan(chunk_len=cl, workers=w, retain_checkpoints=False)
                            lo, med, hi = _measure(lambda: chunked_forward(inputs, init, hp, plan), reps, warmup)
                            report.rows.append(BenchRow("chunked", rule_name, L, dm, cl, w, reps, lo, med, hi))
    _soft_checks(report, seq_lens, chunk_lens, workers)
    _cost_ratios(report)
    return report


def _soft_checks(report: BenchReport, seq_lens, chunk_lens, workers) -> None:
    """Medians should not get slower as workers grow (largest L, fixed
    chunk_len); one inversion is allowed for noise. Warnings only."""
    if not seq_lens or len(workers) < 2:
        return
    L = max(seq_lens)
    for cl in chunk_lens:
        series = [(r.workers, r.wall_median_s) for r in report.rows
                  if r.engine == "chunked" and r.seq_len == L and r.chunk_len == cl]
        series.sort()
        inversions = sum(1 for (_, a), (_, b) in zip(series, series[1:]) if b > a)
        if inversions > 1:
            report.warnings.append(
                f"workers not monotone at L={L} chunk_len={cl}: "
                + ", ".join(f"w={w}:{t:.4f}s" for w, t in series)
            )


def _cost_ratios(report: BenchReport) -> None:
    """Relative sequential cost of the dual-state rule over its
    pinned-importance limit, per (L, d_model)."""
    seq = {}
    for r in report.rows:
        if r.engine == "sequential":
            seq.setdefault((r.seq_len, r.d_model), {})[r.rule] = r.wall_median_s
    for (L, dm), by_rule in sorted(seq.items()):
        if "palimpsa" in by_rule and "mamba2-limit" in by_rule:
            report.ratios.append({
                "seq_len": L,
                "d_model": dm,
                "palimpsa_over_mamba2_limit": by_rule["palimpsa"] / by_rule["mamba2-limit"],
            })


def worker_speedup(report: BenchReport, seq_len: int, low: int = 1, high: int = 4) -> float | None:
    """Best median-throughput ratio of `high` workers over `low`, compared
    at the same chunk_len; None when the grid lacks a comparable pair."""
    by_cl: dict[int, dict[int, float]] = {}
    for r in report.rows:
        if r.engine == "chunked" and r.seq_len == seq_len and r.workers in (low, high):
            by_cl.setdefault(r.chunk_len, {})[r.workers] = r.wall_median_s
    ratios = [d[low] / d[high] for d in by_cl.values() if low in d and high in d]
    return max(ratios) if ratios else None

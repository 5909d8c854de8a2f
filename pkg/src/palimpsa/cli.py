"""Command-line harness: verify, train, bench, oracle.

Exit codes: 0 success, 1 suite failure, 2 config error, 3 numeric abort.

Every file written carries the config digest and the seed. NDJSON outputs
contain no wall-clock fields, so a rerun with the same config reproduces
them byte for byte in 64-bit mode at a fixed worker count; timing lives
on stdout and in the bench CSV only.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import bench as bench_mod
from . import verify as verify_mod
from .config import TRAIN_PRESETS, RunConfig, load_config
from .errors import ConfigError, NumericError
from .mqar.model import ModelConfig
from .mqar.train import TrainConfig, train
from .oracles import (
    adam_transcription,
    exp_neg_extended,
    mesa_sherman_morrison,
    palimpsa_unrolled,
)

EXIT_OK = 0
EXIT_SUITE_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_ABORT = 3


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_ndjson(path: Path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------- verify ----------


def cmd_verify(cfg: RunConfig) -> int:
    v = cfg.verify
    results, seconds = verify_mod.run_suites(
        seed=cfg.seed,
        samples=v["samples"],
        name_filter=v["filter"],
        fault=v["fault"],
    )
    records = [{"type": "meta", "command": "verify", "digest": cfg.digest, "seed": cfg.seed,
                "samples": v["samples"], "filter": v["filter"], "fault": v["fault"]}]
    for r in results:
        records.append({"type": "suite", "name": r.name, "samples": r.samples,
                        "worst": r.worst, "tol": r.tol, "pass": r.passed,
                        "detail": r.detail, "digest": cfg.digest, "seed": cfg.seed})
    out = _out_dir(cfg) / "verify.ndjson"
    _write_ndjson(out, records)
    for r in results:
        print(f"{r.line()}  ({seconds[r.name]:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"report: {out}")
    if failed:
        print(f"FAILED suites: {', '.join(failed)}")
        return EXIT_SUITE_FAILURE
    print(f"all {len(results)} suites passed")
    return EXIT_OK


# ---------- train ----------


def _model_config(t: dict, variant: str, precision: str) -> ModelConfig:
    return ModelConfig(
        d_model=t["d_model"],
        n_layers=t["n_layers"],
        n_heads=t["n_heads"],
        d_state=t["d_state"],
        expand_v=t["expand_v"],
        expand_k=t["expand_k"],
        beta_rank=t["beta_rank"],
        variant=variant,
        b_scale_init=float(t["b_scale_init"]),
        vocab_size=t["vocab_size"],
        precision=precision,
        chunk_len=t["chunk_len"],
    )


def _train_config(cfg: RunConfig, variant: str, lr: float, seed: int) -> TrainConfig:
    t = cfg.train
    precision = t["precision"] or cfg.precision
    return TrainConfig(
        model=_model_config(t, variant, precision),
        stages=tuple(tuple(s) for s in t["stages"]),
        steps_per_stage=t["steps_per_stage"],
        batch_size=t["batch_size"],
        lr=float(lr),
        weight_decay=float(t["weight_decay"]),
        seed=seed,
        key_vocab=t["key_vocab"],
        value_vocab=t["value_vocab"],
        eval_every=t["eval_every"],
        eval_samples=t["eval_samples"],
        early_stop_accuracy=t["early_stop_accuracy"],
        log_every=t["log_every"],
    )


def _run_tag(variant: str, lr: float, seed: int) -> str:
    return f"{variant}_lr{lr:g}_seed{seed}"


def cmd_train(cfg: RunConfig, dry_run: bool = False, resume: str | None = None) -> int:
    t = cfg.train
    runs = [(variant, lr, seed) for variant in t["variants"] for lr in t["lrs"] for seed in t["seeds"]]
    # Validate every run config up front so a bad grid fails before any work.
    train_cfgs = {key: _train_config(cfg, *key) for key in runs}
    if dry_run:
        print(f"dry run: {len(runs)} training runs validate OK (digest {cfg.digest[:16]})")
        for variant, lr, seed in runs:
            print(f"  {_run_tag(variant, lr, seed)}")
        return EXIT_OK
    if resume is not None and len(runs) != 1:
        raise ConfigError("--resume needs a config with exactly one (variant, lr, seed) run")

    out = _out_dir(cfg)
    summary_rows = []
    aborted = False
    for variant, lr, seed in runs:
        tag = _run_tag(variant, lr, seed)
        tc = train_cfgs[(variant, lr, seed)]
        records = [{"type": "meta", "command": "train", "digest": cfg.digest, "seed": seed,
                    "variant": variant, "lr": lr, "precision": tc.model.precision,
                    "stages": [list(s) for s in tc.stages]}]
        sink = records.append
        ckpt = out / f"checkpoint_{tag}.bin"
        print(f"run {tag}: {tc.steps_per_stage} steps/stage x {len(tc.stages)} stages")
        try:
            result = train(tc, sink=sink, checkpoint_path=str(ckpt),
                           save_every=t["save_every"], resume_from=resume)
        except NumericError as e:
            _write_ndjson(out / f"metrics_{tag}.ndjson", records)
            print(f"  numeric abort: {e}; snapshot at {ckpt}")
            aborted = True
            break
        _write_ndjson(out / f"metrics_{tag}.ndjson", records)
        row = {"variant": variant, "lr": lr, "seed": seed,
               "steps_run": result.steps_run, "stopped_early": result.stopped_early}
        for i, acc in enumerate(result.stage_accuracy):
            row[f"acc_stage_{i}"] = acc
        row["digest"] = cfg.digest
        summary_rows.append(row)
        accs = ", ".join(f"{a:.4f}" for a in result.stage_accuracy)
        print(f"  done: steps={result.steps_run} accuracy per stage [{accs}]")

    if summary_rows:
        _write_summary(out, cfg, summary_rows)
    return EXIT_NUMERIC_ABORT if aborted else EXIT_OK


def _write_summary(out: Path, cfg: RunConfig, rows: list) -> None:
    n_stages = max(len([k for k in r if k.startswith("acc_stage_")]) for r in rows)
    fields = ["variant", "lr", "seed", "steps_run", "stopped_early"]
    fields += [f"acc_stage_{i}" for i in range(n_stages)] + ["digest"]
    csv_path = out / "summary.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"summary: {csv_path}")

    # Variant comparison on final-stage accuracy; direction is informational.
    last = f"acc_stage_{n_stages - 1}"
    by_variant: dict[str, list] = {}
    for row in rows:
        if last in row:
            by_variant.setdefault(row["variant"], []).append(row[last])
    records = [{"type": "meta", "command": "train-summary", "digest": cfg.digest, "seed": cfg.seed}]
    means = {v: sum(a) / len(a) for v, a in by_variant.items()}
    for variant, accs in sorted(by_variant.items()):
        records.append({"type": "variant-mean", "variant": variant, "runs": len(accs),
                        "mean_final_accuracy": means[variant], "digest": cfg.digest, "seed": cfg.seed})
        print(f"  {variant}: mean final accuracy {means[variant]:.4f} over {len(accs)} runs")
    if "palimpsa-d" in means and "ablation" in means:
        holds = means["palimpsa-d"] >= means["ablation"]
        records.append({"type": "direction", "check": "metaplastic >= ablation on mean",
                        "palimpsa_d_mean": means["palimpsa-d"], "ablation_mean": means["ablation"],
                        "holds": holds, "digest": cfg.digest, "seed": cfg.seed})
        note = "holds" if holds else "DOES NOT hold (soft check, not a failure)"
        print(f"  direction metaplastic >= ablation: {note}")
    _write_ndjson(out / "summary.ndjson", records)


# ---------- bench ----------


def cmd_bench(cfg: RunConfig) -> int:
    b = cfg.bench
    report = bench_mod.run_bench(
        rules=b["rules"], engines=b["engines"], seq_lens=b["seq_lens"],
        d_models=b["d_models"], chunk_lens=b["chunk_lens"],
        workers=b["workers"] if cfg.workers == 1 else [cfg.workers],
        reps=b["reps"], warmup=b["warmup"], seed=cfg.seed,
    )
    out = _out_dir(cfg)
    csv_path = out / "bench.csv"
    fields = ["engine", "rule", "seq_len", "d_model", "chunk_len", "workers", "reps",
              "wall_min_s", "wall_median_s", "wall_max_s", "tokens_per_s", "digest", "seed"]
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for r in report.rows:
            row = {k: getattr(r, k) for k in fields if k not in ("tokens_per_s", "digest", "seed")}
            row.update(tokens_per_s=r.tokens_per_s, digest=cfg.digest, seed=cfg.seed)
            writer.writerow(row)

    records = [{"type": "meta", "command": "bench", "digest": cfg.digest, "seed": cfg.seed,
                "env": report.env}]
    for r in report.rows:
        records.append({"type": "bench-row", "engine": r.engine, "rule": r.rule,
                        "seq_len": r.seq_len, "d_model": r.d_model, "chunk_len": r.chunk_len,
                        "workers": r.workers, "reps": r.reps, "wall_min_s": r.wall_min_s,
                        "wall_median_s": r.wall_median_s, "wall_max_s": r.wall_max_s,
                        "digest": cfg.digest, "seed": cfg.seed})
    for ratio in report.ratios:
        records.append({"type": "cost-ratio", **ratio, "digest": cfg.digest, "seed": cfg.seed})
    for w in report.warnings:
        records.append({"type": "warning", "message": w, "digest": cfg.digest, "seed": cfg.seed})
    _write_ndjson(out / "bench.ndjson", records)

    for r in report.rows:
        print(f"{r.engine:10s} {r.rule:13s} L={r.seq_len:<6d} d={r.d_model:<5d} "
              f"cl={r.chunk_len:<4d} w={r.workers}  median {r.wall_median_s:.4f}s  "
              f"{r.tokens_per_s:>12,.0f} tok/s")
    for ratio in report.ratios:
        print(f"cost ratio palimpsa/mamba2-limit at L={ratio['seq_len']} d={ratio['d_model']}: "
              f"{ratio['palimpsa_over_mamba2_limit']:.2f}x (reported, not gated)")
    for w in report.warnings:
        print(f"warning: {w}")
    print(f"report: {csv_path}")
    return EXIT_OK


# ---------- oracle ----------


def oracle_rows() -> list:
    """Closed-form oracle values behind the frozen test constants.

    Each row is (name, value-string) with 15 significant digits, computed
    here from scratch so the provenance of every derived constant is
    executable. Tests import this and compare against their frozen copies.
    """
    import numpy as np

    from .types import DualState, HeadParams, MesaState, StepInput

    rows: list = []
    for rate, d in ((0.05, 3.0), (0.2, 1.0), (1e-4, 1.0)):
        rows.append((f"alpha_from_step({rate:g}, {d:g})", exp_neg_extended(rate * d, sig=15)))
    rows.append(("memory_window(alpha=0.99)", f"{1.0 / (1.0 - 0.99):.15g}"))

    rng = np.random.default_rng(12345)
    hp = HeadParams(d_k=2, d_v=2, decay_rate=0.3, prior_precision=1.0)
    inputs = [
        StepInput(k=rng.standard_normal(2), v=rng.standard_normal(2), q=rng.standard_normal(2),
                  beta=rng.uniform(0.1, 1.0, 2), d=float(rng.uniform(0.05, 0.4)))
        for _ in range(8)
    ]
    final = palimpsa_unrolled(inputs, DualState.rest(hp), hp)
    for i, val in enumerate(final.mu.ravel()):
        rows.append((f"eight_step_final_mu[{i}]", f"{val:.15g}"))
    for i, val in enumerate(final.imp.ravel()):
        rows.append((f"eight_step_final_imp[{i}]", f"{val:.15g}"))

    hp_m = HeadParams(d_k=8, d_v=4, decay_rate=0.3, prior_precision=1.0)
    rng_m = np.random.default_rng(23)
    from .rules import mesa_step

    inputs_m = [
        StepInput(k=rng_m.standard_normal(8), v=rng_m.standard_normal(4), q=rng_m.standard_normal(8),
                  beta=np.full(4, float(rng_m.uniform(0.0, 1.0))), d=float(rng_m.uniform(0.0, 0.4)))
        for _ in range(64)
    ]
    state = MesaState.rest(hp_m)
    for inp in inputs_m:
        state = mesa_step(state, inp, hp_m)
    oracle = mesa_sherman_morrison(inputs_m, MesaState.rest(hp_m), hp_m)
    resid = max(float(np.max(np.abs(state.prec - oracle.prec))),
                float(np.max(np.abs(state.mu - oracle.mu))))
    rows.append(("mesa_dual_route_residual_64_steps", f"{resid:.15g}"))

    import math

    for i, x0 in enumerate((1.0, -2.0, 0.5, 3.0, -0.25)):
        grads = [math.sin(i + 0.1 * t) for t in range(100)]
        x = adam_transcription(x0, grads, lr=2e-3, weight_decay=0.01)
        rows.append((f"adam_100_step_final_x[{i}]", f"{x:.15g}"))
    return rows


def cmd_oracle(cfg: RunConfig) -> int:
    rows = oracle_rows()
    width = max(len(name) for name, _ in rows)
    print(f"# digest {cfg.digest}  seed {cfg.seed}")
    for name, value in rows:
        print(f"{name:<{width}s}  {value}")
    return EXIT_OK


# ---------- argument parsing ----------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="palimpsa",
        description="Dual-state fast-weight memory: verification, training, benchmarks, oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="YAML configuration document")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--workers", type=int, help="worker count override")
        p.add_argument("--precision", choices=("f32", "f64"), help="precision override")
        p.add_argument("--out", metavar="DIR", help="output directory override")

    pv = sub.add_parser("verify", help="run randomized property suites")
    common(pv)
    pv.add_argument("--filter", metavar="NAME", help="run only suites whose name contains NAME")
    pv.add_argument("--fault", choices=("combine-sign-flip",),
                    help="test hook: inject a sign fault into the scan combine; the run must fail")
    pv.add_argument("--samples", type=int, help="cases per randomized suite")

    pt = sub.add_parser("train", help="train recall models and emit metrics")
    common(pt)
    pt.add_argument("--preset", choices=sorted(TRAIN_PRESETS), help="named train preset")
    pt.add_argument("--dry-run", action="store_true", help="validate config and exit")
    pt.add_argument("--resume", metavar="CKPT", help="resume a single run from a checkpoint file")

    pb = sub.add_parser("bench", help="throughput microbenchmark")
    common(pb)

    po = sub.add_parser("oracle", help="print closed-form oracle values (15 significant digits)")
    common(po)
    return parser


def _overrides_from_args(args) -> dict:
    over = {
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "precision": getattr(args, "precision", None),
        "out": getattr(args, "out", None),
    }
    if args.command == "verify":
        over["verify.filter"] = args.filter
        over["verify.fault"] = args.fault
        over["verify.samples"] = args.samples
    if args.command == "train":
        over["train.preset"] = args.preset
    return over


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides_from_args(args))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    try:
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "train":
            return cmd_train(cfg, dry_run=args.dry_run, resume=args.resume)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC_ABORT


if __name__ == "__main__":
    sys.exit(main())

"""Curriculum training loop for the recall task.

Determinism contract: the batch for global step s of stage j is drawn
from a fresh generator seeded by (seed, j, s), never from loop state, so
a resumed run consumes exactly the same data as an uninterrupted one.
Adam state and parameters round-trip through the checkpoint container,
which makes resumption bitwise at 64-bit precision.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ConfigError, NumericError
from .checkpoint import load_checkpoint, save_checkpoint
from .data import MqarConfig, generate_mqar
from .model import ModelConfig, ModelParams, init_params, loss_and_grads, evaluate
from .optim import AdamState, adam_step

# lr sweep used by the comparison preset
LR_GRID = (1e-3, 2.15e-3, 4.64e-3, 1e-2)

_EVAL_STREAM = 99991  # distinguishes eval draws from training draws


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    stages: tuple = ((64, 16),)
    steps_per_stage: int = 1000
    batch_size: int = 32
    lr: float = 3e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 1
    key_vocab: int = 128
    value_vocab: int = 128
    eval_every: int = 25
    eval_samples: int = 128
    early_stop_accuracy: float | None = None
    log_every: int = 10

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("at least one curriculum stage is required")
        if self.steps_per_stage < 1 or self.batch_size < 1:
            raise ConfigError("steps_per_stage and batch_size must be positive")
        if self.key_vocab + self.value_vocab != self.model.vocab_size:
            raise ConfigError("key_vocab + value_vocab must equal the model vocabulary")
        for idx in range(len(self.stages)):
            self.stage_data_cfg(idx)  # raises on an infeasible stage

    def stage_data_cfg(self, stage_idx: int, batch: int | None = None) -> MqarConfig:
        L, kv = self.stages[stage_idx]
        return MqarConfig(
            seq_len=L,
            num_kv=kv,
            key_vocab=self.key_vocab,
            value_vocab=self.value_vocab,
            seed=self.seed,
            batch=self.batch_size if batch is None else batch,
        )


def config_fingerprint(cfg: TrainConfig) -> str:
    """sha256 over the canonical JSON form of the run configuration."""

    def plain(obj):
        if isinstance(obj, (ModelConfig, TrainConfig)):
            return {k: plain(v) for k, v in vars(obj).items()}
        if isinstance(obj, (tuple, list)):
            return [plain(v) for v in obj]
        return obj

    blob = json.dumps(plain(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class TrainResult:
    params: ModelParams
    opt_state: AdamState
    records: list
    stage_accuracy: list
    steps_run: int
    stopped_early: bool = False


def _eval_set(cfg: TrainConfig, stage_idx: int):
    rng = np.random.default_rng((cfg.seed, _EVAL_STREAM, stage_idx))
    data_cfg = cfg.stage_data_cfg(stage_idx, batch=cfg.eval_samples)
    return generate_mqar(data_cfg, rng=rng)


def train(
    cfg: TrainConfig,
    sink: Callable[[dict], None] | None = None,
    checkpoint_path=None,
    resume_from=None,
    save_every: int | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run the curriculum; emit one metrics record per logged step.

    stop_after caps the number of global steps executed (used to split a
    run across two processes when testing resumption).
    """
    digest = config_fingerprint(cfg)
    n_stages = len(cfg.stages)
    total = n_stages * cfg.steps_per_stage

    if resume_from is not None:
        arrays, meta = load_checkpoint(resume_from)
        if meta["config_digest"] != digest:
            raise ConfigError("checkpoint was produced by a different configuration")
        params = init_params(cfg.model, cfg.seed)
        pdict = params.to_dict()
        params.apply_dict({k: arrays[k] for k in pdict})
        pdict = params.to_dict()
        opt = AdamState(
            m={k: arrays["m." + k] for k in pdict},
            v={k: arrays["v." + k] for k in pdict},
            t=meta["t"],
        )
        start = meta["next_step"]
        stage_accuracy = list(meta["stage_accuracy"])
    else:
        params = init_params(cfg.model, cfg.seed)
        pdict = params.to_dict()
        opt = AdamState.init(pdict)
        start = 1
        stage_accuracy = []

    records: list = []
    eval_cache: dict = {}

    def emit(rec: dict):
        records.append(rec)
        if sink is not None:
            sink(rec)

    def do_checkpoint(next_step: int):
        if checkpoint_path is None:
            return
        arrays = dict(pdict)
        arrays.update({"m." + k: v for k, v in opt.m.items()})
        arrays.update({"v." + k: v for k, v in opt.v.items()})
        save_checkpoint(
            checkpoint_path,
            arrays,
            {
                "config_digest": digest,
                "seed": cfg.seed,
                "next_step": next_step,
                "t": opt.t,
                "stage_accuracy": stage_accuracy,
            },
        )

    executed = 0
    gstep = start
    stopped_early = False
    while gstep <= total:
        if stop_after is not None and executed >= stop_after:
            break
        stage_idx = (gstep - 1) // cfg.steps_per_stage
        step_in_stage = (gstep - 1) % cfg.steps_per_stage + 1
        rng = np.random.default_rng((cfg.seed, stage_idx, step_in_stage))
        samples = generate_mqar(cfg.stage_data_cfg(stage_idx), rng=rng)
        tokens = np.stack([s.tokens for s in samples])
        mask = np.stack([s.query_mask for s in samples])

        try:
            loss, grads, diag = loss_and_grads(params, (tokens, mask), cfg.model)
        except NumericError as err:
            emit({"type": "abort", "step": gstep, "stage": stage_idx, "error": str(err)})
            do_checkpoint(gstep)
            raise
        if not math.isfinite(loss):
            emit({"type": "abort", "step": gstep, "stage": stage_idx, "loss": repr(loss),
                  "mean_log_N": diag.mean_log_N,
                  "ratio_per_head": [float(x) for x in diag.metaplasticity_ratio.ravel()]})
            do_checkpoint(gstep)
            raise NumericError("training loss diverged", where=f"step {gstep}")
        adam_step(pdict, grads, opt, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
        executed += 1

        acc = None
        stage_done = step_in_stage == cfg.steps_per_stage
        if step_in_stage % cfg.eval_every == 0 or stage_done:
            if stage_idx not in eval_cache:
                eval_cache[stage_idx] = _eval_set(cfg, stage_idx)
            acc = evaluate(params, cfg.model, eval_cache[stage_idx])
            if cfg.early_stop_accuracy is not None and acc >= cfg.early_stop_accuracy:
                stage_done = True  # ends the stage early, curriculum continues
                stopped_early = True

        if step_in_stage % cfg.log_every == 0 or gstep == 1 or stage_done or acc is not None:
            diag.check()
            diag.query_accuracy = acc
            emit({
                "step": gstep,
                "stage": stage_idx,
                "loss": float(loss),
                "accuracy": acc,
                "mean_log_N": diag.mean_log_N,
                "ratio_per_head": [float(x) for x in diag.metaplasticity_ratio.ravel()],
                "i_min": float(diag.i_min.min()),
            })

        if save_every is not None and executed % save_every == 0:
            do_checkpoint(gstep + 1)

        if stage_done:
            stage_accuracy.append(acc)
            gstep = (stage_idx + 1) * cfg.steps_per_stage + 1
        else:
            gstep += 1

    do_checkpoint(gstep)
    return TrainResult(
        params=params,
        opt_state=opt,
        records=records,
        stage_accuracy=stage_accuracy,
        steps_run=executed,
        stopped_early=stopped_early,
    )

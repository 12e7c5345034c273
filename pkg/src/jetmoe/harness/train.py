"""Training, fine-tuning, and evaluation loops.

Every loop is deterministic given the run seed: model init, batch sampling,
and example order all derive from it. Metrics go to ``<out_dir>/metrics.log``
as one JSON object per line.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import ndauto as nd
from ..checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ..errors import ConfigurationError, NumericError
from ..model import JetMoeModel, build_model, forward
from ..objectives import (PreferenceBatch, aux_means, dpo_loss, lm_cross_entropy,
                          sequence_logprobs, total_pretrain_loss)
from ..optim import AdamW, WsdSchedule, clip_grad_norm, wsd_lr
from .config import FinetuneConfig, TrainRunConfig
from .data import (ByteBatcher, PreferenceExample, SftExample, epoch_batches, pack_responses,
                   read_corpus, windows)

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
# fields that depend on the clock rather than the computation
TIMING_FIELDS = ("tokens_per_second", "wall_time")


class MetricsWriter:
    """Append-only JSON-lines metrics sink."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a" if append else "w")
        self._last_step: int | None = None

    def write(self, record: dict) -> None:
        step = record["step"]
        if self._last_step is not None and step <= self._last_step:
            raise ValueError(f"metrics step {step} is not after {self._last_step}")
        self._last_step = step
        self._fh.write(json.dumps({"schema": METRICS_SCHEMA, **record}) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def strip_timing(records: Sequence[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in records]


@dataclass
class RunResult:
    model: JetMoeModel
    optimizer: AdamW
    records: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def _optimizer(cfg: TrainRunConfig) -> AdamW:
    o = cfg.optimizer
    return AdamW(beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)


def optimize_step(model: JetMoeModel, optimizer: AdamW, compute: Callable[[], tuple[nd.Tensor, dict]],
                  lr: float, clip_norm: float) -> tuple[float, dict, float]:
    """Forward + backward + clip + AdamW. Returns (loss, info, clip scale)."""
    with nd.Tape() as tape:
        tape.watch(model.params)
        loss, info = compute()
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value}")
        tape.backward(loss)
    grads = {name: p.grad for name, p in model.params.items()}
    scale = clip_grad_norm(grads, clip_norm)
    optimizer.step(model.params, grads, lr)
    for p in model.params.values():
        p.grad = None
    return value, info, scale


def _router_record(aux) -> dict:
    bal, zl = aux_means(aux)
    return {"balance_loss": bal, "z_loss": zl,
            "dispatch_fractions": [[float(v) for v in s.f.data] for s in aux]}


def _pretrain_loss(model: JetMoeModel, inputs, targets, mask=None):
    logits, aux = forward(model, inputs)
    lm = lm_cross_entropy(logits, targets, mask)
    total = total_pretrain_loss(lm, aux, [s.logits for s in aux], model.config.loss_weights)
    return total, {"lm_loss": lm.item(), **_router_record(aux)}


def _resume_state(path, stage: str, cfg: TrainRunConfig) -> tuple[Checkpoint, int]:
    ck = load_checkpoint(path)
    if ck.model.config != cfg.model:
        raise ConfigurationError("checkpoint model config differs from the run config")
    step = int(ck.extra.get("step", 0)) if ck.extra.get("stage") == stage else 0
    return ck, step


def pretrain(cfg: TrainRunConfig, resume=None) -> RunResult:
    """Language-model pretraining with auxiliary router losses and WSD schedule."""
    if cfg.corpus is None:
        raise ConfigurationError("pretraining needs a corpus path")
    batcher = ByteBatcher(read_corpus(cfg.corpus), cfg.seq_len)
    phase2 = ByteBatcher(read_corpus(cfg.phase2_corpus), cfg.seq_len) if cfg.phase2_corpus else None
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([cfg.seed, 1])
    start = 0
    if resume is not None:
        ck, start = _resume_state(resume, "pretrain", cfg)
        model = ck.model
        optimizer = ck.optimizer or _optimizer(cfg)
        if ck.rng_state is not None and start > 0:
            rng.bit_generator.state = ck.rng_state
    else:
        model = build_model(cfg.model, cfg.seed)
        optimizer = _optimizer(cfg)

    result = RunResult(model, optimizer)
    t0 = time.perf_counter()
    with MetricsWriter(out / "metrics.log", append=start > 0) as writer:
        for step in range(start, cfg.steps):
            src = phase2 if phase2 is not None and step >= cfg.phase2_start else batcher
            inputs, targets = src.sample(rng, cfg.batch_size)
            lr = wsd_lr(step, cfg.schedule)
            tic = time.perf_counter()
            loss, info, scale = optimize_step(model, optimizer, lambda: _pretrain_loss(model, inputs, targets),
                                              lr, cfg.optimizer.clip_norm)
            toc = time.perf_counter()
            if step % cfg.log_interval == 0 or step == cfg.steps - 1:
                rec = {"stage": "pretrain", "step": step, "lm_loss": info["lm_loss"],
                       "balance_loss": info["balance_loss"], "z_loss": info["z_loss"],
                       "total_loss": loss, "lr": lr, "grad_scale": scale,
                       "dispatch_fractions": info["dispatch_fractions"],
                       "tokens_per_second": cfg.batch_tokens / max(toc - tic, 1e-9),
                       "wall_time": toc - t0}
                writer.write(rec)
                result.records.append(rec)
                log.info("step %d lm %.4f total %.4f lr %.2e", step, info["lm_loss"], loss, lr)
            if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                save_checkpoint(out / f"pretrain-step{step + 1:06d}.ckpt", model, optimizer,
                                rng.bit_generator.state, {"stage": "pretrain", "step": step + 1})
    result.checkpoint = save_checkpoint(out / "pretrain.ckpt", model, optimizer, rng.bit_generator.state,
                                        {"stage": "pretrain", "step": max(cfg.steps, start)})
    return result


def _finetune_plan(n: int, ft: FinetuneConfig, seed: int, salt: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, salt])
    batches = []
    for _ in range(ft.epochs):
        batches.extend(epoch_batches(n, ft.batch_size, rng))
    if ft.steps is not None:
        while len(batches) < ft.steps:
            batches.extend(epoch_batches(n, ft.batch_size, rng))
        batches = batches[:ft.steps]
    return batches


def _init_finetune(cfg: TrainRunConfig, init, stage: str):
    """Model/optimizer/start step from a model, a checkpoint path, or fresh init."""
    if isinstance(init, JetMoeModel):
        return init, _optimizer(cfg), 0
    if init is None:
        return build_model(cfg.model, cfg.seed), _optimizer(cfg), 0
    ck, start = _resume_state(init, stage, cfg)
    optimizer = ck.optimizer if start > 0 and ck.optimizer is not None else _optimizer(cfg)
    return ck.model, optimizer, start


def sft(cfg: TrainRunConfig, examples: Sequence[SftExample], init=None) -> RunResult:
    """Supervised fine-tuning: likelihood of response tokens given the prompt."""
    if not examples:
        raise ConfigurationError("empty SFT dataset")
    model, optimizer, start = _init_finetune(cfg, init, "sft")
    ft = cfg.sft
    plan = _finetune_plan(len(examples), ft, cfg.seed, 2)
    out = Path(cfg.out_dir)
    result = RunResult(model, optimizer)
    t0 = time.perf_counter()
    with MetricsWriter(out / "metrics.log", append=start > 0) as writer:
        for step in range(start, len(plan)):
            pairs = [(examples[i].prompt, examples[i].response) for i in plan[step]]
            inputs, targets, mask = pack_responses(pairs, model.config.max_positions)
            tic = time.perf_counter()
            loss, info, scale = optimize_step(
                model, optimizer, lambda: _pretrain_loss(model, inputs, targets, mask), ft.lr,
                cfg.optimizer.clip_norm)
            toc = time.perf_counter()
            rec = {"stage": "sft", "step": step, "lm_loss": info["lm_loss"],
                   "balance_loss": info["balance_loss"], "z_loss": info["z_loss"], "total_loss": loss,
                   "lr": ft.lr, "grad_scale": scale, "dispatch_fractions": info["dispatch_fractions"],
                   "tokens_per_second": int(mask.sum()) / max(toc - tic, 1e-9), "wall_time": toc - t0}
            if step % cfg.log_interval == 0 or step == len(plan) - 1:
                writer.write(rec)
                result.records.append(rec)
    result.checkpoint = save_checkpoint(out / "sft.ckpt", model, optimizer, None,
                                        {"stage": "sft", "step": len(plan)})
    return result


def _preference_logprobs(model: JetMoeModel, examples: Sequence[PreferenceExample]):
    """Summed response log-probs for chosen and rejected, one padded forward pass."""
    pairs = [(e.prompt, e.chosen) for e in examples] + [(e.prompt, e.rejected) for e in examples]
    inputs, targets, mask = pack_responses(pairs, model.config.max_positions)
    logits, _ = forward(model, inputs)
    lp = sequence_logprobs(logits, targets, mask)
    n = len(examples)
    return lp[:n], lp[n:]


def preference_margins(policy: JetMoeModel, reference: JetMoeModel, examples: Sequence[PreferenceExample],
                       eta: float, batch_size: int = 64) -> np.ndarray:
    """Implicit reward margins of every pair (untracked evaluation)."""
    out = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        pc, pr = _preference_logprobs(policy, chunk)
        rc, rr = _preference_logprobs(reference, chunk)
        out.append(PreferenceBatch(pc, pr, rc, rr, eta).margins())
    return np.concatenate(out)


def dpo(cfg: TrainRunConfig, examples: Sequence[PreferenceExample], reference: JetMoeModel,
        init=None) -> RunResult:
    """Preference optimization against a frozen reference model.

    The policy starts as a copy of ``reference`` unless ``init`` (a model or
    a checkpoint to resume) is given.
    """
    if not examples:
        raise ConfigurationError("empty preference dataset")
    if init is None:
        init = reference.copy()
    policy, optimizer, start = _init_finetune(cfg, init, "dpo")
    if policy.config != reference.config:
        raise ConfigurationError("policy and reference model configs differ")
    ft = cfg.dpo
    plan = _finetune_plan(len(examples), ft, cfg.seed, 3)
    out = Path(cfg.out_dir)
    result = RunResult(policy, optimizer)
    t0 = time.perf_counter()

    def compute(chunk):
        rc, rr = _preference_logprobs(reference, chunk)
        pc, pr = _preference_logprobs(policy, chunk)
        batch = PreferenceBatch(pc, pr, rc, rr, ft.eta)
        margins = batch.margins()
        return dpo_loss(batch), {"reward_margin": float(margins.mean()),
                                 "reward_accuracy": float((margins > 0).mean())}

    with MetricsWriter(out / "metrics.log", append=start > 0) as writer:
        for step in range(start, len(plan)):
            chunk = [examples[i] for i in plan[step]]
            tic = time.perf_counter()
            loss, info, scale = optimize_step(policy, optimizer, lambda: compute(chunk), ft.lr,
                                              cfg.optimizer.clip_norm)
            toc = time.perf_counter()
            n_tok = sum(len(e.chosen) + len(e.rejected) for e in chunk)
            rec = {"stage": "dpo", "step": step, "dpo_loss": loss, **info, "lr": ft.lr, "grad_scale": scale,
                   "tokens_per_second": n_tok / max(toc - tic, 1e-9), "wall_time": toc - t0}
            if step % cfg.log_interval == 0 or step == len(plan) - 1:
                writer.write(rec)
                result.records.append(rec)
    result.checkpoint = save_checkpoint(out / "dpo.ckpt", policy, optimizer, None,
                                        {"stage": "dpo", "step": len(plan)})
    return result


def eval_perplexity(model: JetMoeModel, corpus: np.ndarray, seq_len: int, batch_size: int = 32) -> float:
    """exp(mean next-byte cross-entropy) over non-overlapping windows."""
    inputs, targets = windows(corpus, seq_len)
    total, count = 0.0, 0
    for i in range(0, len(inputs), batch_size):
        x, y = inputs[i:i + batch_size], targets[i:i + batch_size]
        logits, _ = forward(model, x)
        total += lm_cross_entropy(logits, y).item() * y.size
        count += y.size
    return math.exp(total / count)


def dump_schedule(schedule: WsdSchedule, total_steps: int) -> list[tuple[int, float]]:
    """(step, lr) for every step in 0..total_steps inclusive."""
    return [(s, wsd_lr(s, schedule)) for s in range(total_steps + 1)]

"""Two-phase optimization: base text-to-image pretraining, then prompted
finetuning with a locked encoder. Also trains the per-task query-only
baseline used for the cross-task contrast.

All stochastic inputs (batches, timesteps, noise) come from numpy generators
keyed by (seed, step, microbatch), so a resumed run consumes exactly the data
stream of an uninterrupted one.
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch

from .corpus.store import Corpus
from .diffusion import NoiseSchedule, make_schedule, q_sample, training_loss
from .network.checkpoint import load_model, save_model
from .network.model import (
    BASE_PHASE,
    PROMPT_PHASE,
    DiffusionModel,
    init_control_from_base,
    lock_encoder,
)
from .network.unet import ModelConfig
from .prompting import (
    PromptBatchItem,
    TaskId,
    make_base_batch,
    make_batch,
    make_single_task_batch,
)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    phase: str = BASE_PHASE
    learning_rate: float = 1e-4
    batch_size: int = 32
    grad_accumulation: int = 4
    max_steps: int = 2000
    checkpoint_every: int = 500
    seed: int = 0
    text_dropout_p: float = 0.10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema: bool = False
    ema_decay: float = 0.999
    single_threaded: bool = False
    log_every: int = 10
    task: str | None = None  # single-task baseline only

    def validate(self) -> None:
        if self.max_steps < 1 or self.batch_size < 1 or self.grad_accumulation < 1:
            raise ValueError("steps, batch size, and accumulation must be positive")
        if not 0.0 <= self.text_dropout_p <= 1.0:
            raise ValueError("text dropout must be a probability")


def collate(items: list[PromptBatchItem]):
    """Stack batch items into model-ready tensors."""
    x0 = torch.from_numpy(np.stack([it.target for it in items]))
    t = torch.tensor([it.t for it in items], dtype=torch.long)
    eps = torch.from_numpy(np.stack([it.eps for it in items]))
    texts = [it.prompt.text_guidance for it in items]
    images = None
    if items[0].prompt.query is not None and items[0].task is not None:
        queries = torch.from_numpy(np.stack([it.prompt.query for it in items]))
        if items[0].prompt.example_source is not None:
            src = torch.from_numpy(np.stack([it.prompt.example_source for it in items]))
            tgt = torch.from_numpy(np.stack([it.prompt.example_target for it in items]))
        else:
            src = tgt = None
        images = (src, tgt, queries)
    return x0, t, eps, texts, images


def train_update(
    model: DiffusionModel,
    optimizer: torch.optim.Optimizer,
    microbatches: list[list[PromptBatchItem]],
    schedule: NoiseSchedule,
) -> tuple[float, dict[str, float]]:
    """One optimizer update from accumulated microbatches.

    Each microbatch loss is scaled by 1/len(microbatches), so accumulating k
    equal microbatches is equivalent (to float precision) to one update on
    their concatenation.
    """
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    task_sums: dict[str, list] = {}
    scale = 1.0 / len(microbatches)
    for items in microbatches:
        x0, t, eps, texts, images = collate(items)
        x_t = q_sample(x0, t, eps, schedule)
        eps_hat = model.predict_eps(x_t, t, texts, images)
        loss = training_loss(eps_hat, eps)
        (loss * scale).backward()
        total += loss.item() * scale
        with torch.no_grad():
            per_item = ((eps_hat - eps) ** 2).mean(dim=(1, 2, 3))
        for it, val in zip(items, per_item.tolist()):
            if it.task is not None:
                task_sums.setdefault(it.task.value, []).append(val)
    if not math.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss {total}")
    optimizer.step()
    task_losses = {k: float(np.mean(v)) for k, v in sorted(task_sums.items())}
    return total, task_losses


def _make_optimizer(model: DiffusionModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        model.trainable_parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )


def _trainable_names(model: DiffusionModel) -> list[str]:
    return [n for n, p in model.named_parameters() if p.requires_grad]


def _optimizer_tensors(model: DiffusionModel, optimizer: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], int]:
    names = _trainable_names(model)
    params = model.trainable_parameters()
    tensors = {}
    opt_step = 0
    for name, param in zip(names, params):
        state = optimizer.state.get(param)
        if not state:
            continue
        tensors[f"{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        tensors[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
        opt_step = int(state["step"].item() if torch.is_tensor(state["step"]) else state["step"])
    return tensors, opt_step


def _restore_optimizer(model: DiffusionModel, optimizer: torch.optim.Optimizer, tensors: dict[str, np.ndarray], opt_step: int) -> None:
    if not tensors:
        return
    names = _trainable_names(model)
    for name, param in zip(names, model.trainable_parameters()):
        if f"{name}.exp_avg" not in tensors:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(opt_step)),
            "exp_avg": torch.from_numpy(tensors[f"{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"{name}.exp_avg_sq"].copy()),
        }


class EmaShadow:
    def __init__(self, model: DiffusionModel, decay: float, tensors: dict[str, np.ndarray] | None = None):
        self.decay = decay
        if tensors:
            self.shadow = {n: torch.from_numpy(a.copy()) for n, a in tensors.items()}
        else:
            self.shadow = {n: p.detach().clone() for n, p in model.named_parameters()}

    def update(self, model: DiffusionModel) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                self.shadow[name].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: t.cpu().numpy() for n, t in self.shadow.items()}


def _batch_rng(seed: int, phase: str, step: int, micro: int) -> np.random.Generator:
    phase_tag = {BASE_PHASE: 0, PROMPT_PHASE: 1, "baseline": 2}[phase]
    return np.random.default_rng((seed, phase_tag, step, micro))


def _train_loop(
    model: DiffusionModel,
    schedule: NoiseSchedule,
    corpus: Corpus,
    config: TrainConfig,
    out_dir: str,
    batch_fn,
    phase_tag: str,
    start_step: int = 0,
    opt_tensors: dict[str, np.ndarray] | None = None,
    opt_step: int = 0,
) -> str:
    """Shared optimization loop; returns the final checkpoint path."""
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
    if config.single_threaded:
        torch.set_num_threads(1)
    optimizer = _make_optimizer(model, config)
    _restore_optimizer(model, optimizer, opt_tensors or {}, opt_step)
    ema = EmaShadow(model, config.ema_decay) if config.ema else None
    log_path = os.path.join(out_dir, "logs", f"train_{phase_tag}.jsonl")
    log_mode = "a" if start_step else "w"
    last_ckpt = os.path.join(out_dir, "checkpoints", f"{phase_tag}_step{start_step:06d}.ckpt") if start_step else None
    t0 = time.monotonic()

    def save(step: int) -> str:
        path = os.path.join(out_dir, "checkpoints", f"{phase_tag}_step{step:06d}.ckpt")
        opt_t, opt_s = _optimizer_tensors(model, optimizer)
        save_model(
            path,
            model,
            schedule,
            step=step,
            corpus_fingerprint=corpus.fingerprint,
            opt_tensors=opt_t,
            opt_step=opt_s,
            ema_tensors=ema.tensors() if ema else None,
        )
        return path

    with open(log_path, log_mode) as log:
        for step in range(start_step + 1, config.max_steps + 1):
            micro = [
                batch_fn(corpus, config.batch_size, _batch_rng(config.seed, phase_tag, step, m), schedule)
                for m in range(config.grad_accumulation)
            ]
            try:
                loss, task_losses = train_update(model, optimizer, micro, schedule)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"aborted at step {step}: {exc}; last good checkpoint: {last_ckpt or 'none'}"
                ) from exc
            if ema:
                ema.update(model)
            if step % config.log_every == 0 or step == config.max_steps or step == 1:
                record = {
                    "step": step,
                    "loss": loss,
                    "task_losses": task_losses,
                    "lr": config.learning_rate,
                    "elapsed_s": round(time.monotonic() - t0, 3),
                }
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
            if step % config.checkpoint_every == 0 and step != config.max_steps:
                last_ckpt = save(step)
    return save(config.max_steps)


def pretrain_base(
    corpus: Corpus,
    config: TrainConfig,
    model_config: ModelConfig,
    schedule: NoiseSchedule | None = None,
    out_dir: str = "runs/base",
    resume: str | None = None,
) -> str:
    """Phase 1: text-conditioned denoising without any control branch."""
    config.validate()
    if config.phase != BASE_PHASE:
        raise ValueError(f"pretrain_base expects phase={BASE_PHASE!r}")
    schedule = schedule or make_schedule(1000)
    start_step, opt_t, opt_s = 0, None, 0
    if resume:
        model, schedule, ckpt = load_model(resume, expect_phase=BASE_PHASE)
        start_step, opt_t, opt_s = ckpt.step, ckpt.opt_tensors(), ckpt.opt_step
    else:
        torch.manual_seed(config.seed)
        model = DiffusionModel(model_config, phase=BASE_PHASE)
    batch_fn = lambda c, b, rng, s: make_base_batch(c, b, rng, s, config.text_dropout_p)
    return _train_loop(model, schedule, corpus, config, out_dir, batch_fn, BASE_PHASE, start_step, opt_t, opt_s)


def finetune_prompt(
    base_ckpt: str,
    corpus: Corpus,
    config: TrainConfig,
    out_dir: str = "runs/prompt",
    resume: str | None = None,
) -> str:
    """Phase 2: graft the control branch, lock the encoder, train on six tasks."""
    config.validate()
    if config.phase != PROMPT_PHASE:
        raise ValueError(f"finetune_prompt expects phase={PROMPT_PHASE!r}")
    start_step, opt_t, opt_s = 0, None, 0
    if resume:
        model, schedule, ckpt = load_model(resume, expect_phase=PROMPT_PHASE)
        start_step, opt_t, opt_s = ckpt.step, ckpt.opt_tensors(), ckpt.opt_step
    else:
        base_model, schedule, ckpt = load_model(base_ckpt, expect_phase=BASE_PHASE)
        torch.manual_seed(config.seed)
        model = init_control_from_base(base_model)
    if ckpt.corpus_fingerprint and ckpt.corpus_fingerprint != corpus.fingerprint:
        warnings.warn(
            f"corpus fingerprint mismatch: checkpoint has {ckpt.corpus_fingerprint[:12]}, "
            f"corpus is {corpus.fingerprint[:12]}"
        )
    lock_encoder(model)
    batch_fn = lambda c, b, rng, s: make_batch(c, b, rng, s, config.text_dropout_p)
    return _train_loop(model, schedule, corpus, config, out_dir, batch_fn, PROMPT_PHASE, start_step, opt_t, opt_s)


def train_single_task_baseline(
    base_ckpt: str,
    corpus: Corpus,
    config: TrainConfig,
    out_dir: str = "runs/baseline",
) -> str:
    """Per-task baseline: control branch conditioned on the query only."""
    config.validate()
    if config.task is None:
        raise ValueError("baseline training requires config.task")
    task = TaskId(config.task)
    base_model, schedule, _ = load_model(base_ckpt, expect_phase=BASE_PHASE)
    torch.manual_seed(config.seed)
    baseline_cfg = replace(base_model.config, use_pair_encoder=False)
    model = init_control_from_base(base_model, config_override=baseline_cfg)
    lock_encoder(model)
    batch_fn = lambda c, b, rng, s: make_single_task_batch(c, b, rng, s, task, config.text_dropout_p)
    return _train_loop(model, schedule, corpus, config, out_dir, batch_fn, "baseline", 0, None, 0)


def read_log(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh]

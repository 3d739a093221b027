"""Training loop: uPIT negative SI-SDR, Adam, global-norm clipping, plateau LR halving."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .config import ModelConfig, TrainConfig, to_flat
from .metrics import pit_si_sdr_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps=1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def global_norm(grads) -> float:
    return math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale all gradients so their joint 2-norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g.mul_(scale)
    return norm


class PlateauSchedule:
    """Multiply the LR by ``factor`` when validation loss has not strictly
    decreased for ``patience`` epochs, but only for epochs after ``start_epoch``."""

    def __init__(self, lr, factor=0.5, patience=3, start_epoch=65):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.start_epoch = start_epoch
        self.best = math.inf
        self.stalled = 0

    def update(self, epoch: int, val_loss: float) -> float:
        """Record the validation loss of 1-based ``epoch``; returns the LR for the next epoch."""
        if val_loss < self.best:
            self.best = val_loss
            self.stalled = 0
        else:
            self.stalled += 1
        if epoch > self.start_epoch and self.stalled >= self.patience:
            self.lr *= self.factor
            self.stalled = 0
        return self.lr


@dataclass
class TrainResult:
    history: list[dict]
    step_losses: list[float]
    best_val_loss: float
    best_epoch: int
    best_state: dict


def configure_determinism(seed: int):
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _batch_tensors(examples, dtype, rng=None, crop=None):
    n = min(ex.mixture.shape[-1] for ex in examples)
    if crop is not None and crop < n:
        starts = [int(rng.integers(0, ex.mixture.shape[-1] - crop + 1)) for ex in examples]
        n = crop
    else:
        starts = [0] * len(examples)
    mix = np.stack([ex.mixture[:, s : s + n] for ex, s in zip(examples, starts)])
    tgt = np.stack([ex.targets[:, :, s : s + n] for ex, s in zip(examples, starts)])
    return torch.as_tensor(mix, dtype=dtype), torch.as_tensor(tgt, dtype=dtype)


def evaluate_loss(model, examples, dtype=torch.float32, batch_size=1) -> float:
    model.eval()
    losses = []
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            batch = examples[i : i + batch_size]
            mix, tgt = _batch_tensors(batch, dtype)
            out = model(mix, tgt if model.needs_targets else None)
            loss, _ = pit_si_sdr_loss(out.estimates, tgt)
            losses.append(float(loss) * len(batch))
    model.train()
    return sum(losses) / max(len(examples), 1)


def train(model, train_data, valid_data, config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Train ``model`` in place.

    ``train_data`` / ``valid_data`` provide ``epoch(index) -> [MixtureExample]``.
    With ``out_dir`` the best and last checkpoints plus ``history.jsonl`` are
    written there. ``progress`` is called as ``progress(record)`` after each
    epoch.
    """
    dtype = getattr(torch, config.dtype)
    model.to(dtype)
    model.train()
    params = ad.ParamRegistry.from_module(model, trainable_only=True)
    state = AdamState()
    schedule = PlateauSchedule(config.lr, config.lr_decay_factor, config.lr_patience, config.lr_decay_start_epoch)
    rng = np.random.default_rng([config.seed, 4242])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.jsonl").write_text("")

    history, step_losses = [], []
    best_val, best_epoch, best_state = math.inf, 0, {}
    step = 0
    valid_examples = valid_data.epoch(0) if valid_data is not None else []
    for epoch in range(1, config.epochs + 1):
        examples = train_data.epoch(epoch)
        order = rng.permutation(len(examples))
        epoch_losses = []
        crop = None if config.crop_seconds is None else int(round(config.crop_seconds * model.config.sample_rate))
        for i in range(0, len(order), config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            batch = [examples[k] for k in order[i : i + config.batch_size]]
            mix, tgt = _batch_tensors(batch, dtype, rng, crop)
            out = model(mix, tgt if model.needs_targets else None)
            loss, _ = pit_si_sdr_loss(out.estimates, tgt)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}; batch seeds {[ex.seed for ex in batch]}"
                )
            grads = ad.backward(loss, params)
            clip_grad_norm(grads, config.clip_norm)
            adam_step(params, grads, state, schedule.lr)
            step += 1
            step_losses.append(float(loss.detach()))
            epoch_losses.append(step_losses[-1])
        val = evaluate_loss(model, valid_examples, dtype) if valid_examples else float(np.mean(epoch_losses))
        lr_used = schedule.lr
        schedule.update(epoch, val)
        record = {"epoch": epoch, "step": step, "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
                  "val_loss": val, "lr": lr_used}
        history.append(record)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if out_dir is not None:
                save_model(out_dir / "best.ckpt", model, config, extra={"epoch": epoch, "val_loss": val})
        if out_dir is not None:
            with open(out_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if progress is not None:
            progress(record)
        log.info("epoch %d step %d train %.3f val %.3f lr %.2e", epoch, step, record["train_loss"] or float("nan"),
                 val, lr_used)
        if config.max_steps is not None and step >= config.max_steps:
            break
    if out_dir is not None:
        save_model(out_dir / "last.ckpt", model, config, extra={"epoch": history[-1]["epoch"] if history else 0})
    return TrainResult(history, step_losses, best_val, best_epoch, best_state)


def save_model(path, model, train_config: TrainConfig | None = None, extra=None):
    meta = {"config": to_flat(model.config) if train_config is None else to_flat(model.config, train_config)}
    meta.update(extra or {})
    ad.save_checkpoint(path, ad.ParamRegistry.from_module(model), meta)


def load_model(path, dtype=torch.float32):
    from .config import resolve
    from .pipelines import build_model

    params, meta = ad.load_checkpoint(path)
    flat = {k: v for k, v in meta["config"].items() if k.startswith("model.")}
    model_config, _, _ = resolve(flat)
    model = build_model(model_config).to(dtype)
    registry = ad.ParamRegistry.from_module(model)
    missing = set(registry) ^ set(params)
    if missing:
        raise ValueError(f"checkpoint {path} does not match the model: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in registry.items():
            p.copy_(torch.as_tensor(params[name], dtype=dtype))
    return model, meta

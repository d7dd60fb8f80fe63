"""Stage 1: self-distillation between a gradient-trained auxiliary branch and
its EMA copy, the primary branch.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import ViewConfig, make_views
from .model import (Branch, EncoderConfig, ProjectionHeadConfig, init_parameters,
                    save_checkpoint)

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class TemperatureConfig:
    tau_pri: float = 0.04
    tau_aux: float = 0.1

    def __post_init__(self):
        if not 0 < self.tau_pri < self.tau_aux:
            raise ValueError("temperatures must satisfy 0 < tau_pri < tau_aux")


@dataclass
class ScheduleConfig:
    epochs: int = 300
    batch_size: int = 128
    warmup_epochs: int = 10
    peak_lr: float = 0.00025
    final_lr: float = 1e-6
    center_momentum: float = 0.9
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    clip_grad: float = 3.0
    freeze_last_layer_epochs: int = 0
    use_centering: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.center_momentum < 1:
            raise ValueError("center_momentum must lie in [0, 1)")
        if not 0 <= self.momentum_start <= self.momentum_end <= 1:
            raise ValueError("need 0 <= momentum_start <= momentum_end <= 1")
        if self.peak_lr < 0 or self.final_lr < 0:
            raise ValueError("learning rates must be non-negative")


# ---------------------------------------------------------------------------
# update rules


def sharpen(z: torch.Tensor, temperature: float, center: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise ``softmax((z - center) / temperature)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = torch.as_tensor(z)
    if not torch.isfinite(z).all():
        raise ValueError("non-finite logits")
    if center is not None:
        z = z - torch.as_tensor(center, dtype=z.dtype)
    return torch.softmax(z / temperature, dim=-1)


def cross_entropy(p_target: torch.Tensor, p_pred: torch.Tensor, eps: float = LOG_EPS) -> torch.Tensor:
    """Batch mean of ``-sum_c p_target log p_pred`` with ``p_pred`` clamped at ``eps``."""
    return -(p_target * torch.log(p_pred.clamp_min(eps))).sum(dim=-1).mean()


def view_pairs(n_global: int, n_views: int) -> list:
    """Ordered (teacher view, student view) pairs; global views come first."""
    return [(i, j) for i in range(n_global) for j in range(n_views) if j != i]


def distillation_loss(p_pri: Sequence[torch.Tensor], p_aux: Sequence[torch.Tensor],
                      reduction: str = "mean", eps: float = LOG_EPS, return_pairs: bool = False):
    """Cross-view distillation loss.

    ``p_pri[i]`` holds teacher rows for global view ``i``; ``p_aux[j]`` holds
    student rows for view ``j`` (globals first, then locals). Each ordered pair
    with ``j != i`` contributes the batch-mean cross-entropy; ``reduction``
    "mean" divides the pair sum by the number of pairs, "sum" keeps it.
    Teacher rows are treated as constants.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    pairs = view_pairs(len(p_pri), len(p_aux))
    if not pairs:
        raise ValueError("no view pairs to compare")
    total = 0.0
    for i, j in pairs:
        total = total + cross_entropy(p_pri[i].detach(), p_aux[j], eps)
    if reduction == "mean":
        total = total / len(pairs)
    return (total, pairs) if return_pairs else total


@torch.no_grad()
def update_center(mu: torch.Tensor, z_pri, lam: float) -> torch.Tensor:
    """``lam * mu + (1 - lam) * mean(z_pri)``, pooling rows of all teacher views."""
    if not 0 <= lam < 1:
        raise ValueError("center momentum must lie in [0, 1)")
    if isinstance(z_pri, (list, tuple)):
        z_pri = torch.cat([torch.as_tensor(z) for z in z_pri])
    z_pri = torch.as_tensor(z_pri)
    mu = torch.as_tensor(mu, dtype=z_pri.dtype)
    return lam * mu + (1 - lam) * z_pri.mean(dim=0)


def ema_update_params(theta_pri, theta_aux, m: float):
    """``m * theta_pri + (1 - m) * theta_aux`` elementwise.

    Modules are updated in place (parameters only) and returned; mappings of
    tensors/arrays return a new mapping; scalars and arrays return the blend.
    """
    if not 0 <= m <= 1:
        raise ValueError("momentum must lie in [0, 1]")
    if isinstance(theta_pri, nn.Module):
        pri = dict(theta_pri.named_parameters())
        aux = dict(theta_aux.named_parameters())
        _check_structure(pri, aux)
        with torch.no_grad():
            for name, p in pri.items():
                p.mul_(m).add_(aux[name].detach(), alpha=1 - m)
        return theta_pri
    if isinstance(theta_pri, Mapping):
        _check_structure(theta_pri, theta_aux)
        return {k: m * theta_pri[k] + (1 - m) * theta_aux[k] for k in theta_pri}
    return m * theta_pri + (1 - m) * theta_aux


def _check_structure(a: Mapping, b: Mapping):
    if set(a) != set(b):
        diff = sorted(set(a) ^ set(b))
        raise ValueError(f"parameter sets differ: {diff[:5]}")
    for k in a:
        if tuple(np.shape(a[k])) != tuple(np.shape(b[k])):
            raise ValueError(f"shape mismatch for {k}: {tuple(np.shape(a[k]))} vs {tuple(np.shape(b[k]))}")


def entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(LOG_EPS))).sum(dim=-1)


# ---------------------------------------------------------------------------
# schedules


def cosine_value(start: float, end: float, t: int, horizon: int) -> float:
    """Cosine interpolation hitting ``start`` at t=0 and ``end`` at t=horizon."""
    if horizon <= 0:
        return end
    return end + 0.5 * (start - end) * (1 + math.cos(math.pi * min(t, horizon) / horizon))


@dataclass
class Schedules:
    """Per-step learning rate, weight decay and teacher momentum."""

    cfg: ScheduleConfig
    steps_per_epoch: int

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return min(self.cfg.warmup_epochs * self.steps_per_epoch, self.total_steps - 1)

    def _check(self, step):
        if not 0 <= step < self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps})")

    def lr_at(self, step: int) -> float:
        self._check(step)
        w, last = self.warmup_steps, self.total_steps - 1
        if step < w:
            return self.cfg.peak_lr * step / w
        return cosine_value(self.cfg.peak_lr, self.cfg.final_lr, step - w, last - w)

    def momentum_at(self, step: int) -> float:
        self._check(step)
        return cosine_value(self.cfg.momentum_start, self.cfg.momentum_end, step, self.total_steps - 1)

    def weight_decay_at(self, step: int) -> float:
        self._check(step)
        return cosine_value(self.cfg.weight_decay, self.cfg.weight_decay_end, step, self.total_steps - 1)


# ---------------------------------------------------------------------------
# trainer


@dataclass
class DistillationState:
    primary: Branch
    auxiliary: Branch
    center: torch.Tensor
    step: int = 0
    epoch: int = 0
    config: dict = field(default_factory=dict)

    @property
    def theta_pri(self):
        return self.primary.state_dict()

    @property
    def theta_aux(self):
        return self.auxiliary.state_dict()

    def save(self, path):
        extras = {
            "center": self.center.clone(),
            "step": self.step,
            "epoch": self.epoch,
            "auxiliary": {k: v.detach().clone() for k, v in self.auxiliary.state_dict().items()},
        }
        return save_checkpoint(path, self.primary, self.config, extras, kind="stage1")


def _param_groups(model: nn.Module):
    regular, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if name.endswith(".bias") or p.ndim == 1 else regular).append(p)
    return [{"params": regular}, {"params": no_decay, "weight_decay": 0.0}]


def _as_patches(dataset) -> np.ndarray:
    patches = getattr(dataset, "patches", dataset)
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim == 4:
        patches = patches[:, 0]
    if patches.ndim != 3 or len(patches) == 0:
        raise ValueError("stage 1 needs a non-empty [N, H, W] patch array")
    return patches


def train_stage1(dataset, view_cfg: ViewConfig, enc_cfg: EncoderConfig, head_cfg: ProjectionHeadConfig,
                 sched_cfg: ScheduleConfig, temp_cfg: TemperatureConfig | None = None, seed: int = 0,
                 out_dir: str | Path | None = None, checkpoint: str | Path | None = None,
                 max_steps: int | None = None, on_step: Callable | None = None):
    """Run self-distillation; returns ``(DistillationState, log records)``.

    Each step: forward both branches, AdamW step on the auxiliary branch,
    EMA update of the primary branch, then the center update. ``on_step`` is
    called with ``(state, record)`` after every step.
    """
    temp_cfg = temp_cfg or TemperatureConfig()
    patches = _as_patches(dataset)
    torch.manual_seed(seed)
    primary, auxiliary = init_parameters(enc_cfg, head_cfg, checkpoint=checkpoint, seed=seed)
    for p in primary.parameters():
        p.requires_grad_(False)
    primary.train()
    auxiliary.train()
    config = {"encoder": asdict(enc_cfg), "head": asdict(head_cfg), "views": view_cfg.to_dict(),
              "schedule": asdict(sched_cfg), "temperature": asdict(temp_cfg), "seed": seed}
    state = DistillationState(primary, auxiliary, torch.zeros(head_cfg.output_dim), config=config)

    n = len(patches)
    steps_per_epoch = math.ceil(n / sched_cfg.batch_size)
    sched = Schedules(sched_cfg, steps_per_epoch)
    optimizer = torch.optim.AdamW(_param_groups(auxiliary), lr=0.0, weight_decay=sched_cfg.weight_decay)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "log.jsonl", "w")
    records = []
    n_global = view_cfg.n_global
    try:
        for epoch in range(sched_cfg.epochs):
            state.epoch = epoch
            order = np.random.default_rng([seed, epoch]).permutation(n)
            for b in range(steps_per_epoch):
                if max_steps is not None and state.step >= max_steps:
                    break
                step = state.step
                idx = order[b * sched_cfg.batch_size:(b + 1) * sched_cfg.batch_size]
                views = make_views(patches[idx], view_cfg, seed=(view_cfg.seed, seed, step))
                glob = [torch.from_numpy(v) for v in views.global_views]
                allv = glob + [torch.from_numpy(v) for v in views.local_views]
                bsz = len(idx)

                with torch.no_grad():
                    z_pri = primary(glob)
                    center = state.center if sched_cfg.use_centering else None
                    p_pri = sharpen(z_pri, temp_cfg.tau_pri, center).chunk(n_global)
                z_aux = auxiliary(allv)
                p_aux = sharpen(z_aux, temp_cfg.tau_aux).split(bsz)
                loss = distillation_loss(p_pri, p_aux)
                if not torch.isfinite(loss):
                    dump = state.save((out_dir or Path(".")) / "state_dump.pth")
                    raise TrainingError(f"non-finite loss at step {step}; state dumped to {dump}")

                lr, wd, m = sched.lr_at(step), sched.weight_decay_at(step), sched.momentum_at(step)
                for i, group in enumerate(optimizer.param_groups):
                    group["lr"] = lr
                    if i == 0:
                        group["weight_decay"] = wd
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if sched_cfg.clip_grad > 0:
                    torch.nn.utils.clip_grad_norm_(auxiliary.parameters(), sched_cfg.clip_grad)
                if epoch < sched_cfg.freeze_last_layer_epochs:
                    auxiliary.head.last_v.grad = None
                optimizer.step()

                ema_update_params(primary, auxiliary, m)
                state.center = update_center(state.center, z_pri, sched_cfg.center_momentum)

                record = {
                    "step": step, "epoch": epoch, "loss": float(loss.detach()), "lr": lr, "m": m, "wd": wd,
                    "center_norm": float(state.center.norm()),
                    "teacher_entropy": float(entropy(torch.cat(p_pri)).mean()),
                }
                records.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                state.step += 1
                if on_step is not None:
                    on_step(state, record)
            if out_dir is not None and sched_cfg.checkpoint_every and (epoch + 1) % sched_cfg.checkpoint_every == 0:
                state.save(out_dir / f"checkpoint_{epoch + 1:04d}.pth")
            if max_steps is not None and state.step >= max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        state.save(out_dir / "checkpoint.pth")
    return state, records

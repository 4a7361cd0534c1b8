"""Training loop, evaluation and the flat key=value configuration."""
from __future__ import annotations

import copy
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, checkpoint_from_model, save_checkpoint
from .data import (
    PreprocessConfig,
    SceneSample,
    crop_patches,
    from_network_output,
    sample_gamma,
    sample_rng,
    to_network_input,
    to_network_target,
)
from .metrics import LossConfig, loss_l1_tonemapped, psnr
from .model import ADNet, split_inputs
from .optim import AdamState, adam_step, decayed_lr


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.1
    milestone: int = 100
    batch_size: int = 16
    epochs: int = 200
    patch_size: int = 256
    patch_stride: int = 128
    seed: int = 0
    max_steps: Optional[int] = None
    val_every: int = 1
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ("lr", "eps", "lr_decay", "batch_size", "patch_size", "patch_stride", "val_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 0 or self.milestone < 0:
            raise ValueError("epochs and milestone must be >= 0")
        if self.milestone > self.epochs:
            raise ValueError(f"milestone {self.milestone} exceeds epochs {self.epochs}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def to_flat(self) -> Dict[str, Any]:
        """Flat mapping with dotted keys for the nested configs."""
        out: Dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for k, v in dataclasses.asdict(value).items():
                    out[f"{f.name}.{k}"] = v
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "TrainConfig":
        top: Dict[str, Any] = {}
        nested: Dict[str, Dict[str, Any]] = {"preprocess": {}, "loss": {}}
        for key, value in flat.items():
            head, _, tail = key.partition(".")
            if tail:
                if head not in nested:
                    raise KeyError(f"unknown config section {head!r}")
                nested[head][tail] = value
            else:
                top[key] = value
        return cls(preprocess=PreprocessConfig(**nested["preprocess"]), loss=LossConfig(**nested["loss"]), **top)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    psnr_l: float
    psnr_mu: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.loss:.8f}\t{self.psnr_l:.4f}\t{self.psnr_mu:.4f}"


@dataclass
class TrainResult:
    model: ADNet
    adam: AdamState
    step: int
    log: List[EpochRecord]
    step_losses: List[float]
    step_psnr_mu: List[float]
    best: Optional[Checkpoint]
    last: Checkpoint


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path


def evaluate(model: ADNet, scenes: Sequence[SceneSample], cfg: TrainConfig) -> Dict[str, float]:
    """Mean PSNR-l / PSNR-μ and loss over full scenes at the default gamma."""
    pl, pm, losses = [], [], []
    for scene in scenes:
        x = to_network_input(scene, cfg.preprocess.gamma_default).astype(model.dtype)
        y = to_network_target(scene).astype(model.dtype)
        pred = model.predict(x)
        with T.no_grad():
            losses.append(float(loss_l1_tonemapped(T.Tensor(pred), T.Tensor(y), cfg.loss).item()))
        out, gt = from_network_output(pred), scene.gt
        pl.append(psnr(out, gt, "linear", cfg.loss))
        pm.append(psnr(out, gt, "mu", cfg.loss))
    return {"psnr_l": float(np.mean(pl)), "psnr_mu": float(np.mean(pm)), "loss": float(np.mean(losses))}


def _snapshot(model: ADNet, cfg: TrainConfig, adam: AdamState, step: int, meta: Dict[str, Any]) -> Checkpoint:
    return checkpoint_from_model(model, cfg.to_flat(), copy.deepcopy(adam), step, dict(meta))


def train_loop(
    model: ADNet,
    scenes: Sequence[SceneSample],
    cfg: TrainConfig,
    val_scenes: Optional[Sequence[SceneSample]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    dump_dir: Optional[str] = None,
    adam: Optional[AdamState] = None,
) -> TrainResult:
    """Minimise the tonemapped L1 loss with Adam over patches of ``scenes``.

    Validation runs every ``cfg.val_every`` epochs and on the final epoch;
    other epochs log NaN metrics. The best checkpoint is the one with the
    highest validation PSNR-μ. Training scenes double as the validation
    set when ``val_scenes`` is not given.
    """
    if not scenes:
        raise ValueError("training set is empty")
    if any(s.gt is None for s in scenes):
        raise ValueError("every training scene needs a ground truth")
    val_scenes = list(val_scenes) if val_scenes else list(scenes)
    patches = [p for s in scenes for p in crop_patches(s, cfg.patch_size, cfg.patch_stride)]
    dtype = model.dtype
    targets = [to_network_target(p).astype(dtype) for p in patches]
    adam = adam if adam is not None else AdamState()
    params = model.weights
    step = 0
    log: List[EpochRecord] = []
    step_losses: List[float] = []
    step_psnr: List[float] = []
    best: Optional[Checkpoint] = None
    best_score = -math.inf

    for epoch in range(cfg.epochs):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        lr = decayed_lr(cfg.lr, epoch, cfg.milestone, cfg.lr_decay)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(patches))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            gammas = [sample_gamma(sample_rng(cfg.preprocess.seed, epoch, int(i)), cfg.preprocess) for i in idx]
            x = np.concatenate([to_network_input(patches[i], g) for i, g in zip(idx, gammas)]).astype(dtype)
            y = np.concatenate([targets[i] for i in idx])
            ldr, hdr = split_inputs(x)
            pred = model.forward(ldr, hdr)
            loss = loss_l1_tonemapped(pred, T.Tensor(y), cfg.loss)
            value = float(loss.item())
            if not math.isfinite(value):
                dump = None
                if dump_dir is not None:
                    os.makedirs(dump_dir, exist_ok=True)
                    dump = os.path.join(dump_dir, "nonfinite_state.adnt")
                    meta = {"epoch": epoch, "batch": [int(i) for i in idx], "gammas": gammas, "lr": lr}
                    save_checkpoint(dump, _snapshot(model, cfg, adam, step, meta))
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch}, step {step}, patches {list(map(int, idx))}, "
                    f"gammas {gammas}, lr {lr}",
                    dump,
                )
            T.backward(loss, wrt=list(params.values()))
            adam_step(
                params.arrays(),
                {k: t.grad for k, t in params.items()},
                adam,
                lr=lr,
                beta1=cfg.beta1,
                beta2=cfg.beta2,
                eps=cfg.eps,
            )
            params.zero_grad()
            step += 1
            epoch_losses.append(value)
            step_losses.append(value)
            step_psnr.append(psnr(pred.data, y, "mu", cfg.loss))

        last_epoch = epoch == cfg.epochs - 1 or (cfg.max_steps is not None and step >= cfg.max_steps)
        if (epoch + 1) % cfg.val_every == 0 or last_epoch:
            metrics = evaluate(model, val_scenes, cfg)
            record = EpochRecord(epoch, float(np.mean(epoch_losses)), metrics["psnr_l"], metrics["psnr_mu"])
            if metrics["psnr_mu"] > best_score:
                best_score = metrics["psnr_mu"]
                best = _snapshot(model, cfg, adam, step, {"epoch": epoch, **metrics})
        else:
            record = EpochRecord(epoch, float(np.mean(epoch_losses)), math.nan, math.nan)
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)

    final = evaluate(model, val_scenes, cfg) if step else None
    meta: Dict[str, Any] = {"epochs_run": len(log)}
    if final is not None:
        meta.update(final)
    last = _snapshot(model, cfg, adam, step, meta)
    if best is None:
        best = last
    return TrainResult(model, adam, step, log, step_losses, step_psnr, best, last)

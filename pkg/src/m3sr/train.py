"""MAE training loop: Adam, per-step cosine learning rate, rotation/flip augmentation."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .data import Pair
from .network import M3SR, save_checkpoint


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr0: float = 4e-4
    lr_min: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    patch: int = 128
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr0 > self.lr_min >= 0:
            raise ValueError(f"need lr0 > lr_min >= 0, got lr0={self.lr0}, lr_min={self.lr_min}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.patch % 4:
            raise ValueError(f"patch must be divisible by 4, got {self.patch}")


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # (step, loss, lr)
    validation: list = field(default_factory=list)  # (epoch, MetricReport)

    @property
    def losses(self):
        return [s[1] for s in self.steps]

    @property
    def lrs(self):
        return [s[2] for s in self.steps]

    def dumps(self) -> str:
        lines = [f"{s} {loss!r} {lr!r}" for s, loss, lr in self.steps]
        for epoch, r in self.validation:
            lines.append(f"# val epoch={epoch} rmse={r.rmse!r} psnr={r.psnr_db!r} "
                         f"sam={r.sam_deg!r} mssim={r.mssim!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())


@dataclass
class TrainResult:
    model: M3SR
    log: TrainLog
    best_state: dict
    best_psnr: float | None


def mae_loss(Z: torch.Tensor, Zh: torch.Tensor) -> torch.Tensor:
    if Z.shape != Zh.shape:
        raise ValueError(f"shape mismatch: {tuple(Z.shape)} vs {tuple(Zh.shape)}")
    return (Z - Zh).abs().mean()


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return cfg.lr_min + (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * step / total_steps)) / 2


def transform(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Rotate a (C, H, W) array by ``k`` clockwise quarter turns, then optionally mirror.

    One clockwise turn sends pixel (i, j) to (j, H-1-i).
    """
    if k % 2 and x.shape[-1] != x.shape[-2]:
        raise ValueError(f"quarter-turn rotation needs a square patch, got {x.shape[-2:]}")
    y = np.rot90(x, -k, axes=(-2, -1))
    if flip:
        y = y[..., ::-1]
    return np.ascontiguousarray(y)


def augment(pair, rng: np.random.Generator):
    """Apply one random rotation/flip draw to both members of an (rgb, hsi) pair of (C, H, W) arrays."""
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    return tuple(transform(x, k, flip) for x in pair)


def _as_chw(pair: Pair):
    return np.asarray(pair.rgb, dtype=np.float32), pair.hsi.chw()


def predict(model: M3SR, rgb: np.ndarray) -> np.ndarray:
    """(3, H, W) array -> (H, W, bands) reconstruction clipped to [0, 1]."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.as_tensor(np.ascontiguousarray(rgb), dtype=dtype).unsqueeze(0))[0]
    return np.clip(out.double().numpy().transpose(1, 2, 0), 0.0, 1.0)


def evaluate_model(model: M3SR, pairs, window: int = metrics.SSIM_WINDOW) -> metrics.MetricReport:
    was = model.training
    model.eval()
    recon = [(p.hsi.values, predict(model, p.rgb)) for p in pairs]
    model.train(was)
    w = min(window, *(p.rgb.shape[1] for p in pairs), *(p.rgb.shape[2] for p in pairs))
    return metrics.evaluate(recon, window=w)


def train_loop(model: M3SR, dataset, cfg: TrainConfig, val=None, log_path=None,
               checkpoint_path=None, progress=None) -> TrainResult:
    """Optimize ``model`` in place on ``dataset`` (a list of :class:`Pair`).

    Runs ``epochs * ceil(n / batch_size)`` Adam steps; the learning rate of
    step i is ``cosine_lr(i, total_steps, cfg)``. With ``val`` pairs the
    model is scored after every epoch and the best-PSNR weights are kept.
    """
    data = [_as_chw(p) for p in dataset]
    if not data:
        raise ValueError("training set is empty")
    n = len(data)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=cfg.betas, eps=cfg.adam_eps)
    log = TrainLog()
    best_state, best_psnr = None, None
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            batch = [data[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            if cfg.augment:
                batch = [augment(p, rng) for p in batch]
            x = torch.as_tensor(np.stack([p[0] for p in batch]), dtype=dtype)
            z = torch.as_tensor(np.stack([p[1] for p in batch]), dtype=dtype)
            lr = cosine_lr(step, total, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = mae_loss(z, model(x))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {step} (lr {lr:.6g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.steps.append((step, value, lr))
            if progress is not None:
                progress(step, value, lr)
            step += 1
        if val:
            report = evaluate_model(model, val)
            log.validation.append((epoch, report))
            if best_psnr is None or report.psnr_db > best_psnr:
                best_psnr = report.psnr_db
                best_state = copy.deepcopy(model.state_dict())
    if best_state is None:
        best_state = copy.deepcopy(model.state_dict())
    if log_path is not None:
        log.write(log_path)
    if checkpoint_path is not None:
        ckpt = copy.deepcopy(model)
        ckpt.load_state_dict(best_state)
        save_checkpoint(ckpt, checkpoint_path, extra={"best_psnr": best_psnr, "steps": total})
    return TrainResult(model, log, best_state, best_psnr)

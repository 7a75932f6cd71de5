"""AdamW with decoupled weight decay, warmup schedule, and the train loop."""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import Example, Vocab, batch_iter
from .model import MultimodalTagger
from .tensor import Tensor, backward


class AdamW:
    """Decoupled weight decay; 1-d parameters (biases, gains, start scores)
    are not decayed.

    ``lr_scales`` maps a parameter-name substring to a learning-rate
    multiplier, so selected parameter groups can train slower than the rest
    (the mask samplers depend on this; see ContextSampler).
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0,
                 lr_scales: dict[str, float] | None = None):
        self.params = named_params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in named_params]
        self.v = [np.zeros_like(p.data) for _, p in named_params]
        self.scale = np.ones(len(named_params))
        for key, factor in (lr_scales or {}).items():
            for i, (name, _) in enumerate(named_params):
                if key in name:
                    self.scale[i] = factor

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, (_, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            if self.weight_decay and p.data.ndim > 1:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * self.scale[i] * update


def warmup_lr(step: int, total_steps: int, base_lr: float, ratio: float) -> float:
    """Linear warmup over ceil(ratio * total_steps) steps, then constant."""
    warmup = max(1, math.ceil(ratio * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr


def train_model(model: MultimodalTagger, train: list[Example],
                dev: list[Example], out_dir: str | Path | None = None,
                log=None) -> dict:
    """Train to the configured epoch budget, evaluating on dev each epoch.

    Writes last.ckpt and best.ckpt (best dev micro-F1) when out_dir is given.
    Fully deterministic for a fixed config seed.
    """
    c = model.config
    rng = np.random.default_rng(c.seed)
    opt = AdamW(list(model.named_parameters()), lr=c.lr,
                weight_decay=c.weight_decay,
                lr_scales={"_sampler.": c.sampler_lr_scale})
    label_index = {t: i for i, t in enumerate(c.labels)}
    steps_per_epoch = math.ceil(len(train) / c.batch_size)
    total_steps = steps_per_epoch * c.epochs
    out = Path(out_dir) if out_dir is not None else None

    history: list[dict] = []
    best_f1 = -1.0
    best_epoch = -1
    step = 0
    started = time.monotonic()
    for epoch in range(c.epochs):
        losses = []
        for batch in batch_iter(train, model.vocab, label_index, c.batch_size,
                                c.max_len, rng=rng):
            fwd = model.forward_train(batch, rng, training=True)
            loss = model.overall_loss(fwd)
            opt.zero_grad()
            backward(loss)
            opt.step(warmup_lr(step, total_steps, c.lr, c.warmup_ratio))
            losses.append(float(loss.data))
            step += 1
        dev_metrics = model.evaluate(dev)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "dev": dev_metrics,
            "elapsed_s": round(time.monotonic() - started, 3),
        }
        history.append(entry)
        if log is not None:
            log(entry)
        if out is not None:
            save_checkpoint(out / "last.ckpt", model,
                            extra={"epoch": epoch, "dev_f1": dev_metrics["overall"]["f1"]})
        if dev_metrics["overall"]["f1"] > best_f1:
            best_f1 = dev_metrics["overall"]["f1"]
            best_epoch = epoch
            if out is not None:
                save_checkpoint(out / "best.ckpt", model,
                                extra={"epoch": epoch, "dev_f1": best_f1})
    return {"epochs": history, "best_epoch": best_epoch, "best_dev_f1": best_f1,
            "total_steps": step}

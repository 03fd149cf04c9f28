"""Deterministic training loop, AdamW and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .adapters import ParameterRegistry, apply_freeze_policy
from .backbone import ViT, forward
from .data import Dataset, ImageSet
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .nn import Linear, Parameter
from .tensor import Tape, cross_entropy

log = logging.getLogger(__name__)

PEFT_LR = 1e-3
FULL_LR = 1e-4


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float | None = None  # None: 1e-3 for PEFT recipes, 1e-4 for full
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None
    pretrain_epochs: int = 0
    pretrain_samples: int = 1024
    pretrain_lr: float = 1e-3
    eval_batch_size: int = 256

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("train.epochs and train.pretrain_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be > 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("train.betas must be two values in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("train.eps must be > 0 and train.weight_decay >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be > 0 when set")

    def lr_for(self, kind: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return FULL_LR if kind == "full" else PEFT_LR

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(p: Parameter) -> bool:
    """Biases, norm affine params and gain scalars are exempt from weight decay."""
    return p.kind in ("weight", "pos")


def adamw_step(
    params: Mapping[str, T.Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay: Mapping[str, bool] | None = None,
) -> None:
    """One bias-corrected AdamW update with decoupled decay, in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and (decay is None or decay.get(name, True)):
            p.data -= (lr * weight_decay) * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)


class AdamW:
    """Optimizer over exactly the registry's trainable set."""

    def __init__(self, params: Mapping[str, Parameter], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.decay = {name: decays(p) for name, p in self.params.items()}
        self.state = AdamWState()

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay, self.decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params: Mapping[str, Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


def evaluate(model: ViT, data: ImageSet, batch_size: int = 256) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy; never mutates the model."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty split")
    correct = 0
    loss_sum = 0.0
    with T.no_tape():
        for start in range(0, len(data), batch_size):
            x = data.images[start : start + batch_size]
            y = data.labels[start : start + batch_size]
            logits = forward(x, model)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
            loss_sum += float(cross_entropy(logits, y).data) * len(y)
    return correct / len(data), loss_sum / len(data)


def train(
    model: ViT,
    registry: ParameterRegistry,
    data: Dataset,
    cfg: TrainConfig,
    kind: str = "icon",
    on_epoch=None,
) -> list[dict]:
    """Seeded mini-batch AdamW over the trainable set.  Returns one row per (epoch, split)."""
    train_set = data.train
    if len(train_set) == 0:
        raise DataError("training split is empty")
    params = registry.trainable()
    opt = AdamW(params, cfg.lr_for(kind), cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = train_set.images[idx], train_set.labels[idx]
            step += 1
            with Tape() as tape:
                logits = forward(x, model)
                loss = cross_entropy(logits, y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
            if params:
                tape.backward(loss)
                if cfg.grad_clip is not None:
                    clip_grad_norm(params, cfg.grad_clip)
                opt.step()
                opt.zero_grad()
        row = {"epoch": epoch, "split": "train", "loss": loss_sum / len(order), "accuracy": correct / len(order)}
        history.append(row)
        log.info("epoch %d train loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])
        if data.test is not None and len(data.test):
            acc, loss = evaluate(model, data.test, cfg.eval_batch_size)
            history.append({"epoch": epoch, "split": "test", "loss": loss, "accuracy": acc})
            log.info("epoch %d test loss %.4f acc %.4f", epoch, loss, acc)
        if on_epoch is not None:
            on_epoch(history)
    return history


def pretrain_backbone(model: ViT, source: ImageSet, cfg: TrainConfig) -> list[dict]:
    """Full supervised training on a source task through a temporary head.

    The model's own head is restored afterwards, so only the backbone carries
    over to the downstream task.
    """
    own_head = model.head
    rng = np.random.default_rng([cfg.seed, 7])
    model.head = Linear(model.cfg.embed_dim, source.num_classes, rng, dtype=model.dtype)
    try:
        registry = apply_freeze_policy(model, "full")
        sub = TrainConfig(
            epochs=cfg.pretrain_epochs,
            batch_size=cfg.batch_size,
            learning_rate=cfg.pretrain_lr,
            weight_decay=cfg.weight_decay,
            betas=cfg.betas,
            eps=cfg.eps,
            seed=cfg.seed + 1,
            grad_clip=cfg.grad_clip,
        )
        return train(model, registry, Dataset(source), sub, kind="full")
    finally:
        model.head = own_head

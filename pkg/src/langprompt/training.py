"""Optimizer and training loop shared by pretraining, prompt tuning and full fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .model import BaseModel, Prompting, NO_PROMPTING
from .numerics import Tensor
from .synthdata import Utterance

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**d)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = {p.name: p for p in params}
        if len(self.params) != len(params):
            raise ValueError("parameter names must be unique")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: dict[str, Tensor]) -> None:
        stray = set(grads) - set(self.params)
        if stray:
            raise KeyError(f"gradients for parameters not owned by the optimizer: {sorted(stray)}")
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name].data
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p = self.params[name]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    history: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


LossFn = Callable[[list[Utterance]], Tensor]


def batches(items: Sequence, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    for i in range(0, len(items), batch_size):
        yield [items[j] for j in order[i: i + batch_size]]


def mean_loss(loss_fn: LossFn, data: Sequence[Utterance], batch_size: int) -> float:
    """Utterance-weighted mean of batch losses, no gradients."""
    total, count = 0.0, 0
    with nx.no_grad():
        for b in batches(data, batch_size):
            total += loss_fn(b).item() * len(b)
            count += len(b)
    return total / max(count, 1)


def fit(params: Sequence[Tensor], data: Sequence[Utterance], loss_fn: LossFn,
        config: TrainConfig, evaluate: bool = True) -> TrainResult:
    """Minimize `loss_fn` over `data` by Adam on `params` only."""
    if not data:
        raise ValueError("empty training data")
    params = list(params)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    result = TrainResult()
    if evaluate:
        result.initial_loss = mean_loss(loss_fn, data, config.batch_size)
    step = 0
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for batch in batches(data, config.batch_size, rng):
            with nx.GradTape() as tape:
                loss = loss_fn(batch)
            value = loss.item()
            if not math.isfinite(value):
                norms = {p.name: float(np.linalg.norm(p.data)) for p in params}
                raise NumericalError(f"non-finite loss {value} at step {step} (epoch {epoch}); "
                                     f"parameter norms: {norms}")
            grads = nx.backward(tape, loss)
            opt.step({k: g for k, g in grads.items() if k in opt.params})
            total += value * len(batch)
            count += len(batch)
            step += 1
        result.history.append(total / count)
        log.info("epoch %d loss %.4f", epoch, result.history[-1])
    if evaluate:
        result.final_loss = mean_loss(loss_fn, data, config.batch_size)
    return result


def transcript_loss(model: BaseModel, lang_token: int | Callable[[Utterance], int],
                    prompting: Prompting | Callable[[Utterance], Prompting] = NO_PROMPTING) -> LossFn:
    """Teacher-forced transcript loss for a single-language batch."""

    def fn(batch: list[Utterance]) -> Tensor:
        pr = prompting(batch[0]) if callable(prompting) else prompting
        tok = lang_token(batch[0]) if callable(lang_token) else lang_token
        targets = [u.transcript for u in batch]
        logits = model.forward_batch([u.features for u in batch], [tok] * len(batch), targets, pr)
        return model.loss(logits, targets, pr.n_dec)

    return fn


@dataclass(frozen=True)
class PretrainConfig:
    train: TrainConfig = TrainConfig(lr=2e-3, epochs=20, batch_size=16)
    lid_weight: float = 0.5
    # largest random position shift applied to encoder/decoder inputs
    max_offset: int = 0


def pretrain(model: BaseModel, data: dict[str, Sequence[Utterance]],
             config: PretrainConfig = PretrainConfig()) -> TrainResult:
    """Train every base parameter on base-language data (transcripts + language ID)."""
    cfg = model.config
    unknown = set(data) - set(cfg.base_languages)
    if unknown:
        raise ValueError(f"pretraining data for non-base languages: {sorted(unknown)}")
    pool = [u for tag in sorted(data) for u in data[tag]]
    rng = np.random.default_rng(config.train.seed + 7919)
    model.unfreeze()

    def loss_fn(batch: list[Utterance]) -> Tensor:
        langs = [cfg.language_token(u.language) for u in batch]
        targets = [u.transcript for u in batch]
        enc_off = dec_off = None
        if config.max_offset and nx._active_tape is not None:
            enc_off = rng.integers(0, config.max_offset + 1, size=len(batch)).tolist()
            dec_off = rng.integers(0, config.max_offset + 1, size=len(batch)).tolist()
        logits = model.forward_batch([u.features for u in batch], langs, targets,
                                     enc_offsets=enc_off, dec_offsets=dec_off)
        loss = model.loss(logits, targets)
        if config.lid_weight:
            loss = nx.add(loss, nx.scale(model.lid_loss(logits, langs), config.lid_weight))
        return loss

    try:
        result = fit(list(model.params.values()), pool, loss_fn, config.train, evaluate=False)
    finally:
        model.freeze()
    model.round_to_f32()
    return result

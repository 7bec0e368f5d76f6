"""The dual-view training loop with Adam, plateau decay and early stopping."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data.augment import AugmentationConfig, Batch, batches
from .data.labels import AssembledDataset, SourceDataset, as_assembled
from .evaluation import ClassMetrics, evaluate
from .losses import LossBreakdown, LossMask, SharpenConfig, total_loss
from .model import ModelState, answer


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class Adam:
    """Adam with bias correction over a fixed list of parameters."""

    def __init__(self, params: list[Tensor], lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self._tmp = np.empty(self.CHUNK)
        self._den = np.empty(self.CHUNK)
        self.step_count = 0

    # elements per pass; keeps every operand of the update in cache
    CHUNK = 16384

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if not (p.values.flags.c_contiguous and p.grad.flags.c_contiguous):
                raise ContractError("Adam updates parameters in place; they must be contiguous")
            flat = (p.values.reshape(-1), p.grad.reshape(-1), m.reshape(-1), v.reshape(-1))
            for start in range(0, flat[0].size, self.CHUNK):
                x, g, mc, vc = (a[start:start + self.CHUNK] for a in flat)
                tmp, den = self._tmp[:x.size], self._den[:x.size]
                mc *= b1
                np.multiply(g, 1.0 - b1, out=tmp)
                mc += tmp
                vc *= b2
                np.multiply(g, g, out=tmp)
                tmp *= 1.0 - b2
                vc += tmp
                np.divide(vc, c2, out=den)
                np.sqrt(den, out=den)
                den += self.eps
                np.multiply(mc, self.learning_rate / c1, out=tmp)
                tmp /= den
                x -= tmp


class PlateauScheduler:
    """Divide the learning rate by ``factor`` once the metric (higher is
    better) has gone more than ``patience`` epochs without improving."""

    def __init__(self, optimizer: Adam, factor: float = 2.0, patience: int = 5):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = -math.inf
        self.epochs_since_best = 0

    def step(self, metric: float) -> bool:
        if metric > self.best:
            self.best = metric
            self.epochs_since_best = 0
            return False
        self.epochs_since_best += 1
        if self.epochs_since_best > self.patience:
            self.optimizer.learning_rate /= self.factor
            self.epochs_since_best = 0
            return True
        return False


class EarlyStop:
    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = -math.inf
        self.epochs_since_best = 0

    def step(self, metric: float) -> bool:
        """Returns True when training should stop."""
        if metric > self.best:
            self.best = metric
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 64
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 2e-4
    sharpen: SharpenConfig = field(default_factory=SharpenConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    freeze_q: bool = False
    disable_adapter: bool = False
    disable_pseudo: bool = False
    disable_consist: bool = False
    plateau_factor: float = 2.0
    plateau_patience: int = 5
    early_stop_patience: int = 10

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ContractError(f"max_epochs and batch_size must be >= 1, got "
                                f"{self.max_epochs} and {self.batch_size}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ContractError(f"learning_rate must be positive and finite, got "
                                f"{self.learning_rate}")
        if self.plateau_factor <= 1.0 or self.plateau_patience < 0 or self.early_stop_patience < 1:
            raise ContractError("plateau_factor must exceed 1 and patiences must be positive")

    @property
    def q_frozen(self) -> bool:
        return self.freeze_q or self.disable_adapter


def trainable(state: ModelState, cfg: TrainConfig) -> list[Tensor]:
    params = [p for name, p in state.named_parameters() if name != "q"]
    if not cfg.q_frozen:
        params.append(state.encoding.q)
    return params


def make_optimizer(state: ModelState, cfg: TrainConfig) -> Adam:
    return Adam(trainable(state, cfg), lr=cfg.learning_rate)


def train_step(state: ModelState, batch: Batch, cfg: TrainConfig, optimizer: Adam, *,
               epoch: int | None = None, batch_index: int | None = None) -> LossBreakdown:
    """Forward both views through the same parameters, backprop, one Adam step."""
    mask = LossMask(batch.known, batch.targets)
    with ad.Tape() as tape:
        a_w = answer(state, batch.weak)
        a_s = answer(state, batch.strong)
        losses = total_loss(a_w, a_s, mask, cfg.sharpen, use_pseudo=not cfg.disable_pseudo,
                            use_consist=not cfg.disable_consist)
        values = losses.values()
        if not all(math.isfinite(v) for v in values.values()):
            raise NumericalError(f"non-finite loss at epoch {epoch}, batch {batch_index}: {values}")
        ad.backward(losses.l_total, tape)
    optimizer.step()
    state.zero_grad()
    return losses


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_bce: float
    l_pseudo: float
    l_consist: float
    l_total: float
    lr: float
    valid_mauc: float


@dataclass
class RunMetrics:
    epochs: list[EpochRecord]
    best_epoch: int
    best_mauc: float
    stopped_early: bool
    final: ClassMetrics

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "l_bce", "l_pseudo", "l_consist", "l_total", "lr", "valid_mauc"])
        for r in self.epochs:
            w.writerow([r.epoch] + [repr(float(x)) for x in
                                    (r.l_bce, r.l_pseudo, r.l_consist, r.l_total, r.lr,
                                     r.valid_mauc)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def epoch_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


def fit(state: ModelState, train: AssembledDataset | SourceDataset,
        valid: AssembledDataset | SourceDataset, cfg: TrainConfig | None = None, *,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> RunMetrics:
    """Train for up to ``max_epochs``, then restore the best-validation epoch."""
    cfg = cfg or TrainConfig()
    train, valid = as_assembled(train), as_assembled(valid)
    if len(valid) == 0:
        raise ContractError("fit: validation set is empty")
    if not evaluate(state, valid).per_class_present():
        raise ContractError("fit: no validation class has both a Positive and a Negative")
    aug = AugmentationConfig(cfg.augment.weak_max_shift, cfg.augment.strong_max_shift,
                             cfg.augment.noise_sigma, cfg.augment.erase_size, cfg.seed)
    optimizer = make_optimizer(state, cfg)
    scheduler = PlateauScheduler(optimizer, cfg.plateau_factor, cfg.plateau_patience)
    stopper = EarlyStop(cfg.early_stop_patience)
    records: list[EpochRecord] = []
    best_epoch, best_mauc, best_params = 0, -math.inf, state.snapshot()
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        lr = optimizer.learning_rate
        sums = np.zeros(4)
        count = 0
        for i, batch in enumerate(batches(train, cfg.batch_size, epoch_seed(cfg.seed, epoch), aug)):
            values = train_step(state, batch, cfg, optimizer, epoch=epoch, batch_index=i).values()
            sums += [values["l_bce"], values["l_pseudo"], values["l_consist"], values["l_total"]]
            count += 1
        mauc = evaluate(state, valid).mauc
        record = EpochRecord(epoch, *(sums / max(count, 1)), lr, mauc)
        records.append(record)
        if on_epoch:
            on_epoch(record)
        if mauc > best_mauc:
            best_epoch, best_mauc, best_params = epoch, mauc, state.snapshot()
        scheduler.step(mauc)
        if stopper.step(mauc):
            stopped = epoch < cfg.max_epochs
            break
    state.restore(best_params)
    return RunMetrics(records, best_epoch, best_mauc, stopped, evaluate(state, valid))

"""Weak/strong augmentation and epoch batching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..autodiff import ContractError
from .labels import POS, UNK, AssembledDataset
from .synth import shift_image


@dataclass(frozen=True)
class AugmentationConfig:
    weak_max_shift: int = 2
    strong_max_shift: int = 4
    noise_sigma: float = 0.1
    erase_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.weak_max_shift < 0 or self.strong_max_shift < 0 or self.erase_size < 0:
            raise ContractError("augmentation magnitudes must be non-negative")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")
        if self.strong_max_shift < self.weak_max_shift:
            raise ContractError("strong_max_shift must be >= weak_max_shift")


def _random_shift(x: np.ndarray, max_shift: int, draw: np.random.Generator) -> np.ndarray:
    if max_shift == 0:
        return x.copy()
    # two scalar draws: same stream as size=2, less call overhead
    dy = int(draw.integers(-max_shift, max_shift + 1))
    dx = int(draw.integers(-max_shift, max_shift + 1))
    return shift_image(x, dy, dx)


def augment(x: np.ndarray, mode: str, cfg: AugmentationConfig,
            draw: np.random.Generator) -> np.ndarray:
    if mode == "weak":
        return _random_shift(x, cfg.weak_max_shift, draw)
    if mode != "strong":
        raise ContractError(f"augment mode must be 'weak' or 'strong', got {mode!r}")
    out = _random_shift(x, cfg.strong_max_shift, draw)
    if cfg.noise_sigma > 0:
        out += draw.normal(0.0, cfg.noise_sigma, size=out.shape)
        np.clip(out, 0.0, 1.0, out=out)
    e = min(cfg.erase_size, *out.shape)
    if e > 0:
        top = int(draw.integers(0, out.shape[0] - e + 1))
        left = int(draw.integers(0, out.shape[1] - e + 1))
        out[top:top + e, left:left + e] = 0.0
    return out


@dataclass(frozen=True)
class Batch:
    weak: np.ndarray      # (B, H*W)
    strong: np.ndarray    # (B, H*W)
    targets: np.ndarray   # (B, n) 1.0 where Positive, 0.0 otherwise
    known: np.ndarray     # (B, n) True where Positive or Negative
    indices: np.ndarray   # positions in the dataset

    def __len__(self) -> int:
        return len(self.indices)


def batches(d: AssembledDataset, batch_size: int, epoch_seed: int,
            cfg: AugmentationConfig | None = None) -> Iterator[Batch]:
    """One shuffled pass over ``d``; both views come from the same image."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    cfg = cfg or AugmentationConfig()
    order_rng, aug_rng = (np.random.default_rng(s) for s in
                          np.random.SeedSequence([cfg.seed, epoch_seed]).spawn(2))
    order = order_rng.permutation(len(d))
    for start in range(0, len(d), batch_size):
        idx = order[start:start + batch_size]
        weak, strong = [], []
        for i in idx:
            img = d.images[i]
            weak.append(augment(img, "weak", cfg, aug_rng).reshape(-1))
            strong.append(augment(img, "strong", cfg, aug_rng).reshape(-1))
        states = d.states[idx]
        yield Batch(np.stack(weak), np.stack(strong), (states == POS).astype(np.float64),
                    states != UNK, idx)

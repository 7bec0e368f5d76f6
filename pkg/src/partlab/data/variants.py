"""Experiment datasets derived from a 0..9 digit corpus."""
from __future__ import annotations

import numpy as np

from ..autodiff import ContractError
from .idx import digits_of
from .labels import DIGITS, NEG, POS, UNK, LabelSchema, SourceDataset

VARIANTS = ("zero", "multi", "novel")
ZERO_SCHEMA = LabelSchema.canonical(["zero", "non-zero"])


def fraction_indices(count: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted random subset of ``round(fraction * count)`` positions."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return np.arange(count)
    k = max(1, int(round(fraction * count)))
    rng = np.random.default_rng([seed, 0x5EED])
    return np.sort(rng.choice(count, size=k, replace=False))


def halve_width(images: np.ndarray) -> np.ndarray:
    """(N, H, W) -> (N, H, W/2) by averaging adjacent column pairs."""
    n, h, w = images.shape
    return images.reshape(n, h, w // 2, 2).mean(axis=3)


def _zero(d: SourceDataset) -> SourceDataset:
    is_zero = d.states[:, d.schema.index("0")] == POS
    states = np.full((len(d), 2), NEG, dtype=np.int8)
    states[is_zero, ZERO_SCHEMA.index("zero")] = POS
    states[~is_zero, ZERO_SCHEMA.index("non-zero")] = POS
    return SourceDataset(d.name, ZERO_SCHEMA, d.images, states)


def _novel_train(d: SourceDataset, novel_class: str, fraction: float, seed: int) -> SourceDataset:
    col = d.schema.index(novel_class)
    sub = d.take(fraction_indices(len(d), fraction, seed))
    keep = sub.states[:, col] != POS
    states = sub.states[keep].copy()
    # the novel slot stays in the schema but never receives supervision
    states[:, col] = UNK
    return SourceDataset(d.name, d.schema, sub.images[keep], states)


def _multi_train(d: SourceDataset) -> SourceDataset:
    half = halve_width(d.images)
    padded = np.zeros_like(d.images)
    padded[:, :, : half.shape[2]] = half
    return SourceDataset(d.name, d.schema, padded, d.states)


def _multi_test(d: SourceDataset, seed: int) -> SourceDataset:
    digits = digits_of(d)
    half = halve_width(d.images)
    rng = np.random.default_rng([seed, 0x3317])
    images = np.empty_like(d.images)
    states = np.full((len(d), d.schema.n), NEG, dtype=np.int8)
    for i in range(len(d)):
        candidates = np.flatnonzero(digits != digits[i])
        j = int(candidates[rng.integers(candidates.size)])
        images[i] = np.concatenate([half[i], half[j]], axis=1)
        states[i, digits[i]] = POS
        states[i, digits[j]] = POS
    return SourceDataset(d.name, d.schema, images, states)


def derive_variant(d: SourceDataset, variant: str, *, test: SourceDataset | None = None,
                   novel_class: str = "0", fraction: float = 1.0, seed: int = 0,
                   test_fraction: float = 0.2) -> tuple[SourceDataset, SourceDataset]:
    """Build the (train, test) pair of an experiment variant.

    ``d`` is the training split; without ``test`` the last ``test_fraction``
    of ``d`` is held out.  ``novel_class``/``fraction`` apply to "novel",
    ``seed`` picks the training subset ("novel") and the digit pairs
    ("multi").
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if d.schema != DIGITS:
        raise ContractError(f"derive_variant needs the 0..9 schema, got {list(d.schema)}")
    if test is None:
        cut = len(d) - int(round(test_fraction * len(d)))
        d, test = d.take(np.arange(cut)), d.take(np.arange(cut, len(d)))
    if test.schema != DIGITS:
        raise ContractError("test split must use the 0..9 schema")

    if variant == "zero":
        return _zero(d), _zero(test)
    if variant == "novel":
        if str(novel_class) not in DIGITS:
            raise ContractError(f"novel class {novel_class!r} is not in the 0..9 schema")
        return _novel_train(d, str(novel_class), fraction, seed), test
    return _multi_train(d), _multi_test(test, seed)

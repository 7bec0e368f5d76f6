"""Masked supervision and the two unsupervised terms.

Annotated entries get binary cross-entropy; unannotated entries get a
squared pull toward a sharpened copy of the weak-view answer (pseudo term)
and the same target for the strong view (consistency term).  Each term is
averaged over the entries it covers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


@dataclass(frozen=True)
class SharpenConfig:
    t: float = 4.0
    tau: float = 0.5

    def __post_init__(self):
        if not self.t > 0:
            raise ContractError(f"sharpen temperature must be > 0, got {self.t}")
        if not 0.0 < self.tau < 1.0:
            raise ContractError(f"sharpen threshold must lie in (0, 1), got {self.tau}")


@dataclass(frozen=True)
class LossMask:
    known: np.ndarray    # bool (N, n)
    targets: np.ndarray  # float (N, n); read only where known

    @classmethod
    def from_states(cls, states: np.ndarray) -> "LossMask":
        states = np.asarray(states)
        return cls(states >= 0, (states == 1).astype(np.float64))

    @property
    def unknown(self) -> np.ndarray:
        return ~self.known


@dataclass
class LossBreakdown:
    l_bce: Tensor
    l_pseudo: Tensor
    l_consist: Tensor
    l_total: Tensor
    n_known: int
    n_unknown: int

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_bce", "l_pseudo", "l_consist", "l_total")}


def _zero() -> Tensor:
    return Tensor(0.0)


def sharpen_values(a, cfg: SharpenConfig) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if math.isinf(cfg.t):
        return a.copy()
    return np.where(a > cfg.tau, a + (1.0 - a) / cfg.t, a - a / cfg.t)


def sharpen(a, cfg: SharpenConfig | None = None):
    """Pseudo-label: push ``a`` above ``tau`` toward 1 and the rest toward 0.

    Tensor inputs give a detached Tensor; anything else gives an ndarray.
    """
    cfg = cfg or SharpenConfig()
    if isinstance(a, Tensor):
        return Tensor(sharpen_values(a.values, cfg))
    return sharpen_values(a, cfg)


def bce_masked(a: Tensor, mask: LossMask) -> Tensor:
    known = np.asarray(mask.known, dtype=bool)
    count = int(known.sum())
    if count == 0:
        return _zero()
    a_k = ad.masked_select(a, known)
    y = mask.targets[known]
    ll = ad.mul(y, ad.log(a_k)) + ad.mul(1.0 - y, ad.log(ad.sub(1.0, a_k)))
    return ad.scale(ad.mean(ll), -1.0)


def _sq_to_target(pred: Tensor, select: np.ndarray, target: np.ndarray) -> Tensor:
    diff = ad.sub(ad.masked_select(pred, select), target)
    return ad.scale(ad.sum_squares(diff), 1.0 / int(select.sum()))


def pseudo_loss(a_w: Tensor, mask: LossMask, cfg: SharpenConfig | None = None, *,
                target: np.ndarray | None = None) -> Tensor:
    """Mean over unknown entries of ``(a_w - sharpen(a_w))**2``.

    ``target`` overrides the sharpened weak answers (full (N, n) array); it
    lets gradient checks hold the stop-gradient target fixed.
    """
    cfg = cfg or SharpenConfig()
    unknown = ~np.asarray(mask.known, dtype=bool)
    if not unknown.any() or math.isinf(cfg.t):
        return _zero()
    tgt = sharpen_values(a_w.values, cfg) if target is None else np.asarray(target)
    return _sq_to_target(a_w, unknown, tgt[unknown])


def consistency_loss(a_s: Tensor, a_w: Tensor, mask: LossMask,
                     cfg: SharpenConfig | None = None, *,
                     target: np.ndarray | None = None) -> Tensor:
    """Mean over unknown entries of ``(a_s - sharpen(a_w))**2``; no gradient into ``a_w``."""
    cfg = cfg or SharpenConfig()
    unknown = ~np.asarray(mask.known, dtype=bool)
    if not unknown.any():
        return _zero()
    tgt = sharpen_values(a_w.values, cfg) if target is None else np.asarray(target)
    return _sq_to_target(a_s, unknown, tgt[unknown])


def total_loss(a_w: Tensor, a_s: Tensor, mask: LossMask, cfg: SharpenConfig | None = None, *,
               use_pseudo: bool = True, use_consist: bool = True,
               target: np.ndarray | None = None) -> LossBreakdown:
    cfg = cfg or SharpenConfig()
    l_bce = bce_masked(a_w, mask)
    l_pseudo = pseudo_loss(a_w, mask, cfg, target=target) if use_pseudo else _zero()
    l_consist = consistency_loss(a_s, a_w, mask, cfg, target=target) if use_consist else _zero()
    n_known = int(np.count_nonzero(mask.known))
    return LossBreakdown(l_bce, l_pseudo, l_consist, l_bce + l_pseudo + l_consist,
                         n_known, int(np.size(mask.known)) - n_known)

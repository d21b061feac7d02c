"""Confusion matrices and Cohen's kappa over the five sleep stages."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dsp import NUM_CLASSES, SleepStage


class LengthMismatch(ValueError):
    pass


class ExcludedLabelPresent(ValueError):
    pass


class EmptyMatrix(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are reference stages, columns predicted stages."""

    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.n if self.n else float("nan")


@dataclass(frozen=True)
class KappaValue:
    kappa: float | None
    p_o: float
    p_e: float

    @property
    def defined(self) -> bool:
        return self.kappa is not None

    def __float__(self) -> float:
        return float("nan") if self.kappa is None else self.kappa


def confusion(ref: Sequence[SleepStage], pred: Sequence[SleepStage],
              num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    ref = np.asarray(ref, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if ref.shape != pred.shape:
        raise LengthMismatch(f"{len(ref)} reference labels vs {len(pred)} predictions")
    if (ref < 0).any() or (pred < 0).any():
        raise ExcludedLabelPresent("EXCLUDED epochs must be dropped before scoring")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (ref, pred), 1)
    return ConfusionMatrix(counts)


def cohen_kappa(m: ConfusionMatrix) -> KappaValue:
    """Chance-corrected agreement; kappa is None when chance agreement is 1."""
    c = np.asarray(m.counts, dtype=np.int64)
    n = int(c.sum())
    if n <= 0:
        raise EmptyMatrix("kappa of an empty confusion matrix")
    # Integer numerators keep p_e == 1 detection exact.
    agree = int(np.trace(c))
    chance = int((c.sum(axis=1) * c.sum(axis=0)).sum())
    p_o = agree / n
    p_e = chance / (n * n)
    if chance == n * n:
        return KappaValue(None, p_o, p_e)
    return KappaValue((n * agree - chance) / (n * n - chance), p_o, p_e)


def kappa(ref, pred) -> float:
    """Convenience wrapper returning kappa as a float (NaN when undefined)."""
    return float(cohen_kappa(confusion(ref, pred)))

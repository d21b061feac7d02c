"""Sizes of the (TR, VAL) composition spaces for single-model vs ensemble training.

With N datasets each split into fixed TR and VAL parts, a single pooled model
may take any nonempty set of TR parts and any set of VAL parts. An ensemble of
local models only reaches compositions where VAL is drawn from the same
datasets as TR, and needs just two trainings per dataset.
"""
from __future__ import annotations

import enum
import itertools
import string
from dataclasses import dataclass
from math import comb

MAX_ENUMERATE = 12


class Mode(str, enum.Enum):
    SINGLE_MODEL = "single"
    ENSEMBLE = "ensemble"


class TooLarge(ValueError):
    pass


def _check(n: int) -> None:
    if not isinstance(n, int) or n < 1:
        raise ValueError(f"need a positive integer number of datasets, got {n!r}")


def single_comb_count(n: int) -> int:
    _check(n)
    return (2 ** n - 1) * 2 ** n


def ensemble_comb_count(n: int) -> int:
    _check(n)
    return sum(comb(n, k) * (sum(comb(k, j) for j in range(1, k + 1)) + 1)
               for k in range(1, n + 1))


def ensemble_training_count(n: int) -> int:
    """One (X_TR, -) and one (X_TR, X_VAL) training per dataset."""
    _check(n)
    return 2 * n


def dataset_ids(n: int) -> list[str]:
    return list(string.ascii_uppercase[:n])


def _subsets(items, include_empty: bool):
    start = 0 if include_empty else 1
    for size in range(start, len(items) + 1):
        yield from itertools.combinations(items, size)


@dataclass(frozen=True)
class ComboSpace:
    n_datasets: int
    mode: Mode
    combinations: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]

    def __len__(self) -> int:
        return len(self.combinations)


def enumerate_space(n: int, mode: Mode | str) -> ComboSpace:
    """List every legal (TR, VAL) pair, TR subsets ordered by size then name."""
    _check(n)
    if n > MAX_ENUMERATE:
        raise TooLarge(f"enumeration limited to N <= {MAX_ENUMERATE}, got {n}")
    mode = Mode(mode)
    ids = dataset_ids(n)
    rows = []
    for tr in _subsets(ids, include_empty=False):
        pool = ids if mode is Mode.SINGLE_MODEL else tr
        for val in _subsets(pool, include_empty=True):
            rows.append((tr, val))
    return ComboSpace(n, mode, tuple(rows))


def closed_form(n: int, mode: Mode | str) -> int:
    return single_comb_count(n) if Mode(mode) is Mode.SINGLE_MODEL else ensemble_comb_count(n)


def format_space(space: ComboSpace) -> str:
    lines = ["n\tTR\tVAL"]
    for i, (tr, val) in enumerate(space.combinations, 1):
        tr_text = ", ".join(f"{d}_TR" for d in tr)
        val_text = ", ".join(f"{d}_VAL" for d in val) or "-"
        lines.append(f"{i}\t{tr_text}\t{val_text}")
    return "\n".join(lines)

"""Input normalization strategies: raw, training-set based, and per-epoch."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dsp import Epoch, EpochSet, as_epoch_set

ZERO_STD = 1e-12


class Strategy(str, enum.Enum):
    NONE = "NONE"
    TR_BASED = "TR_BASED"
    EPOCH_BASED = "EPOCH_BASED"


class EmptyTrainingSet(ValueError):
    pass


class MissingStats(ValueError):
    pass


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def as_arrays(self):
        return np.asarray(self.mean)[:, None], np.asarray(self.std)[:, None]

    def to_json(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_json(cls, d: dict) -> "ChannelStats":
        return cls(tuple(map(float, d["mean"])), tuple(map(float, d["std"])))


def fit_dataset_stats(tr_epochs) -> ChannelStats:
    """Per-channel mean and population std pooled over every TR sample."""
    x = as_epoch_set(tr_epochs).x
    if len(x) == 0:
        raise EmptyTrainingSet("cannot fit normalization statistics on an empty set")
    channels = x.transpose(1, 0, 2).reshape(x.shape[1], -1)
    return ChannelStats(tuple(channels.mean(axis=1).tolist()),
                        tuple(channels.std(axis=1).tolist()))


def _standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    safe = np.where(std < ZERO_STD, 1.0, std)
    return np.where(std < ZERO_STD, 0.0, (x - mean) / safe)


def normalize_array(x: np.ndarray, strategy: Strategy | str,
                    stats: ChannelStats | None = None) -> np.ndarray:
    """Normalize a (..., 4, T) array of epochs row by row."""
    strategy = Strategy(strategy)
    if strategy is Strategy.NONE:
        return x
    if strategy is Strategy.TR_BASED:
        if stats is None:
            raise MissingStats("TR_BASED normalization needs ChannelStats")
        mean, std = stats.as_arrays()
        return _standardize(x, mean, std)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return _standardize(x, mean, std)


def normalize(e, strategy: Strategy | str, stats: ChannelStats | None = None):
    """Normalize an :class:`Epoch` or :class:`EpochSet`; labels and sources pass through."""
    if Strategy(strategy) is not Strategy.TR_BASED and stats is not None:
        raise ValueError("stats are only used with TR_BASED normalization")
    if isinstance(e, Epoch):
        return Epoch(normalize_array(e.data, strategy, stats), e.label, e.source)
    e = as_epoch_set(e)
    return EpochSet(normalize_array(e.x, strategy, stats), e.y, e.sources)

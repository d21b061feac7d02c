"""Majority-vote ensembles of local models."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cnn
from .dsp import NUM_CLASSES, SleepStage


class EmptyEnsemble(ValueError):
    pass


@dataclass(frozen=True)
class Ensemble:
    members: tuple[cnn.TrainedModel, ...]
    excluded_dataset: object = None

    def __post_init__(self):
        if not self.members:
            raise EmptyEnsemble("an ensemble needs at least one member")
        if self.excluded_dataset is not None and any(
                m.dataset_id == self.excluded_dataset for m in self.members):
            raise ValueError(f"member trained on excluded dataset {self.excluded_dataset!r}")
        if len({m.config.num_classes for m in self.members}) != 1:
            raise ValueError("members disagree on the number of classes")

    def __len__(self) -> int:
        return len(self.members)


def build_excluding(models: Sequence[cnn.TrainedModel], k) -> Ensemble:
    """Ensemble of every model not trained on dataset ``k``, in input order."""
    members = tuple(m for m in models if m.dataset_id != k)
    if not members:
        raise EmptyEnsemble(f"no models left after excluding dataset {k!r}")
    return Ensemble(members, k)


def vote_arrays(labels: np.ndarray, posteriors: np.ndarray,
                num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Vectorized vote over members.

    ``labels`` is (members, n) and ``posteriors`` (members, n, classes). The
    most-voted stage wins; ties go to the tied stage with the larger summed
    posterior, then to the earlier stage in W, N1, N2, N3, R order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError("need a (members, n) array of votes from at least one member")
    n = labels.shape[1]
    counts = np.zeros((n, num_classes), dtype=np.int64)
    for member_labels in labels:
        counts[np.arange(n), member_labels] += 1
    mass = posteriors.sum(axis=0)
    tied = counts == counts.max(axis=1, keepdims=True)
    # argmax returns the first maximum, which is the stage-order fallback.
    return np.where(tied, mass, -np.inf).argmax(axis=1)


def vote(per_member: Sequence[tuple[SleepStage, Sequence[float]]]) -> SleepStage:
    if not per_member:
        raise ValueError("no member predictions to vote on")
    labels = np.array([[int(stage)] for stage, _ in per_member])
    posteriors = np.array([[np.asarray(p, float)] for _, p in per_member])
    return SleepStage(int(vote_arrays(labels, posteriors, posteriors.shape[-1])[0]))


def member_predictions(e: Ensemble, epochs) -> list[cnn.Prediction]:
    """Each member normalizes the raw epochs its own way, then predicts."""
    return [cnn.predict(m, epochs) for m in e.members]


def combine(predictions: Sequence[cnn.Prediction]) -> np.ndarray:
    labels = np.stack([p.labels for p in predictions])
    posteriors = np.stack([p.posteriors for p in predictions])
    return vote_arrays(labels, posteriors, posteriors.shape[-1])


def ensemble_predict(e: Ensemble, epochs) -> np.ndarray:
    return combine(member_predictions(e, epochs))


def write_manifest(path: str | Path, member_paths: Sequence[str | Path], excluded=None) -> None:
    doc = {"members": [str(p) for p in member_paths], "excluded_dataset": excluded}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path: str | Path) -> Ensemble:
    """Load an ensemble manifest; member paths resolve relative to the manifest."""
    path = Path(path)
    doc = json.loads(path.read_text())
    models = [cnn.load(p if Path(p).is_absolute() else path.parent / p) for p in doc["members"]]
    excluded = doc.get("excluded_dataset")
    if excluded is not None:
        return build_excluding(models, excluded)
    return Ensemble(tuple(models))

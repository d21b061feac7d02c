"""Multi-database experiment protocol and report tables.

For every (dataset, config):

1. local training on TR/VAL and kappa on TR, VAL and TS,
2. every local model predicts every complete dataset (cross matrix),
3. the ensemble of all other local models predicts each complete dataset.

Per-model predictions over a complete dataset are computed once and cached,
so ensemble compositions only recount votes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cnn, edf, ensemble, metrics
from .dsp import CHANNEL_ROLES, ConditioningLog, EpochSet, SleepStage, build_epochs, condition_channels, map_stage

log = logging.getLogger(__name__)

SEED_ENV = "SOMNUS_SEED"
ECG_LABEL = "ECG"
TS_FRACTION = 0.2
VAL_FRACTION = 0.2
MIN_RECORDINGS = 5


class TooFewRecordings(ValueError):
    pass


class LeakageError(RuntimeError):
    pass


def seed_override() -> int | None:
    raw = os.environ.get(SEED_ENV)
    return int(raw) if raw not in (None, "") else None


def apply_seed_override(cfg: cnn.ModelConfig) -> cnn.ModelConfig:
    seed = seed_override()
    return cfg if seed is None else replace(cfg, seed=seed)


# --- splits ------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


@dataclass(frozen=True)
class DataSplit:
    tr: tuple[str, ...]
    val: tuple[str, ...]
    ts: tuple[str, ...]

    @property
    def training_ids(self) -> frozenset[str]:
        return frozenset(self.tr) | frozenset(self.val)


def split(recording_ids: Sequence[str], seed: int) -> DataSplit:
    """Seeded per-recording split: 20% TS, then 20% of the rest VAL, rest TR."""
    ids = sorted(recording_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("recording ids must be unique")
    if len(ids) < MIN_RECORDINGS:
        raise TooFewRecordings(f"need at least {MIN_RECORDINGS} recordings, got {len(ids)}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n_ts = _round_half_up(TS_FRACTION * len(ids))
    n_val = _round_half_up(VAL_FRACTION * (len(ids) - n_ts))
    return DataSplit(tr=tuple(order[n_ts + n_val:]), val=tuple(order[n_ts:n_ts + n_val]),
                     ts=tuple(order[:n_ts]))


# --- datasets ----------------------------------------------------------------

def read_hypnogram(path: str | Path) -> list[SleepStage]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    stages = []
    for i, row in enumerate(rows):
        if int(row["epoch_index"]) != i:
            raise ValueError(f"{path}: epoch_index {row['epoch_index']} out of order at row {i}")
        stages.append(map_stage(row["stage"]))
    return stages


def load_recording(edf_path: str | Path, hypnogram, mains_hz: float, filtering: bool,
                   source: tuple = ()) -> EpochSet:
    rec = edf.read_edf(edf_path)
    channels = {role: edf.extract_channel(rec, role) for role in CHANNEL_ROLES}
    try:
        ecg = edf.extract_channel(rec, ECG_LABEL)
    except edf.UnknownChannel:
        ecg = None
    logbook = ConditioningLog()
    conditioned = condition_channels(channels, ecg, mains_hz, filtering, logbook)
    for note in logbook.skipped:
        log.info("%s: skipped %s", edf_path, note)
    return EpochSet.from_epochs(build_epochs(conditioned, hypnogram, source))


@dataclass
class Dataset:
    dataset_id: str
    path: Path
    recordings: dict[str, EpochSet]
    _whole: EpochSet | None = field(default=None, repr=False)

    @property
    def recording_ids(self) -> list[str]:
        return sorted(self.recordings)

    def epochs(self, ids=None) -> EpochSet:
        if ids is None:
            if self._whole is None:
                self._whole = EpochSet.concat([self.recordings[i] for i in self.recording_ids])
            return self._whole
        return EpochSet.concat([self.recordings[i] for i in sorted(ids)])

    def recording_of_epoch(self) -> np.ndarray:
        return np.array([src[1] for src in self.epochs().sources])

    def labels(self, ids=None) -> np.ndarray:
        ids = self.recording_ids if ids is None else sorted(ids)
        return np.concatenate([self.recordings[i].y for i in ids]) if ids else np.zeros(0, np.int64)


def dataset_info(path: str | Path) -> dict:
    meta = Path(path) / "dataset.json"
    return json.loads(meta.read_text()) if meta.exists() else {}


def load_dataset(path: str | Path, filtering: bool = True) -> Dataset:
    """Read every ``*.edf`` with a same-named ``.csv`` hypnogram in ``path``."""
    path = Path(path)
    info = dataset_info(path)
    dataset_id = str(info.get("dataset_id", path.name))
    mains_hz = float(info.get("mains_hz", 50.0))
    recordings = {}
    for edf_path in sorted(path.glob("*.edf")):
        hyp = edf_path.with_suffix(".csv")
        if not hyp.exists():
            log.warning("no hypnogram for %s, skipping", edf_path)
            continue
        rid = edf_path.stem
        recordings[rid] = load_recording(edf_path, read_hypnogram(hyp), mains_hz, filtering,
                                         (dataset_id, rid))
    if not recordings:
        raise FileNotFoundError(f"no scored recordings in {path}")
    return Dataset(dataset_id, path, recordings)


# --- stores ------------------------------------------------------------------

def config_key(cfg: cnn.ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Workspace:
    """Loaded datasets, trained models and cached whole-dataset predictions.

    Keeping one workspace across runs is what makes adding a dataset cheap:
    existing models and their predictions are reused as-is.
    """

    datasets: dict[tuple[str, bool], Dataset] = field(default_factory=dict)
    models: dict[tuple[str, str, int], cnn.TrainedModel] = field(default_factory=dict)
    splits: dict[tuple[str, str, int], DataSplit] = field(default_factory=dict)
    predictions: dict[tuple[str, str], cnn.Prediction] = field(default_factory=dict)

    def dataset(self, path, filtering: bool) -> Dataset:
        key = (str(Path(path).resolve()), bool(filtering))
        if key not in self.datasets:
            self.datasets[key] = load_dataset(path, filtering)
        return self.datasets[key]

    def prediction(self, model: cnn.TrainedModel, ds: Dataset) -> cnn.Prediction:
        key = (model.fingerprint(), ds.dataset_id)
        if key not in self.predictions:
            self.predictions[key] = cnn.predict(model, ds.epochs())
        return self.predictions[key]


def train_local(ds: Dataset, cfg: cnn.ModelConfig, split_seed: int) -> tuple[cnn.TrainedModel, DataSplit]:
    sp = split(ds.recording_ids, split_seed)
    tr, val = ds.epochs(sp.tr), ds.epochs(sp.val)
    model = cnn.train(tr, val, cfg, dataset_id=ds.dataset_id)
    used = {src[1] for src in tr.sources} | {src[1] for src in val.sources}
    if used & set(sp.ts):
        raise LeakageError(f"TS recordings reached training of {ds.dataset_id}")
    model.provenance["training_recordings"] = sorted(used)
    return model, sp


# --- report ------------------------------------------------------------------

def _kappa(ref, pred) -> float | None:
    if len(ref) == 0:
        return None
    return metrics.cohen_kappa(metrics.confusion(ref, pred)).kappa


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def _diff(later, earlier):
    return None if later is None or earlier is None else later - earlier


@dataclass
class LocalResult:
    iterations: int
    tr: float | None
    val: float | None
    ts: float | None


@dataclass
class ExperimentReport:
    """Kappa tables keyed by config name and dataset id (``None`` = undefined)."""

    datasets: list[str]
    configs: list[str]
    local: dict[tuple[str, str], LocalResult] = field(default_factory=dict)
    # (config, target dataset, model dataset) -> kappa
    cross: dict[tuple[str, str, str], float | None] = field(default_factory=dict)
    # (config, target dataset) -> kappa
    ensemble: dict[tuple[str, str], float | None] = field(default_factory=dict)

    def external(self, config: str, k: str) -> list[float | None]:
        return [self.cross[(config, k, m)] for m in self.datasets if m != k and (config, k, m) in self.cross]

    def external_range(self, config: str, k: str):
        vals = [v for v in self.external(config, k) if v is not None]
        return (min(vals), max(vals)) if vals else (None, None)

    def external_mean(self, config: str, k: str) -> float | None:
        return _mean(self.external(config, k))

    def summary(self, config: str) -> dict[str, float | None]:
        local = _mean(self.local[(config, k)].ts for k in self.datasets if (config, k) in self.local)
        ext = _mean(self.external_mean(config, k) for k in self.datasets)
        ens = _mean(self.ensemble.get((config, k)) for k in self.datasets)
        return {"local": local, "external": ext, "ensemble": ens,
                "I_vs_II": _diff(ext, local), "I_vs_III": _diff(ens, local), "II_vs_III": _diff(ens, ext)}


def ensemble_kappas(models: dict[str, cnn.TrainedModel], datasets: dict[str, Dataset],
                    ws: Workspace) -> dict[str, float | None]:
    """ENS(k) on every complete dataset k, from cached member predictions."""
    out = {}
    for k, ds in datasets.items():
        members = [m for d, m in models.items() if d != k]
        if not members:
            out[k] = None
            continue
        ens = ensemble.build_excluding(members, k)
        labels = ensemble.combine([ws.prediction(m, ds) for m in ens.members])
        out[k] = _kappa(ds.labels(), labels)
    return out


def run_experiments(datasets: Sequence[str | Path], configs: Sequence[cnn.ModelConfig], *,
                    split_seed: int = 0, workspace: Workspace | None = None) -> ExperimentReport:
    ws = workspace if workspace is not None else Workspace()
    seed = seed_override()
    split_seed = split_seed if seed is None else seed
    configs = [apply_seed_override(c) for c in configs]
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ValueError("config names must be unique")
    ids = [dataset_info(p).get("dataset_id", Path(p).name) for p in datasets]
    if len(set(ids)) != len(ids):
        raise ValueError("dataset ids must be unique")
    report = ExperimentReport(datasets=[str(i) for i in ids], configs=names)

    for cfg in configs:
        loaded = {}
        for p in datasets:
            ds = ws.dataset(p, cfg.filtering_enabled)
            loaded[ds.dataset_id] = ds
        models = {}
        for k, ds in loaded.items():
            key = (k, config_key(cfg), split_seed)
            if key not in ws.models:
                log.info("training %s on %s", cfg.name, k)
                ws.models[key], ws.splits[key] = train_local(ds, cfg, split_seed)
            model, sp = ws.models[key], ws.splits[key]
            models[k] = model
            own = ws.prediction(model, ds)
            by_part = {}
            owner = ds.recording_of_epoch()
            for part, rids in (("tr", sp.tr), ("val", sp.val), ("ts", sp.ts)):
                mask = np.isin(owner, list(rids))
                by_part[part] = _kappa(ds.labels()[mask], own.labels[mask])
            report.local[(cfg.name, k)] = LocalResult(int(model.provenance["epochs_run"]), **by_part)
        for j, target in loaded.items():
            for k, model in models.items():
                report.cross[(cfg.name, j, k)] = _kappa(target.labels(), ws.prediction(model, target).labels)
        for k, kap in ensemble_kappas(models, loaded, ws).items():
            report.ensemble[(cfg.name, k)] = kap
    return report


# --- rendering ---------------------------------------------------------------

def _fmt(v: float | None, places: int) -> str:
    return "undef" if v is None else f"{v:.{places}f}"


def report_tables(r: ExperimentReport) -> list[tuple[str, list[str], list[list[str]]]]:
    """The four tables as (title, header, rows) with formatted cells."""
    local_rows = []
    for k in r.datasets:
        for c in r.configs:
            if (c, k) not in r.local:
                continue
            lr = r.local[(c, k)]
            local_rows.append([k, c, str(lr.iterations), _fmt(lr.tr, 2), _fmt(lr.val, 2), _fmt(lr.ts, 2)])
    cross_rows = []
    for j in r.datasets:
        for c in r.configs:
            row = [j, c]
            for k in r.datasets:
                cell = _fmt(r.cross.get((c, j, k)), 2)
                row.append(cell + "*" if j == k else cell)
            cross_rows.append(row)
    ens_rows = []
    for k in r.datasets:
        for c in r.configs:
            lo, hi = r.external_range(c, k)
            local = r.local[(c, k)].ts if (c, k) in r.local else None
            ens_rows.append([k, c, _fmt(local, 2), _fmt(lo, 2), _fmt(hi, 2),
                             _fmt(r.external_mean(c, k), 2), _fmt(r.ensemble.get((c, k)), 2)])
    summary_rows = []
    for c in r.configs:
        s = r.summary(c)
        summary_rows.append([c] + [_fmt(s[key], 4) for key in
                                   ("local", "external", "ensemble", "I_vs_II", "I_vs_III", "II_vs_III")])
    return [
        ("Local performance", ["dataset", "config", "iterations", "TR", "VAL", "TS"], local_rows),
        ("Cross-dataset performance (row: target, column: model; * = own dataset)",
         ["target", "config"] + [f"M({k})" for k in r.datasets], cross_rows),
        ("Ensemble vs individual models", ["target", "config", "local_TS", "external_min",
                                           "external_max", "external_avg", "ensemble"], ens_rows),
        ("Averages per config", ["config", "I_local", "II_external", "III_ensemble",
                                 "I_vs_II", "I_vs_III", "II_vs_III"], summary_rows),
    ]


def render_report(r: ExperimentReport, fmt: str = "tsv") -> str:
    fmt = fmt.lower()
    if fmt not in ("tsv", "markdown"):
        raise ValueError(f"unknown report format {fmt!r}")
    out = io.StringIO()
    for i, (title, header, rows) in enumerate(report_tables(r)):
        if i:
            out.write("\n")
        if fmt == "tsv":
            out.write(f"# {title}\n")
            w = csv.writer(out, delimiter="\t", lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        else:
            out.write(f"## {title}\n\n")
            out.write("| " + " | ".join(header) + " |\n")
            out.write("|" + "---|" * len(header) + "\n")
            for row in rows:
                out.write("| " + " | ".join(row) + " |\n")
    return out.getvalue()


def parse_tsv_report(text: str) -> dict[str, list[dict[str, str]]]:
    """Inverse of the TSV rendering: table title -> list of row dicts."""
    tables, title, lines = {}, None, []

    def flush():
        if title is not None:
            tables[title] = list(csv.DictReader(lines, delimiter="\t"))

    for line in text.splitlines():
        if line.startswith("# "):
            flush()
            title, lines = line[2:], []
        elif line:
            lines.append(line)
    flush()
    return tables


def parse_cell(text: str) -> float | None:
    text = text.rstrip("*")
    return None if text == "undef" else float(text)


def load_configs(path: str | Path) -> tuple[list[cnn.ModelConfig], int]:
    """Configs file: a list of config objects, or ``{"configs": [...], "split_seed": n}``."""
    doc = json.loads(Path(path).read_text())
    split_seed = 0
    if isinstance(doc, dict):
        split_seed = int(doc.get("split_seed", 0))
        doc = doc["configs"]
    return [cnn.ModelConfig.from_json(d) for d in doc], split_seed

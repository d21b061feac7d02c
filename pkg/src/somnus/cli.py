"""Command-line entry point: ``somnus <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cnn, combinatorics, edf, ensemble, harness, metrics, synthdata
from .dsp import EPOCH_SECONDS, STAGES, EpochSet, SleepStage, map_stage

PREDICTION_HEADER = ["epoch_index", "stage"] + [f"p_{s.name}" for s in STAGES]


def _recording_inputs(path: Path, filtering: bool, mains_hz: float | None):
    """Epoch indices and epochs of one EDF; unscored files yield every full epoch."""
    if mains_hz is None:
        mains_hz = float(harness.dataset_info(path.parent).get("mains_hz", 50.0))
    sidecar = path.with_suffix(".csv")
    if sidecar.exists():
        hyp = harness.read_hypnogram(sidecar)
    else:
        rec = edf.read_edf(path)
        n_full = int(rec.num_records * rec.record_duration_s // EPOCH_SECONDS)
        hyp = [SleepStage.W] * n_full
    epochs = harness.load_recording(path, hyp, mains_hz, filtering)
    indices = [i for i, s in enumerate(hyp) if s is not SleepStage.EXCLUDED]
    return np.array(indices), epochs


def prediction_inputs(path: str | Path, filtering: bool, mains_hz: float | None = None):
    """A dataset directory is indexed by position in its sorted, concatenated epochs."""
    path = Path(path)
    if path.is_dir():
        ds = harness.load_dataset(path, filtering)
        return np.arange(len(ds.epochs())), ds.epochs()
    return _recording_inputs(path, filtering, mains_hz)


def write_predictions(path: str | Path, indices, labels, posteriors) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for i, lab, p in zip(indices, labels, posteriors):
            w.writerow([int(i), SleepStage(int(lab)).name] + [f"{v:.6f}" for v in p])


def read_stage_csv(path: str | Path) -> dict[int, SleepStage]:
    with open(path, newline="") as fh:
        return {int(row["epoch_index"]): map_stage(row["stage"]) for row in csv.DictReader(fh)}


def _reference(path: Path) -> dict[int, SleepStage]:
    if path.is_dir():
        ds = harness.load_dataset(path, filtering=False)
        return {i: SleepStage(int(y)) for i, y in enumerate(ds.labels())}
    return read_stage_csv(path)


# --- subcommands -------------------------------------------------------------

def cmd_synth(a) -> int:
    spec = synthdata.DatabaseSpec.load(a.spec)
    if harness.seed_override() is not None:
        spec.seed = harness.seed_override()
    out = synthdata.write_database(spec, a.out)
    print(f"wrote {spec.n_recordings} recordings to {out}")
    return 0


def cmd_train(a) -> int:
    cfg = harness.apply_seed_override(cnn.ModelConfig.from_json(json.loads(Path(a.config).read_text())))
    ds = harness.load_dataset(a.data, cfg.filtering_enabled)
    model, sp = harness.train_local(ds, cfg, a.split_seed)
    cnn.save(model, a.out)
    print(f"trained {cfg.name} on {ds.dataset_id}: TR={len(sp.tr)} VAL={len(sp.val)} TS={len(sp.ts)} "
          f"recordings, {model.provenance['epochs_run']} epochs, best check {model.provenance['best_check']}")
    return 0


def cmd_predict(a) -> int:
    model = cnn.load(a.model)
    indices, epochs = prediction_inputs(a.data, model.config.filtering_enabled, a.mains)
    pred = cnn.predict(model, epochs)
    write_predictions(a.out, indices, pred.labels, pred.posteriors)
    print(f"predicted {len(indices)} epochs -> {a.out}")
    return 0


def cmd_ensemble(a) -> int:
    ens = ensemble.load_manifest(a.manifest)
    per_member, indices = [], None
    for m in ens.members:
        indices, epochs = prediction_inputs(a.data, m.config.filtering_enabled, a.mains)
        per_member.append(cnn.predict(m, epochs))
    labels = ensemble.combine(per_member)
    # Reported posteriors are the member average; the label is the vote.
    mean_post = np.mean([p.posteriors for p in per_member], axis=0)
    write_predictions(a.out, indices, labels, mean_post)
    print(f"{len(ens)}-member ensemble predicted {len(indices)} epochs -> {a.out}")
    return 0


def cmd_evaluate(a) -> int:
    ref = _reference(Path(a.ref))
    pred = read_stage_csv(a.pred)
    common = sorted(i for i in ref.keys() & pred.keys()
                    if ref[i] is not SleepStage.EXCLUDED and pred[i] is not SleepStage.EXCLUDED)
    if not common:
        print("no overlapping scored epochs", file=sys.stderr)
        return 1
    m = metrics.confusion([ref[i] for i in common], [pred[i] for i in common])
    k = metrics.cohen_kappa(m)
    print(f"epochs\t{m.n}")
    print(f"accuracy\t{m.accuracy:.4f}")
    print(f"kappa\t{'undef' if k.kappa is None else f'{k.kappa:.4f}'}")
    print("ref\\pred\t" + "\t".join(s.name for s in STAGES))
    for s, row in zip(STAGES, m.counts):
        print(s.name + "\t" + "\t".join(str(int(v)) for v in row))
    return 0


def cmd_combinatorics(a) -> int:
    mode = combinatorics.Mode(a.mode)
    print(f"combinations\t{combinatorics.closed_form(a.n, mode)}")
    trainings = (combinatorics.ensemble_training_count(a.n) if mode is combinatorics.Mode.ENSEMBLE
                 else combinatorics.single_comb_count(a.n))
    print(f"trainings\t{trainings}")
    if a.enumerate:
        print(combinatorics.format_space(combinatorics.enumerate_space(a.n, mode)))
    return 0


def cmd_experiment(a) -> int:
    configs, split_seed = harness.load_configs(a.configs)
    report = harness.run_experiments(a.datasets, configs, split_seed=split_seed)
    Path(a.out).write_text(harness.render_report(report, a.format))
    print(f"report -> {a.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="somnus", description="Multi-database sleep staging toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic database")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a local model on one database")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split-seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    for name, func, src in (("predict", cmd_predict, "--model"), ("ensemble", cmd_ensemble, "--manifest")):
        s = sub.add_parser(name, help=f"stage epochs with a {'model' if name == 'predict' else 'majority vote'}")
        s.add_argument(src, required=True)
        s.add_argument("--data", required=True, help="database directory or single EDF file")
        s.add_argument("--out", required=True)
        s.add_argument("--mains", type=float, default=None, help="mains frequency for a lone EDF file")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="kappa of predictions against a reference")
    s.add_argument("--ref", required=True, help="hypnogram CSV or database directory")
    s.add_argument("--pred", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("combinatorics", help="size of the training-composition space")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--mode", choices=[m.value for m in combinatorics.Mode], required=True)
    s.add_argument("--enumerate", action="store_true")
    s.set_defaults(func=cmd_combinatorics)

    s = sub.add_parser("experiment", help="run the full multi-database protocol")
    s.add_argument("--datasets", nargs="+", required=True)
    s.add_argument("--configs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["tsv", "markdown"], default="tsv")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

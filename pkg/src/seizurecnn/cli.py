"""Command-line entry point.

Subcommands cover the whole experiment cycle: synth, preprocess, split,
train, evaluate, predict, report. Exit codes: 0 success, 2 bad
configuration or flags, 3 data problems (missing subjects, malformed
files, layout mismatches); anything else that goes wrong exits 1.

A training run writes a self-describing directory
``{subject}_{topology}_s{seed:04d}/`` holding parameters.npz,
history.csv and run.json; evaluate adds report.json and roc.csv beside
them. run.json records the resolved config, the data manifest path, the
layout content hash and the toolkit and RNG identifiers, so a run can be
re-evaluated long after the fact and a stale layout is caught instead of
silently mis-gridding channels.

Training several seeds at once honors SEIZURECNN_WORKERS (default 1)
with one process per seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

from . import __version__
from .data import (Manifest, decimate, generate_synthetic, load_clip,
                   load_split_segments, preprocess_clip, save_clip,
                   split_train_validation, znormalize)
from .errors import (ConfigError, DataError, LayoutError, SeizureCnnError,
                     UnknownSubjectError)
from .evaluation import (EvaluationReport, aggregate_clip, aggregate_runs,
                         evaluate_subject, predict_segments)
from .tensor import RNG_ALGORITHM_ID, load_arrays, save_arrays, seeded_rng
from .topologies import TOPOLOGIES, build_topology
from .training import TrainConfig, fit

WORKERS_ENV = "SEIZURECNN_WORKERS"

RUN_FILE = "run.json"
PARAMS_FILE = "parameters.npz"
HISTORY_FILE = "history.csv"
REPORT_FILE = "report.json"
ROC_FILE = "roc.csv"


@dataclass
class RunManifest:
    """Contents of run.json: everything needed to re-evaluate the run."""
    subject: str
    topology: str
    seed: int
    config: dict
    data_manifest: str
    decimation: str
    layout_sha256: str | None
    artifacts: dict
    toolkit_version: str = __version__
    rng_algorithm: str = RNG_ALGORITHM_ID

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read run manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"run manifest {path} is not valid JSON: {exc}") from exc
        try:
            return cls(**obj)
        except TypeError as exc:
            raise DataError(f"run manifest {path} is malformed: {exc}") from exc


def _load_config(args) -> TrainConfig:
    """Config file plus flag overrides, validated fail-closed."""
    keys: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"config {args.config} must be a JSON mapping")
        keys.update(obj)
    if getattr(args, "topology", None):
        keys["topology"] = args.topology
    if getattr(args, "epochs", None) is not None:
        keys["epochs"] = args.epochs
    return TrainConfig.from_mapping(keys)


def _require_subject(manifest: Manifest, subject: str) -> None:
    if subject not in manifest.subjects():
        raise UnknownSubjectError(
            f"unknown subject {subject!r}; manifest has {manifest.subjects()}")


def _parse_seeds(args) -> list[int]:
    if args.seeds:
        lo, sep, hi = args.seeds.partition("..")
        if not sep or not lo.isdigit() or not hi.isdigit():
            raise ConfigError(f"--seeds wants the form A..B, got {args.seeds!r}")
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ConfigError(f"--seeds range is empty: {args.seeds}")
        return list(range(lo, hi + 1))
    return [args.seed]


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {workers}")
    return workers


def _run_dir(out: Path, subject: str, topology: str, seed: int) -> Path:
    return out / f"{subject}_{topology}_s{seed:04d}"


def _train_one(cfg_mapping: dict, manifest_path: str, subject: str,
               out: str, decimation: str) -> str:
    """One complete training run; safe to call in a spawned worker."""
    cfg = TrainConfig.from_mapping(cfg_mapping)
    manifest = Manifest.load(manifest_path)
    layout = manifest.layout_for(subject)
    train_batch, _ = load_split_segments(manifest, subject, "train", decimation)

    run_rng = seeded_rng(cfg.seed)
    _, network = build_topology(cfg.topology, layout, run_rng.split("model"))
    state, history = fit(network, train_batch, cfg, run_rng.split("fit"), layout=layout)

    run_dir = _run_dir(Path(out), subject, cfg.topology, cfg.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_arrays(run_dir / PARAMS_FILE, state)
    history.to_csv(run_dir / HISTORY_FILE)
    RunManifest(
        subject=subject, topology=cfg.topology, seed=cfg.seed,
        config=cfg.to_mapping(), data_manifest=str(manifest_path),
        decimation=decimation,
        layout_sha256=layout.content_hash() if layout is not None else None,
        artifacts={"parameters": PARAMS_FILE, "history": HISTORY_FILE,
                   "report": REPORT_FILE, "roc": ROC_FILE},
    ).save(run_dir / RUN_FILE)
    return str(run_dir)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = Manifest.load(args.manifest)
    _require_subject(manifest, args.subject)
    seeds = _parse_seeds(args)
    jobs = [(cfg.replace(seed=s).to_mapping(), str(args.manifest), args.subject,
             str(args.out), args.decimation) for s in seeds]
    workers = min(_worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers,
                                 mp_context=get_context("spawn")) as pool:
            futures = [pool.submit(_train_one, *job) for job in jobs]
            run_dirs = [f.result() for f in futures]
    else:
        run_dirs = [_train_one(*job) for job in jobs]
    for run_dir in run_dirs:
        print(run_dir)
    return 0


def _load_trained(run_dir: Path, manifest: Manifest):
    """Rebuild the network of a run directory with its stored parameters."""
    run = RunManifest.load(run_dir / RUN_FILE)
    layout = manifest.layout_for(run.subject)
    stored = layout.content_hash() if layout is not None else None
    if stored != run.layout_sha256:
        raise LayoutError(
            f"layout for {run.subject} does not match the one used in training "
            f"({stored} vs {run.layout_sha256})")
    _, network = build_topology(run.topology, layout, seeded_rng(0).split("shape"))
    try:
        network.load_state(load_arrays(run_dir / PARAMS_FILE))
    except FileNotFoundError as exc:
        raise DataError(f"{run_dir} has no {PARAMS_FILE}") from exc
    except (zipfile.BadZipFile, ValueError, KeyError) as exc:
        raise DataError(f"{run_dir}/{PARAMS_FILE} is corrupt: {exc}") from exc
    return run, layout, network


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    manifest_path = args.manifest
    if manifest_path is None:
        manifest_path = RunManifest.load(run_dir / RUN_FILE).data_manifest
    manifest = Manifest.load(manifest_path)
    run, layout, network = _load_trained(run_dir, manifest)
    report = evaluate_subject(network, run.topology, manifest, run.subject,
                              split=args.split, layout=layout, seed=run.seed,
                              decimation=run.decimation)
    report.save(run_dir / REPORT_FILE)
    report.roc_to_csv(run_dir / ROC_FILE)
    print(f"{report.subject} {report.topology} seed={run.seed} "
          f"{args.split} AUC={report.auc:.6f}")
    return 0


def cmd_predict(args) -> int:
    run_dir = Path(args.run)
    manifest_path = args.manifest
    if manifest_path is None:
        manifest_path = RunManifest.load(run_dir / RUN_FILE).data_manifest
    manifest = Manifest.load(manifest_path)
    run, layout, network = _load_trained(run_dir, manifest)
    clip = load_clip(args.clip)
    segs = preprocess_clip(clip, decimation=run.decimation)
    probs = predict_segments(network, run.topology, segs, layout)
    print(f"{args.clip} probability={aggregate_clip(probs):.6f}")
    return 0


def cmd_synth(args) -> int:
    manifest = generate_synthetic(args.out, n_subjects=args.subjects,
                                  train_clips=args.clips, test_clips=args.test_clips,
                                  minutes=args.minutes, seed=args.seed)
    print(Path(args.out) / "manifest.json")
    print(f"{len(manifest.clips)} clips for {len(manifest.subjects())} subject(s)")
    return 0


def _rebase(manifest: Manifest, records, out_dir: Path) -> Manifest:
    """Manifest whose relative paths resolve from out_dir."""
    rebased = []
    for r in records:
        rel = os.path.relpath(manifest.clip_path(r), out_dir)
        rebased.append(type(r)(rel, r.subject, r.label, r.split, r.group))
    layouts = {s: os.path.relpath(manifest.base / p, out_dir)
               for s, p in manifest.layouts.items()}
    return Manifest(rebased, layouts, base=out_dir)


def cmd_split(args) -> int:
    manifest = Manifest.load(args.manifest)
    train_m, val_m = split_train_validation(manifest, args.fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_path = out / "train_manifest.json"
    val_path = out / "validation_manifest.json"
    _rebase(manifest, train_m.clips, out).save(train_path)
    _rebase(manifest, val_m.clips, out).save(val_path)
    n_val = len(val_m.clips)
    print(train_path)
    print(val_path)
    print(f"{n_val} clips moved to validation, {len(train_m.clips)} remain")
    return 0


def cmd_preprocess(args) -> int:
    manifest = Manifest.load(args.manifest)
    out = Path(args.out)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    (out / "layouts").mkdir(parents=True, exist_ok=True)
    records = []
    for rec in manifest.clips:
        clip = manifest.load_record(rec)
        cooked = znormalize(decimate(clip, args.decimation))
        rel = f"clips/{Path(rec.path).name}"
        save_clip(cooked, out / rel)
        records.append(type(rec)(rel, rec.subject, rec.label, rec.split, rec.group))
    layouts = {}
    for subject, path in manifest.layouts.items():
        layout = manifest.layout_for(subject)
        rel = f"layouts/{Path(path).name}"
        layout.save(out / rel)
        layouts[subject] = rel
    Manifest(records, layouts, base=out).save(out / "manifest.json")
    print(out / "manifest.json")
    print(f"{len(records)} clips preprocessed to {out}")
    return 0


def cmd_report(args) -> int:
    reports: dict[tuple[str, str], list[EvaluationReport]] = {}
    skipped: list[str] = []
    for run in args.runs:
        path = Path(run) / REPORT_FILE
        if not path.exists():
            skipped.append(str(run))
            continue
        report = EvaluationReport.load(path)
        reports.setdefault((report.subject, report.topology), []).append(report)
    if not reports:
        raise DataError("no evaluation reports found in the given run directories")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups = [aggregate_runs(group) for _, group in sorted(reports.items())]
    with open(out / "aggregates.json", "w") as fh:
        json.dump({"groups": [g.to_mapping() for g in groups], "skipped": sorted(skipped)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")

    # mean-AUC grid, subjects down, topologies across
    subjects = sorted({s for s, _ in reports})
    with open(out / "auc_table.csv", "w") as fh:
        fh.write("subject," + ",".join(TOPOLOGIES) + "\n")
        for subject in subjects:
            cells = []
            for topology in TOPOLOGIES:
                group = reports.get((subject, topology))
                cells.append(f"{aggregate_runs(group).mean:.6f}" if group else "")
            fh.write(subject + "," + ",".join(cells) + "\n")

    for g in groups:
        print(f"{g.subject} {g.topology}: n={len(g.aucs)} mean={g.mean:.4f} "
              f"min={g.minimum:.4f} q1={g.q1:.4f} median={g.median:.4f} "
              f"q3={g.q3:.4f} max={g.maximum:.4f}")
    if skipped:
        print("skipped (no report):")
        for s in sorted(skipped):
            print(f"  {s}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seizurecnn",
        description="Seizure-prediction experiments on 16-channel clips")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=1)
    p.add_argument("--clips", type=int, default=80, help="train clips per class")
    p.add_argument("--test-clips", type=int, default=20, help="test clips per class")
    p.add_argument("--minutes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="cache decimated, normalized clips")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--decimation", choices=("fir", "naive"), default="fir")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="carve out a validation set")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one subject/topology over seeds")
    p.add_argument("--config", help="JSON file of TrainConfig keys")
    p.add_argument("--manifest", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--topology", choices=TOPOLOGIES)
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", help="inclusive range A..B, one run per seed")
    p.add_argument("--out", required=True)
    p.add_argument("--decimation", choices=("fir", "naive"), default="fir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained run on a labeled split")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--manifest", help="defaults to the manifest recorded in run.json")
    p.add_argument("--split", choices=("train", "test", "validation"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="probability for one clip file")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", help="defaults to the manifest recorded in run.json")
    p.add_argument("clip")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="aggregate evaluated runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SeizureCnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

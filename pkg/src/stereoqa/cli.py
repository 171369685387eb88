"""Command-line entry point.

Subcommands: synth, extract-nss, train, evaluate, predict.  Standard
output carries only machine-readable results; diagnostics go to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import datakit, evalmetrics, imagepipe, network, nss, training
from .errors import StereoQaError


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereoqa",
        description="No-reference stereo image quality toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic stereo dataset")
    p.add_argument("--contents", type=int, default=5)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--size", type=int, default=256,
                   help="square image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--asymmetric", action="store_true",
                   help="also emit right-view-only distorted samples")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("extract-nss", help="compute 108-dim naturalness features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="recompute even if already present in the output file")

    p = sub.add_parser("train", help="train the multi-task network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lambda", dest="lambda_weight", type=float, default=25.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-aux", action="store_true",
                   help="disable the auxiliary naturalness task (ablation)")

    p = sub.add_parser("evaluate", help="evaluate checkpoints on test splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--run-dir", required=True,
                   help="directory written by the train subcommand")
    p.add_argument("--out", required=True, help="report CSV path")

    p = sub.add_parser("predict", help="predict the quality of one stereo pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    return parser


def cmd_synth(args) -> int:
    spec = datakit.SynthSpec(contents=args.contents, levels=args.levels,
                             seed=args.seed, height=args.size, width=args.size,
                             asymmetric=args.asymmetric)
    manifest = datakit.synth_dataset(spec, args.out, overwrite=args.overwrite)
    _log(f"wrote {manifest}")
    print(manifest)
    return 0


def cmd_extract_nss(args) -> int:
    samples = datakit.load_manifest(args.manifest)
    done = {}
    if os.path.exists(args.out) and not args.force:
        done = nss.read_feature_file(args.out)
        _log(f"resuming: {len(done)} of {len(samples)} already present")

    failures = 0
    records = [(sid, vec) for sid, vec in done.items()]
    for sample in samples:
        if sample.id in done:
            continue
        try:
            left = imagepipe.load_image(sample.left_path)
            right = imagepipe.load_image(sample.right_path)
            vec = nss.extract_nss_features(left, right)
        except StereoQaError as exc:
            _log(f"sample {sample.id}: {exc}")
            failures += 1
            continue
        records.append((sample.id, vec))
        _log(f"extracted {sample.id}")

    known = {sid for sid, _ in records}
    ordered = [(s.id, dict(records)[s.id]) for s in samples if s.id in known]
    nss.write_feature_file(args.out, ordered)
    _log(f"wrote {len(ordered)} feature rows to {args.out}")
    return 1 if failures else 0


def _load_dataset(manifest_path, features_path):
    samples = datakit.load_manifest(manifest_path)
    features = nss.read_feature_file(features_path)
    missing = [s.id for s in samples if s.id not in features]
    if missing:
        _log(f"{len(missing)} sample(s) without features (first: {missing[0]}); "
             "they are excluded from training but still evaluated")
    data = []
    for s in samples:
        data.append(training.SampleData(
            sample=s,
            left=imagepipe.load_image(s.left_path),
            right=imagepipe.load_image(s.right_path),
            features=features.get(s.id)))
    return data


SPLITS_HEADER = "run,role,ref_id"


def write_splits_csv(path, manifests) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(SPLITS_HEADER + "\n")
        for m in manifests:
            for role, refs in (("train", m.train_refs), ("val", m.val_refs),
                               ("test", m.test_refs)):
                for ref in refs:
                    fh.write(f"{m.run_index},{role},{ref}\n")


def read_splits_csv(path):
    from .training import SplitManifest

    rows = {}
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != SPLITS_HEADER:
            raise StereoQaError(f"{path}: bad splits header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            run_s, role, ref = line.split(",")
            rows.setdefault(int(run_s), {"train": [], "val": [], "test": []})[
                role].append(ref)
    manifests = []
    for run in sorted(rows):
        r = rows[run]
        manifests.append(SplitManifest(
            run_index=run, train_refs=tuple(r["train"]),
            val_refs=tuple(r["val"]), test_refs=tuple(r["test"]), seed=-1))
    return manifests


def cmd_train(args) -> int:
    data = _load_dataset(args.manifest, args.features)
    config = training.TrainConfig(
        lambda_weight=args.lambda_weight, learning_rate=args.lr,
        momentum=args.momentum, weight_decay=args.weight_decay,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
        auxiliary_enabled=not args.no_aux)
    manifests = training.make_splits([d.sample for d in data],
                                     runs=args.runs, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    write_splits_csv(os.path.join(args.out_dir, "splits.csv"), manifests)

    for manifest in manifests:
        _log(f"run {manifest.run_index}: training "
             f"({len(manifest.train_refs)}/{len(manifest.val_refs)}/"
             f"{len(manifest.test_refs)} contents)")
        params, rows = training.train(config, manifest, data)
        ckpt = os.path.join(args.out_dir, f"checkpoint-run{manifest.run_index}.ckpt")
        network.save_checkpoint(params, ckpt)
        training.write_training_log(
            os.path.join(args.out_dir, f"trainlog-run{manifest.run_index}.csv"), rows)
        _log(f"run {manifest.run_index}: saved {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    data = _load_dataset(args.manifest, args.features)
    manifests = read_splits_csv(os.path.join(args.run_dir, "splits.csv"))
    reports = []
    for manifest in manifests:
        ckpt = os.path.join(args.run_dir,
                            f"checkpoint-run{manifest.run_index}.ckpt")
        if not os.path.isfile(ckpt):
            raise StereoQaError(f"missing checkpoint {ckpt}")
        params = network.load_checkpoint(ckpt)
        reports.append(evalmetrics.evaluate_run(params, manifest, data))
    evalmetrics.write_report_csv(args.out, reports)
    mean_rows = evalmetrics.aggregate_reports(reports)
    _log(evalmetrics.format_report_table(mean_rows,
                                         title=f"mean over {len(reports)} run(s)"))
    overall = next((r for r in mean_rows if r.group == "ALL"), None)
    if overall is not None:
        plcc_s = "nan" if overall.plcc is None else f"{overall.plcc:.6f}"
        srocc_s = "nan" if overall.srocc is None else f"{overall.srocc:.6f}"
        print(f"{plcc_s},{srocc_s}")
    return 0


def cmd_predict(args) -> int:
    params = network.load_checkpoint(args.checkpoint)
    left = imagepipe.load_image(args.left)
    right = imagepipe.load_image(args.right)
    score = training.predict_image(params, left, right)
    print(np.format_float_positional(score, unique=True))
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "extract-nss": cmd_extract_nss,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except StereoQaError as exc:
        _log(f"error: {exc}")
        return 1
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

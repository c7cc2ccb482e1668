"""Command-line pipeline: ingest, augment, train, evaluate, ensemble,
explain, and end-to-end reproduction.

Every subcommand writes its artifacts plus a run manifest recording the
exact command, a configuration fingerprint, and the produced files. One
master seed fans out to per-stage seeds so concurrent stages never share
randomness and reruns are bit-for-bit repeatable.
"""

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .beats import (CLASS_NAMES, BeatDataset, load_records_dir,
                    read_beats_csv, stratified_split, write_beats_csv)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (RunManifest, config_hash, derive_seed, load_config,
                     thread_cap)
from .ensemble import (STRATEGIES, LogitSet, ManifestEntry, build_strategy,
                       fuse, load_manifest, predict_classes, write_logits_csv,
                       write_manifest)
from .errors import ConfigError, EcgkitError
from .gan import (GanTrainConfig, balance_dataset, balance_summary,
                  class_count_report, gan_train)
from .gradcam import grad_cam
from .metrics import bootstrap_ci, confusion, evaluate_predictions, prf1, roc_auc
from .models import ModelDescriptor, build
from .report import render_report
from .training import train

ARCHS = ("cnn", "cnn_lstm", "cnn_lstm_attn", "resnet1d")
MIN_CI_SAMPLES = 30


def softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _macro_f1_of_pairs(pairs):
    matrix = confusion(pairs[:, 0].astype(np.int64),
                       pairs[:, 1].astype(np.int64))
    return prf1(matrix).macro_f1


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _pool_map(fn, jobs):
    """Run independent jobs, fanning out only when a cap above 1 is set."""
    workers = min(thread_cap(), len(jobs))
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _manifest_for(args, params):
    command = "ecgkit " + " ".join(getattr(args, "_argv", []))
    digest = config_hash(params if isinstance(params, dict)
                         else params.to_dict())
    return RunManifest(command=command, config_hash=digest,
                       version=__version__, started_at=RunManifest.now())


def _sibling_manifest_path(out_file):
    out_file = Path(out_file)
    return out_file.parent / (out_file.stem + ".manifest.json")


def _select_rows(dataset, split_tag):
    """Rows for one split; a file with no split column counts whole."""
    tags = {beat.split_tag for beat in dataset.beats}
    if tags == {"unassigned"}:
        return dataset.matrix()
    X, y = dataset.matrix(split_tag)
    if len(y) == 0:
        raise ConfigError(f"no beats tagged {split_tag!r} in the input; "
                          f"found tags {sorted(tags)}")
    return X, y


def _beat_length(dataset):
    return len(dataset.beats[0].samples)


def _normalized_sources(dataset):
    """Collapse source tags to the two-value vocabulary of the beat files."""
    beats = [dataclasses.replace(
        beat, source="synthetic" if beat.source == "synthetic" else "real")
        for beat in dataset.beats]
    return BeatDataset(beats, rng_seed=dataset.rng_seed)


def _evaluate_arrays(y_true, y_pred, probabilities, seed, n_resamples):
    bundle = evaluate_predictions(y_true, y_pred, probabilities)
    matrix = confusion(y_true, y_pred)
    curves = {}
    for k in range(probabilities.shape[1]):
        positives = y_true == k
        if positives.any() and (~positives).any():
            curves[k] = roc_auc(probabilities[:, k], positives)
    cis = []
    if len(y_true) >= MIN_CI_SAMPLES:
        correct = (y_pred == y_true).astype(np.float64)
        cis.append(bootstrap_ci(correct, lambda a: float(a.mean()),
                                n_resamples=n_resamples,
                                seed=derive_seed(seed, "ci/accuracy"),
                                name="accuracy"))
        pairs = np.stack([y_true, y_pred], axis=1)
        cis.append(bootstrap_ci(pairs, _macro_f1_of_pairs,
                                n_resamples=n_resamples,
                                seed=derive_seed(seed, "ci/macro_f1"),
                                name="macro_f1"))
    return bundle, matrix, curves, cis


def _saliency_for(model, X, y_pred, count):
    count = min(count, len(X))
    return {str(i): grad_cam(model, X[i], int(y_pred[i]))
            for i in range(count)}


def cmd_ingest(args):
    manifest = _manifest_for(args, {
        "records_dir": args.records_dir, "lead": args.lead,
        "beat_len": args.beat_len, "seed": args.seed,
        "train_fraction": args.train_fraction, "out": str(args.out)})
    dataset = load_records_dir(args.records_dir, lead=args.lead,
                               beat_len=args.beat_len)
    stratified_split(dataset, train_fraction=args.train_fraction,
                     seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_beats_csv(out, dataset)
    manifest.add_files([out])
    manifest.write(_sibling_manifest_path(out))


def _train_generators(dataset, gan_config, labels, seed, stage_prefix):
    """One adversarial pair per deficient class, each on its own seed."""
    def job(label):
        records = [b for b in dataset.beats
                   if b.split_tag == "train" and b.label == label]
        stage_seed = derive_seed(seed, f"{stage_prefix}/{CLASS_NAMES[label]}")
        generator, discriminator, _ = gan_train(records, gan_config,
                                                seed=stage_seed)
        return label, (generator, discriminator)

    return dict(_pool_map(job, list(labels)))


def _augment_dataset(dataset, gan_config, tau, balance_ratio, seed,
                     stage_prefix="augment"):
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    if not 0.0 < balance_ratio <= 1.0:
        raise ConfigError(
            f"balance ratio must lie in (0, 1], got {balance_ratio}")
    counts = dataset.counts_for_split("train")
    majority = max(counts.values())
    if majority == 0:
        raise ConfigError("dataset has no beats tagged train")
    target = int(round(majority * balance_ratio))
    deficient = [label for label, count in sorted(counts.items())
                 if 0 < count < target]
    generators = _train_generators(dataset, gan_config, deficient, seed,
                                   stage_prefix)
    return balance_dataset(dataset, generators, tau=tau, seed=seed,
                           balance_ratio=balance_ratio)


def cmd_augment(args):
    manifest = _manifest_for(args, {
        "in": str(args.in_path), "tau": args.tau,
        "balance_ratio": args.balance_ratio, "epochs": args.epochs,
        "batch_size": args.batch_size, "seed": args.seed,
        "out": str(args.out)})
    dataset = read_beats_csv(args.in_path)
    gan_config = GanTrainConfig(beat_len=_beat_length(dataset),
                                epochs=args.epochs,
                                batch_size=args.batch_size)
    balanced = _augment_dataset(dataset, gan_config, args.tau,
                                args.balance_ratio, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_beats_csv(out, _normalized_sources(balanced))
    summary_path = out.parent / (out.stem + ".summary.json")
    _write_json(summary_path, balance_summary(dataset, balanced))
    manifest.add_files([out, summary_path])
    manifest.write(_sibling_manifest_path(out))


def _train_one_arch(config, dataset, arch, command):
    run_config = config.train_configs[arch]
    descriptor = ModelDescriptor(arch=arch, input_len=_beat_length(dataset))
    model = build(descriptor, seed=derive_seed(config.seed, f"train/{arch}"))
    model, history = train(model, dataset, run_config)

    stage = Path(config.out_dir) / "train" / arch
    stage.mkdir(parents=True, exist_ok=True)
    checkpoint_path = stage / "model.ckpt"
    save_checkpoint(checkpoint_path, model)
    history_path = history.to_csv(stage / "history.csv")

    X_val, y_val = dataset.matrix("val")
    y_pred = model.logits_array(X_val).argmax(axis=1)
    bundle = evaluate_predictions(y_val, y_pred)
    summary = {"arch": arch,
               "checkpoint": str(checkpoint_path),
               "val_macro_f1": bundle.macro_f1,
               "val_accuracy": bundle.accuracy,
               "best_epoch": history.best_epoch(),
               "epochs_run": len(history)}
    summary_path = _write_json(stage / "summary.json", summary)

    manifest = RunManifest(command=command, config_hash=config_hash(config),
                           version=__version__, started_at=RunManifest.now())
    manifest.add_files([checkpoint_path, history_path, summary_path])
    manifest.write(stage / "run.manifest.json")
    return summary


def cmd_train(args):
    config = load_config(args.config)
    beats_path = args.beats or config.beats_csv
    if beats_path is None:
        raise ConfigError("train needs beat data: pass --beats or set "
                          "beats_csv in the config")
    dataset = read_beats_csv(beats_path)
    archs = list(ARCHS) if args.arch == "all" else [args.arch]
    command = "ecgkit " + " ".join(getattr(args, "_argv", []))
    _pool_map(lambda arch: _train_one_arch(config, dataset, arch, command),
              archs)


def _report_run(out_dir, manifest, model=None, X=None, y=None,
                logits=None, seed=17, n_resamples=1000, gradcam_count=0,
                ensemble=None):
    probabilities = softmax_rows(logits)
    y_pred = predict_classes(logits)
    bundle, matrix, curves, cis = _evaluate_arrays(y, y_pred, probabilities,
                                                   seed, n_resamples)
    saliency = None
    if gradcam_count and model is not None:
        saliency = _saliency_for(model, X, y_pred, gradcam_count)
    written = render_report(out_dir, metrics=bundle, matrix=matrix,
                            curves=curves, cis=cis, saliency=saliency,
                            ensemble=ensemble)
    manifest.add_files(written)
    return written


def cmd_evaluate(args):
    manifest = _manifest_for(args, {
        "checkpoint": str(args.checkpoint), "test": str(args.test),
        "split": args.split, "seed": args.seed,
        "resamples": args.resamples, "gradcam": args.gradcam,
        "out": str(args.out)})
    model = load_checkpoint(args.checkpoint)
    dataset = read_beats_csv(args.test)
    X, y = _select_rows(dataset, args.split)
    logits = model.logits_array(X)
    out = Path(args.out)
    _report_run(out, manifest, model=model, X=X, y=y, logits=logits,
                seed=args.seed, n_resamples=args.resamples,
                gradcam_count=args.gradcam)
    manifest.write(out / "run.manifest.json")


def _resolve_checkpoint(entry, manifest_path):
    path = Path(entry.checkpoint)
    if not path.is_absolute() and not path.exists():
        relative = Path(manifest_path).parent / path
        if relative.exists():
            return relative
    return path


def cmd_ensemble(args):
    manifest = _manifest_for(args, {
        "manifest": str(args.manifest), "strategy": args.strategy,
        "test": str(args.test), "seed": args.seed,
        "resamples": args.resamples, "out": str(args.out)})
    entries = load_manifest(args.manifest)
    dataset = read_beats_csv(args.test)
    X, y = _select_rows(dataset, "test")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logits_by_model = {}
    for entry in entries:
        model = load_checkpoint(_resolve_checkpoint(entry, args.manifest))
        logits_by_model[entry.model_id] = model.logits_array(X)
        path = write_logits_csv(out / f"logits_{entry.model_id}.csv",
                                logits_by_model[entry.model_id])
        manifest.add_files([path])

    spec = build_strategy([e.model_id for e in entries],
                          [e.val_macro_f1 for e in entries],
                          args.strategy)
    fused = fuse(LogitSet([logits_by_model[m] for m in spec.members]),
                 spec.weights)
    _report_run(out, manifest, y=y, logits=fused, seed=args.seed,
                n_resamples=args.resamples, ensemble=spec)
    manifest.write(out / "run.manifest.json")


def cmd_gradcam(args):
    manifest = _manifest_for(args, {
        "checkpoint": str(args.checkpoint), "in": str(args.in_path),
        "samples": args.samples, "target_class": args.target_class,
        "out": str(args.out)})
    model = load_checkpoint(args.checkpoint)
    dataset = read_beats_csv(args.in_path)
    X, _ = dataset.matrix()
    try:
        indices = [int(token) for token in args.samples.split(",") if token]
    except ValueError:
        raise ConfigError(f"--samples expects comma-separated row indices, "
                          f"got {args.samples!r}") from None
    if not indices:
        raise ConfigError("--samples named no rows")
    bad = [i for i in indices if not 0 <= i < len(X)]
    if bad:
        raise ConfigError(f"sample rows {bad} outside 0..{len(X) - 1}")

    saliency = {}
    for index in indices:
        if args.target_class is not None:
            target = args.target_class
        else:
            target = int(model.logits_array(X[index:index + 1]).argmax())
        saliency[str(index)] = grad_cam(model, X[index], target)
    out = Path(args.out)
    written = render_report(out, saliency=saliency)
    manifest.add_files(written)
    manifest.write(out / "run.manifest.json")


def cmd_reproduce(args):
    config = load_config(args.config)
    manifest = _manifest_for(args, config)
    out = Path(config.out_dir)
    master = config.seed

    # stage 1: beats from raw records, or a pre-segmented file
    if config.records_dir is not None:
        dataset = load_records_dir(config.records_dir, lead=config.lead,
                                   beat_len=config.beat_len)
        stratified_split(dataset, train_fraction=config.train_fraction,
                         seed=derive_seed(master, "ingest"))
        ingest_dir = out / "ingest"
        ingest_dir.mkdir(parents=True, exist_ok=True)
        beats_path = write_beats_csv(ingest_dir / "beats.csv", dataset)
        manifest.add_files([beats_path])
    elif config.beats_csv is not None:
        dataset = read_beats_csv(config.beats_csv)
    else:
        raise ConfigError("reproduce needs records_dir or beats_csv "
                          "in the config")

    # stage 2: class balance via per-class adversarial synthesis
    follows_beat_len = config.gan.noise_len == config.gan.beat_len
    gan_config = dataclasses.replace(
        config.gan, beat_len=_beat_length(dataset),
        noise_len=None if follows_beat_len else config.gan.noise_len)
    balanced = _augment_dataset(dataset, gan_config, config.gan.tau,
                                config.gan.balance_ratio,
                                derive_seed(master, "augment"))
    augment_dir = out / "augment"
    augment_dir.mkdir(parents=True, exist_ok=True)
    balanced = _normalized_sources(balanced)
    augmented_path = write_beats_csv(augment_dir / "beats_aug.csv", balanced)
    summary_path = _write_json(augment_dir / "beats_aug.summary.json",
                               balance_summary(dataset, balanced))
    manifest.add_files([augmented_path, summary_path])

    # stage 3: all four architectures, concurrently when allowed
    command = "ecgkit " + " ".join(getattr(args, "_argv", []))
    summaries = _pool_map(
        lambda arch: _train_one_arch(config, balanced, arch, command),
        list(ARCHS))

    # stage 4: fuse on held-out beats; a dedicated test file wins over
    # the validation split
    if config.test_csv is not None:
        X, y = _select_rows(read_beats_csv(config.test_csv), "test")
    else:
        X, y = _select_rows(balanced, "val")
    entries = [ManifestEntry(model_id=s["arch"], checkpoint=s["checkpoint"],
                             val_macro_f1=s["val_macro_f1"])
               for s in summaries]
    ensemble_dir = out / "ensemble"
    ensemble_dir.mkdir(parents=True, exist_ok=True)
    models_path = write_manifest(ensemble_dir / "models.json", entries)
    manifest.add_files([models_path])

    logits_by_model = {}
    ensemble_manifest = RunManifest(
        command=command, config_hash=config_hash(config),
        version=__version__, started_at=RunManifest.now())
    for entry in entries:
        model = load_checkpoint(entry.checkpoint)
        logits_by_model[entry.model_id] = model.logits_array(X)
        path = write_logits_csv(
            ensemble_dir / f"logits_{entry.model_id}.csv",
            logits_by_model[entry.model_id])
        ensemble_manifest.add_files([path])
    spec = build_strategy([e.model_id for e in entries],
                          [e.val_macro_f1 for e in entries], config.strategy)
    fused = fuse(LogitSet([logits_by_model[m] for m in spec.members]),
                 spec.weights)
    _report_run(ensemble_dir / "report", ensemble_manifest, y=y,
                logits=fused, seed=derive_seed(master, "ensemble"),
                ensemble=spec)
    ensemble_manifest.write(ensemble_dir / "run.manifest.json")

    # stage 5: per-model reports on the same split
    def evaluate_one(entry):
        stage = out / "evaluate" / entry.model_id
        model = load_checkpoint(entry.checkpoint)
        stage_manifest = RunManifest(
            command=command, config_hash=config_hash(config),
            version=__version__, started_at=RunManifest.now())
        _report_run(stage, stage_manifest, model=model, X=X, y=y,
                    logits=logits_by_model[entry.model_id],
                    seed=derive_seed(master, f"evaluate/{entry.model_id}"))
        stage_manifest.write(stage / "run.manifest.json")

    _pool_map(evaluate_one, entries)
    manifest.write(out / "reproduce.manifest.json")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="ecgkit",
        description="Heartbeat classification pipeline: ingest, augment, "
                    "train, ensemble, evaluate, explain.")
    parser.add_argument("--version", action="version",
                        version=f"ecgkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="segment WFDB records into a beat CSV")
    p.add_argument("--records-dir", required=True)
    p.add_argument("--lead", default=None)
    p.add_argument("--beat-len", type=int, default=187)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--train-fraction", type=float, default=0.85)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("augment",
                       help="balance minority classes with synthetic beats")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--balance-ratio", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=17)
    p.set_defaults(handler=cmd_augment)

    p = sub.add_parser("train", help="train one architecture, or all four")
    p.add_argument("--arch", required=True, choices=ARCHS + ("all",))
    p.add_argument("--config", required=True)
    p.add_argument("--beats", default=None,
                   help="beat CSV; overrides beats_csv from the config")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a beat file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--gradcam", type=int, default=0,
                   help="also explain the first N rows")
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--resamples", type=int, default=1000)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ensemble", help="fuse models from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", default="top2_weighted", choices=STRATEGIES)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--resamples", type=int, default=1000)
    p.set_defaults(handler=cmd_ensemble)

    p = sub.add_parser("gradcam", help="saliency maps for chosen beats")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--samples", default="0",
                   help="comma-separated row indices")
    p.add_argument("--target-class", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gradcam)

    p = sub.add_parser("reproduce",
                       help="run the whole pipeline from one config")
    p.add_argument("--config", required=True)
    p.add_argument("--all", action="store_true",
                   help="run every stage (the default; kept for scripts)")
    p.set_defaults(handler=cmd_reproduce)
    return parser


def run(argv):
    """Dispatch one invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    args._argv = list(argv)
    try:
        args.handler(args)
    except ConfigError as exc:
        print(f"ecgkit: config error: {exc}", file=sys.stderr)
        return 3
    except EcgkitError as exc:
        print(f"ecgkit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

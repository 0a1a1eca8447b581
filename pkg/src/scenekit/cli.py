"""
`scenekit` command line: extract, train, predict, fuse, report, inspect, synth and folds.

Exit status is 0 on success, 2 for configuration errors, 3 for data errors and 4 when some
clips failed while the others were processed.
"""

import sys
import typing
import logging
import pathlib
import argparse
import dataclasses
import numpy as np
from concurrent.futures import ThreadPoolExecutor
from scenekit.sugar import atomic_write, derive_seed
from scenekit.audio_io import ChannelError, WavError, read_wav
from scenekit.config import ConfigError, RunConfig, load_config
from scenekit.dsp import FeatureError, FeatureSequence, read_features, read_meta, write_features
from scenekit.gmm import GmmError
from scenekit.ivector import IVectorError
from scenekit.neural import ShapeError, TrainingDiverged, segment_sequence
from scenekit.synth import SynthError, SynthSpec, synthesize
from scenekit.diagnostics import (
    DiagnosticsError,
    activation_trace,
    conv_filter_spectrum,
    dense_weight_spectrum,
    feature_grid,
    savgol_smooth,
    write_grid,
)
from scenekit.evaluation import (
    CvReport,
    EvalReport,
    EvaluationError,
    FoldError,
    FoldPlan,
    Manifest,
    ManifestError,
    class_accuracy_table,
    confused_pairs,
    cv_run,
    evaluate,
    format_fold_plan,
    holdout_run,
    load_fold_plan,
    load_manifest,
    make_folds,
)
from scenekit.fusion import (
    FusionError,
    FusionSpec,
    ModelOutput,
    WeightMode,
    fuse,
    read_predictions,
    write_predictions,
)
from scenekit.pipeline import (
    NetworkModel,
    PipelineError,
    PipelineTrainer,
    TrainedPipeline,
    extract_features,
    fit_pipeline,
    load_pipeline,
    save_pipeline,
)

EXIT_OK: typing.Final = 0
EXIT_CONFIG: typing.Final = 2
EXIT_DATA: typing.Final = 3
EXIT_PARTIAL: typing.Final = 4

FEATURE_SUFFIX: typing.Final = ".skf"

DATA_ERRORS: typing.Final = (
    WavError,
    ChannelError,
    FeatureError,
    GmmError,
    IVectorError,
    ShapeError,
    TrainingDiverged,
    ManifestError,
    FoldError,
    EvaluationError,
    FusionError,
    PipelineError,
    DiagnosticsError,
    SynthError,
    OSError,
)

ANALYSES: typing.Final = (
    "weight_fft",
    "weight_fft_smooth",
    "conv_fft",
    "activation",
    "feature_grid",
)


class DataError(Exception):
    ...


def feature_path(feature_dir: pathlib.Path, clip: str) -> pathlib.Path:
    """Features mirror the manifest's relative layout under the feature directory."""
    relative = pathlib.Path(clip)
    if relative.is_absolute():
        relative = pathlib.Path(*relative.parts[1:])
    return feature_dir / relative.with_suffix(FEATURE_SUFFIX)


def load_feature_set(
    feature_dir: pathlib.Path, manifest: Manifest
) -> typing.Dict[str, FeatureSequence]:
    missing = [clip for clip in manifest.paths if not feature_path(feature_dir, clip).exists()]
    if missing:
        raise DataError(
            f"{len(missing)} clips have no features in {feature_dir}: {', '.join(missing[:5])}"
        )

    features = {clip: read_features(feature_path(feature_dir, clip)) for clip in manifest.paths}
    kinds = {seq.kind for seq in features.values()}
    if len(kinds) != 1:
        raise DataError(f"Mixed feature kinds in {feature_dir}: {sorted(k.name for k in kinds)}")
    return features


def cmd_extract(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    root = cfg.resolved_data_root() or args.manifest.parent
    config_hash = cfg.features.config_hash()

    def extract_one(clip: str) -> typing.Optional[str]:
        target = feature_path(args.output, clip)
        if not args.force and target.exists():
            if read_meta(target).get("config_hash") == config_hash:
                logging.debug(f"{clip}: up to date")
                return None
        try:
            seq = extract_features(read_wav(manifest.resolve(clip, root)), cfg.features)
            write_features(target, seq, dict(config_hash=config_hash, source=clip))
        except (WavError, ChannelError, FeatureError, OSError) as error:
            logging.warning(f"{clip}: {error}")
            return f"{clip}: {error}"
        return None

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        failures = [failure for failure in pool.map(extract_one, manifest.paths) if failure]

    done = len(manifest) - len(failures)
    logging.info(f"Extracted {cfg.features.kind.name} features for {done}/{len(manifest)} clips")
    if failures:
        for failure in failures:
            logging.error(f"Failed {failure}")
        return EXIT_PARTIAL if done else EXIT_DATA
    return EXIT_OK


def _fold_plan(manifest: Manifest, cfg: RunConfig) -> FoldPlan:
    if cfg.folds.fold_file is not None:
        return load_fold_plan(manifest, cfg.folds.fold_file)
    return make_folds(manifest, cfg.folds.k, cfg.seed)


def _pooled_report(cv: CvReport) -> EvalReport:
    """One confusion matrix over all held-out folds."""
    confusion = sum(result.report.confusion for result in cv.folds)
    return dataclasses.replace(cv.folds[0].report, confusion=confusion)


def _train_report(cv: CvReport, final: int, test_report: typing.Optional[EvalReport]) -> str:
    lines = [cv.summary(), ""]
    reports = {f"fold{result.fold + 1}": result.report for result in cv.folds}
    lines.append(class_accuracy_table(reports))
    for first, second, count in confused_pairs(_pooled_report(cv)):
        lines.append(f"confused: {first} <-> {second} ({count} clips)")
    if test_report is not None:
        lines += ["", f"Hold-out accuracy {100 * test_report.accuracy:.1f}%"]
        lines.append(test_report.format_table())
    lines.append(f"Final model trained on {final} clips")
    return "\n".join(lines) + "\n"


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    features = load_feature_set(args.features, manifest)
    feature_kind = next(iter(features.values())).kind
    frames = {clip: seq.frames for clip, seq in features.items()}

    plan = _fold_plan(manifest, cfg)
    trainer = PipelineTrainer(feature_kind=feature_kind, model=cfg.model, jobs=cfg.jobs)
    logging.info(f"Cross-validating {cfg.model.kind.name} on {feature_kind.name}, {plan.k} folds")
    cv = cv_run(manifest, plan, trainer, frames, cfg.seed, jobs=1)
    logging.info(cv.summary())

    test_report = None
    final_seed = derive_seed(cfg.seed, "final")
    if args.eval_manifest is not None:
        evaluation = load_manifest(args.eval_manifest)
        eval_features = load_feature_set(args.eval_features or args.features, evaluation)
        combined = {**frames, **{clip: seq.frames for clip, seq in eval_features.items()}}
        result = holdout_run(manifest, evaluation, trainer, combined, final_seed)
        pipeline, test_report = result.model, result.report
    else:
        pipeline = fit_pipeline(
            [frames[clip] for clip in manifest.paths],
            [label for _, label in manifest.entries],
            feature_kind,
            cfg.model,
            manifest.labels,
            final_seed,
            cfg.jobs,
        )

    pipeline = dataclasses.replace(pipeline, cv_accuracy=cv.mean)
    save_pipeline(args.output, pipeline)
    logging.info(f"Saved {cfg.model.kind.name} model to {args.output}")

    report = args.report or args.output.with_suffix(".report.txt")
    atomic_write(report, _train_report(cv, len(manifest), test_report))
    atomic_write(args.output.with_suffix(".config.yaml"), cfg.dump())

    if args.cv_predictions is not None:
        oof = cv.predictions
        write_predictions(
            args.cv_predictions,
            ModelOutput(
                model_id=args.output.stem,
                cv_accuracy=cv.mean,
                labels=manifest.labels,
                clip_ids=manifest.paths,
                probs=np.array([oof[clip] for clip in manifest.paths]),
            ),
        )
    return EXIT_OK


def predict_clips(
    pipeline: TrainedPipeline, features: typing.Mapping[str, FeatureSequence], model_id: str
) -> ModelOutput:
    clip_ids = list(features)
    rows = []
    for clip in clip_ids:
        seq = features[clip]
        if seq.kind != pipeline.feature_kind:
            raise PipelineError(
                f"{clip}: model expects {pipeline.feature_kind.name} features, got {seq.kind.name}"
            )
        rows.append(pipeline.predict_proba(seq.frames))
    return ModelOutput(
        model_id=model_id,
        cv_accuracy=pipeline.cv_accuracy,
        labels=pipeline.labels,
        clip_ids=clip_ids,
        probs=np.array(rows).reshape(len(clip_ids), len(pipeline.labels)),
    )


def cmd_predict(args: argparse.Namespace, cfg: RunConfig) -> int:
    pipeline = load_pipeline(args.model)
    manifest = load_manifest(args.manifest)
    features = load_feature_set(args.features, manifest)
    output = predict_clips(pipeline, features, args.model_id or args.model.stem)
    write_predictions(args.output, output)
    logging.info(f"Wrote {len(output.clip_ids)} predictions to {args.output}")
    return EXIT_OK


def cmd_fuse(args: argparse.Namespace, cfg: RunConfig) -> int:
    outputs = [read_predictions(path) for path in args.predictions]
    spec = FusionSpec(
        threshold=args.threshold,
        weight_mode=WeightMode(args.weights),
        bag_count=args.bags,
        bag_fraction=args.bag_fraction,
        seed=cfg.seed,
    )
    fused = fuse(outputs, spec)
    write_predictions(args.output, dataclasses.replace(fused, model_id=args.model_id))
    logging.info(f"Fused {len(outputs)} prediction files into {args.output}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    reports = {}
    for path in args.predictions:
        output = read_predictions(path)
        truth = Manifest(entries=manifest.entries, labels=output.labels)
        reports[output.model_id] = evaluate(output.as_dict(), truth)

    if len(reports) == 1:
        report = next(iter(reports.values()))
        print(report.format_table(), end="")
        for first, second, count in confused_pairs(report, args.confused):
            print(f"confused: {first} <-> {second} ({count} clips)")
    else:
        print(class_accuracy_table(reports, args.delimiter), end="")
    return EXIT_OK


def _network(pipeline: TrainedPipeline) -> NetworkModel:
    if not isinstance(pipeline.model, NetworkModel):
        raise DiagnosticsError(f"A {pipeline.model_kind.name} model has no network weights")
    return pipeline.model


def cmd_inspect(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.analysis == "feature_grid":
        if args.features is None:
            raise ConfigError("feature_grid needs --features")
        grid = feature_grid(read_features(args.features).frames, args.start, args.count)
        write_grid(args.output, grid, args.delimiter)
        return EXIT_OK

    if args.model is None:
        raise ConfigError(f"{args.analysis} needs --model")
    pipeline = load_pipeline(args.model)
    network = _network(pipeline)

    if args.analysis == "weight_fft":
        grid = dense_weight_spectrum(network.spec, network.params, args.layer)
    elif args.analysis == "weight_fft_smooth":
        spectrum = dense_weight_spectrum(network.spec, network.params, args.layer)
        grid = savgol_smooth(spectrum, args.window, args.order)
    elif args.analysis == "conv_fft":
        grid = conv_filter_spectrum(network.spec, network.params, args.layer)
    else:
        if args.features is None:
            raise ConfigError("activation needs --features")
        frames = pipeline.standardizer.apply(read_features(args.features).frames)
        sequence = segment_sequence(frames, args.count)[0]
        grid = activation_trace(network.spec, network.params, sequence, args.layer)

    write_grid(args.output, grid, args.delimiter)
    logging.info(f"Wrote {args.analysis} grid {grid.shape} to {args.output}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    spec = SynthSpec(
        classes=args.classes,
        clips_per_class=args.clips,
        duration=args.duration,
        sample_rate=args.sample_rate,
        channels=args.channels,
        seed=cfg.seed,
    )
    manifest = synthesize(spec, args.output)
    logging.info(f"Synthesized {len(manifest)} clips in {args.output}")
    return EXIT_OK


def cmd_folds(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    plan = _fold_plan(manifest, cfg)
    atomic_write(args.output, format_fold_plan(manifest, plan))
    logging.info(f"Wrote a {plan.k}-fold plan for {len(manifest)} clips to {args.output}")
    return EXIT_OK


COMMANDS: typing.Final = dict(
    extract=cmd_extract,
    train=cmd_train,
    predict=cmd_predict,
    fuse=cmd_fuse,
    report=cmd_report,
    inspect=cmd_inspect,
    synth=cmd_synth,
    folds=cmd_folds,
)


def _parse_args(argv: typing.Optional[typing.Sequence[str]] = None) -> argparse.Namespace:
    # fuse takes all of its settings from flags
    flags_only = argparse.ArgumentParser(add_help=False)
    flags_only.add_argument("--seed", type=int)
    flags_only.add_argument("--jobs", type=int, help="worker threads")
    flags_only.add_argument("--data-root", help="base directory for relative manifest paths")
    flags_only.add_argument("--verbose", "-v", action="store_true")
    common = argparse.ArgumentParser(add_help=False, parents=[flags_only])
    common.add_argument("--config", type=pathlib.Path, help="YAML run configuration")

    parser = argparse.ArgumentParser(
        prog="scenekit", description="Acoustic scene classification toolkit."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    extract = commands.add_parser("extract", parents=[common], help="audio -> feature files")
    extract.add_argument("manifest", type=pathlib.Path)
    extract.add_argument("output", type=pathlib.Path, help="feature directory")
    extract.add_argument("--kind", help="feature kind, e.g. mfcc61 or logmel60")
    extract.add_argument("--win-len", type=float)
    extract.add_argument("--hop", type=float)
    extract.add_argument("--n-fft", type=int)
    extract.add_argument("--view", choices=("left", "right", "mid", "diff"))
    extract.add_argument("--force", action="store_true", help="recompute up-to-date clips")

    train = commands.add_parser("train", parents=[common], help="cross-validate and fit a model")
    train.add_argument("features", type=pathlib.Path, help="feature directory")
    train.add_argument("manifest", type=pathlib.Path)
    train.add_argument("output", type=pathlib.Path, help="model file")
    train.add_argument("--model", dest="model_kind", help="gmm, ivector, dnn, rnn or cnn")
    train.add_argument("--components", type=int)
    train.add_argument("--rank", type=int)
    train.add_argument("--dense-units", type=int)
    train.add_argument("--dense-layers", type=int)
    train.add_argument("--rnn-units", type=int)
    train.add_argument("--dropout", type=float)
    train.add_argument("--optimizer")
    train.add_argument("--lr", type=float)
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--folds", type=int, help="number of stratified folds")
    train.add_argument("--fold-file", help="official fold listing")
    train.add_argument("--report", type=pathlib.Path)
    train.add_argument("--cv-predictions", type=pathlib.Path, help="out-of-fold predictions")
    train.add_argument("--eval-manifest", type=pathlib.Path, help="separate evaluation clips")
    train.add_argument("--eval-features", type=pathlib.Path)

    predict = commands.add_parser("predict", parents=[common], help="score clips with a model")
    predict.add_argument("model", type=pathlib.Path)
    predict.add_argument("features", type=pathlib.Path)
    predict.add_argument("manifest", type=pathlib.Path)
    predict.add_argument("output", type=pathlib.Path)
    predict.add_argument("--model-id")

    fusion = commands.add_parser("fuse", parents=[flags_only], help="late fusion of predictions")
    fusion.set_defaults(config=None)
    fusion.add_argument("output", type=pathlib.Path)
    fusion.add_argument("predictions", type=pathlib.Path, nargs="+")
    fusion.add_argument("--threshold", type=float, default=0.0)
    fusion.add_argument("--weights", choices=[mode.value for mode in WeightMode], default="uniform")
    fusion.add_argument("--bags", type=int, default=1)
    fusion.add_argument("--bag-fraction", type=float, default=1.0)
    fusion.add_argument("--model-id", default="fused")

    report = commands.add_parser("report", parents=[common], help="accuracy tables")
    report.add_argument("manifest", type=pathlib.Path)
    report.add_argument("predictions", type=pathlib.Path, nargs="+")
    report.add_argument("--confused", type=int, default=5, help="most confused pairs to list")
    report.add_argument("--delimiter", help="delimiter-separated table instead of aligned text")

    inspect = commands.add_parser("inspect", parents=[common], help="export model diagnostics")
    inspect.add_argument("analysis", choices=ANALYSES)
    inspect.add_argument("output", type=pathlib.Path)
    inspect.add_argument("--model", type=pathlib.Path)
    inspect.add_argument("--features", type=pathlib.Path, help="feature file")
    inspect.add_argument("--layer", type=int)
    inspect.add_argument("--start", type=int, default=0)
    inspect.add_argument("--count", type=int, default=100, help="frames to export or trace")
    inspect.add_argument("--window", type=int, default=9)
    inspect.add_argument("--order", type=int, default=3)
    inspect.add_argument("--delimiter", default=",")

    synth = commands.add_parser("synth", parents=[common], help="synthetic scene dataset")
    synth.add_argument("output", type=pathlib.Path)
    synth.add_argument("--classes", type=int, default=5)
    synth.add_argument("--clips", type=int, default=20, help="clips per class")
    synth.add_argument("--duration", type=float, default=5.0)
    synth.add_argument("--sample-rate", type=int, default=16000)
    synth.add_argument("--channels", type=int, default=1)

    folds = commands.add_parser("folds", parents=[common], help="write a stratified fold plan")
    folds.add_argument("manifest", type=pathlib.Path)
    folds.add_argument("output", type=pathlib.Path)
    folds.add_argument("--k", type=int)

    return parser.parse_args(argv)


def _run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    features = model = folds = None

    if args.command == "extract":
        features = dict(
            kind=args.kind, win_len=args.win_len, hop=args.hop, n_fft=args.n_fft, view=args.view
        )
    if args.command == "train":
        model = dict(
            kind=args.model_kind,
            components=args.components,
            rank=args.rank,
            dense_units=args.dense_units,
            dense_layers=args.dense_layers,
            rnn_units=args.rnn_units,
            dropout=args.dropout,
            optimizer=args.optimizer,
            lr=args.lr,
            epochs=args.epochs,
            batch_size=args.batch_size,
        )
        folds = dict(k=args.folds, fold_file=args.fold_file)
    if args.command == "folds":
        folds = dict(k=args.k)

    return cfg.with_overrides(
        features=features,
        model=model,
        folds=folds,
        seed=args.seed,
        jobs=args.jobs,
        data_root=args.data_root,
    )


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )

    try:
        cfg = _run_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as error:
        logging.error(f"Configuration error: {error}")
        return EXIT_CONFIG
    except (DataError, *DATA_ERRORS) as error:
        logging.error(f"{type(error).__name__}: {error}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from wenets import corpus, nawenet, trainkit
from wenets import tensor_nn as nn
from wenets.dsp_io import (
    SEGMENT_LENGTH,
    fixed_windows,
    extract_segments,
    invert_phase,
    load_wav,
    normalize_to_level,
    write_segments,
    write_wav,
)
from wenets.errors import (
    AudioFormatError,
    ConfigError,
    ManifestError,
    MissingTargetError,
    ModelFileError,
    NumericalError,
    ShapeError,
    SilentSignalError,
)
from wenets.settings import ROOT_DIR, load_config, outputs_dir, resolve_seed, training_section

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger("wenets.cli")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise UsageError(f"{self.prog}: {message}")


@dataclasses.dataclass(frozen=True)
class RunContext:
    config: dict
    seed: int
    precision: str
    deterministic: bool

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


def network_config(config: dict, tiny: bool) -> nawenet.NetworkConfig:
    network = config["network"]
    if tiny:
        scales = network["tiny"]
        return nawenet.tiny_variant_config(
            scales["width_scale"],
            scales["length_scale"],
            scales.get("dropout_p", network["dropout_p"]),
            network["bn_between_convs"],
        )
    return nawenet.canonical_config(network["dropout_p"], network["bn_between_convs"])


def _print_frame(frame: pd.DataFrame) -> None:
    frame.to_csv(sys.stdout, index=False)


def _read_target_csv(path: Path) -> dict[str, dict[str, float]]:
    """External targets keyed by source file name (with or without extension)."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ManifestError(f"malformed target CSV {path}: {exc}") from exc
    if "source" not in frame.columns:
        raise ManifestError(f"target CSV {path} needs a 'source' column")
    targets = {}
    for row in frame.to_dict("records"):
        values = {
            metric: float(row[metric])
            for metric in corpus.METRICS
            if metric in row and not pd.isna(row[metric])
        }
        targets[str(row["source"])] = values
    return targets


# ---------------------------------------------------------------- commands


def cmd_prepare(args: argparse.Namespace, ctx: RunContext) -> int:
    audio = ctx.config["audio"]
    input_dir = Path(args.inputs)
    if not input_dir.is_dir():
        raise ManifestError(f"input directory not found: {input_dir}")
    min_activity = args.min_activity if args.min_activity is not None else audio["min_activity"]
    passes = args.passes if args.passes is not None else audio["passes"]
    dataset = args.dataset or input_dir.name
    external = _read_target_csv(Path(args.target_csv)) if args.target_csv else {}
    rng = np.random.default_rng(ctx.seed)

    segments = []
    entries = []
    for wav_path in sorted(input_dir.glob("*.wav")):
        try:
            normalized = normalize_to_level(load_wav(wav_path), audio["target_db"])
        except (AudioFormatError, SilentSignalError) as exc:
            logger.warning("Skipping %s: %s", wav_path.name, exc)
            continue
        found = extract_segments(
            normalized.clip, min_activity, passes, rng, normalized.gain_db, audio["max_offset_ms"]
        )
        targets = external.get(wav_path.name, external.get(wav_path.stem, {}))
        for segment in found:
            entries.append(corpus.ManifestEntry(str(args.store), len(segments), dataset, **targets))
            segments.append(segment)
        logger.info("%s: %d segments.", wav_path.name, len(found))

    if not segments:
        raise ManifestError("no segments")
    write_segments(args.store, segments)
    corpus.write_manifest(args.manifest, entries)
    mean_activity = float(np.mean([segment.activity_factor for segment in segments]))
    print(f"segments={len(segments)} mean_activity={mean_activity:.4f}")
    return EXIT_OK


def cmd_split(args: argparse.Namespace, ctx: RunContext) -> int:
    entries = corpus.read_manifest(args.manifest)
    try:
        fractions = tuple(float(part) for part in args.fractions.split(","))
    except ValueError as exc:
        raise UsageError(f"--fractions must be comma-separated numbers: {args.fractions}") from exc
    assignment = corpus.split(entries, fractions, seed=ctx.seed, holdout=args.holdout)

    if args.ipa:
        if not args.out_manifest or not args.out_store:
            raise UsageError("--ipa needs --out-manifest and --out-store")
        augmented, assignment = corpus.augment_manifest(entries, assignment)
        loader = corpus.SegmentLoader()
        originals = [loader.segment(entry) for entry in entries]
        loader.close()
        write_segments(args.out_store, [*originals, *(invert_phase(segment) for segment in originals)])
        relocated = [
            dataclasses.replace(entry, segment_path=str(args.out_store), record_index=index)
            for index, entry in enumerate(augmented)
        ]
        corpus.write_manifest(args.out_manifest, relocated)

    corpus.write_split(args.out, assignment)
    counts = assignment.counts()
    print(" ".join(f"{label}={counts[label]}" for label in corpus.SPLIT_LABELS))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, ctx: RunContext) -> int:
    entries = corpus.read_manifest(args.manifest)
    assignment = corpus.read_split(args.split, len(entries))
    train_ids = assignment.ids("train")
    val_ids = assignment.ids(args.validation_set)
    mapper = corpus.fit_mapper(args.metric, [entries[entry_id] for entry_id in train_ids])

    train_config = trainkit.TrainConfig.from_settings(
        training_section(ctx.config, args.tiny), ctx.seed, ctx.precision, ctx.deterministic
    )
    model = nawenet.build(
        network_config(ctx.config, args.tiny),
        np.random.default_rng(ctx.seed),
        args.metric,
        mapper,
        train_config.dtype,
        ctx.seed,
    )
    result = trainkit.train(model, entries, train_ids, val_ids, train_config)

    out = Path(args.out) if args.out else outputs_dir(ctx.config) / f"{args.metric}.wenet"
    log_path = Path(args.log) if args.log else out.with_suffix(".epochs.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    nawenet.save(result.model, out)
    trainkit.write_epoch_logs(log_path, result.logs, ctx.deterministic)
    last = result.logs[-1]
    print(f"epochs={len(result.logs)} val_rmse={last.val_rmse:.6f} val_rho={last.val_rho:.6f} model={out}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, ctx: RunContext) -> int:
    model = nawenet.load(args.model)
    entries = corpus.read_manifest(args.manifest)
    if args.split:
        ids = corpus.read_split(args.split, len(entries)).ids(args.subset)
    else:
        ids = list(range(len(entries)))
    report = trainkit.evaluate(model, entries, ids)
    out_dir = Path(args.out_dir) if args.out_dir else outputs_dir(ctx.config) / "evaluation"
    trainkit.write_report(report, out_dir, ctx.config.get("evaluation", {}).get("histogram_bins", 20))
    _print_frame(report.metrics_frame())
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, ctx: RunContext) -> int:
    model = nawenet.load(args.model)
    low, high = corpus.METRIC_RANGES[model.target_metric]
    rows = []
    failures = 0
    for wav in args.wavs:
        try:
            clip = load_wav(wav)
            if len(clip.samples) < SEGMENT_LENGTH:
                raise AudioFormatError(f"file shorter than 3 s: {clip.duration:.2f} s")
            normalized = normalize_to_level(clip, ctx.config["audio"]["target_db"])
            windows = np.stack([segment.samples for segment in fixed_windows(normalized.clip)])
            scores = np.clip(trainkit.predict_samples(model, windows), low, high)
        except (AudioFormatError, SilentSignalError, OSError) as exc:
            logger.error("Cannot score %s: %s", wav, exc)
            rows.append({"file": wav, "segment": "", "score": None, "error": str(exc)})
            failures += 1
            continue
        rows.extend({"file": wav, "segment": index, "score": float(score), "error": ""} for index, score in enumerate(scores))
        rows.append({"file": wav, "segment": "mean", "score": float(np.mean(scores)), "error": ""})

    _print_frame(pd.DataFrame(rows, columns=["file", "segment", "score", "error"]))
    return EXIT_DATA if args.wavs and failures == len(args.wavs) else EXIT_OK


def cmd_inspect(args: argparse.Namespace, ctx: RunContext) -> int:
    if args.arch:
        config = network_config(ctx.config, args.tiny)
        counts = nawenet.config_param_count(config)
    elif args.model:
        model = nawenet.load(args.model)
        config = model.config
        counts = nawenet.count_params(model)
    else:
        raise UsageError("inspect needs a model file or --arch")

    _print_frame(pd.DataFrame(nawenet.shape_trace(config)))
    print()
    _print_frame(pd.DataFrame(counts.rows, columns=["layer", "kind", "params"]))
    print()
    print(f"conv_extractor,{counts.conv_extractor}")
    print(f"l1,{counts.layer('l1')}")
    print(f"total,{counts.total}")
    return EXIT_OK


def _layer_cases(rng: np.random.Generator) -> dict[str, tuple[nn.Layer, np.ndarray]]:
    f64 = np.float64
    batchnorm = nn.BatchNormLayer.initialized(3, f64)
    batchnorm.gamma[...] = rng.uniform(0.5, 1.5, 3)
    batchnorm.beta[...] = rng.standard_normal(3)
    flat_batchnorm = nn.BatchNormLayer.initialized(5, f64)
    prelu = nn.PReLULayer(rng.uniform(0.1, 0.4, 3))
    return {
        "conv": (nn.ConvLayer.initialized(3, 4, 5, rng, f64), rng.standard_normal((2, 3, 12))),
        "conv_even": (nn.ConvLayer.initialized(2, 3, 4, rng, f64), rng.standard_normal((2, 2, 10))),
        "batchnorm": (batchnorm, rng.standard_normal((4, 3, 6))),
        "batchnorm_dense": (flat_batchnorm, rng.standard_normal((6, 5))),
        "prelu": (prelu, rng.standard_normal((2, 3, 8))),
        "avgpool": (nn.AvgPool(4), rng.standard_normal((2, 3, 12))),
        "maxpool": (nn.MaxPool(3), rng.standard_normal((2, 3, 12))),
        "dense": (nn.DenseLayer.initialized(6, 4, rng, f64), rng.standard_normal((3, 6))),
        "dropout": (nn.Dropout(0.5), rng.standard_normal((3, 6))),
    }


def cmd_gradcheck(args: argparse.Namespace, ctx: RunContext) -> int:
    rng = np.random.default_rng(ctx.seed)
    rows = []
    for case, (layer, x) in _layer_cases(rng).items():
        report = nn.check_layer(layer, x, "train", args.tolerance, ctx.seed, corrupt=args.inject_fault and case == "conv")
        rows.extend({"group": f"{case}.{name}", "max_rel_error": error, "passed": ok} for name, error, ok in report.rows())

    if args.tiny:
        model = nawenet.build(nawenet.gradcheck_config(), rng, dtype=np.float64)
        batch = rng.standard_normal((4, 1, model.config.input_length))
        report = nawenet.check_network(
            model, batch, args.tolerance, args.max_entries, ctx.seed, "l1.weights" if args.inject_fault else None
        )
        rows.extend({"group": f"network.{name}", "max_rel_error": error, "passed": ok} for name, error, ok in report.rows())

    frame = pd.DataFrame(rows, columns=["group", "max_rel_error", "passed"])
    _print_frame(frame)
    worst = float(frame["max_rel_error"].max())
    print(f"max_rel_error={worst:.3e} tolerance={args.tolerance:g}")
    if not frame["passed"].all():
        logger.error("Gradient check failed for %d groups.", int((~frame["passed"]).sum()))
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, ctx: RunContext) -> int:
    rng = np.random.default_rng(ctx.seed)
    entries = corpus.synth_fixture(rng, args.n, args.store, args.manifest, args.datasets)
    if args.wav_dir:
        wav_dir = Path(args.wav_dir)
        wav_dir.mkdir(parents=True, exist_ok=True)
        loader = corpus.SegmentLoader()
        for index, entry in enumerate(entries):
            write_wav(wav_dir / f"synth-{index:05d}.wav", loader.samples(entry))
    print(f"segments={len(entries)} store={args.store} manifest={args.manifest}")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace, ctx: RunContext) -> int:
    entries = corpus.read_manifest(args.manifest)
    summary, histogram = corpus.target_summary(entries, args.bins or ctx.config.get("evaluation", {}).get("histogram_bins", 20))
    if args.histogram:
        histogram.to_csv(args.histogram, index=False)
    _print_frame(summary)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wenets", description="No-reference speech quality estimation with NAWEnet.")
    parser.add_argument("--seed", type=int, default=None, help="random seed (default: config or WENETS_SEED)")
    parser.add_argument("--precision", choices=["f32", "f64"], default=None)
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--config", type=Path, default=None, help="YAML config (default: config.yaml)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-q", "--quiet", action="store_true")
    verbosity.add_argument("-v", "--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    prepare = commands.add_parser("prepare", help="mine 3 s segments from a directory of WAV files")
    prepare.add_argument("inputs")
    prepare.add_argument("--store", required=True, type=Path)
    prepare.add_argument("--manifest", required=True, type=Path)
    prepare.add_argument("--min-activity", type=float, default=None)
    prepare.add_argument("--passes", type=int, default=None)
    prepare.add_argument("--target-csv", default=None)
    prepare.add_argument("--dataset", default=None, help="source dataset id (default: input folder name)")
    prepare.set_defaults(handler=cmd_prepare)

    split = commands.add_parser("split", help="assign train/test/validation labels")
    split.add_argument("manifest")
    split.add_argument("--out", required=True, type=Path)
    split.add_argument("--fractions", default="0.5,0.4,0.1")
    split.add_argument("--holdout", action="append", default=[], metavar="DATASET")
    split.add_argument("--ipa", action="store_true", help="append phase-inverted twins")
    split.add_argument("--out-manifest", type=Path, default=None)
    split.add_argument("--out-store", type=Path, default=None)
    split.set_defaults(handler=cmd_split)

    train = commands.add_parser("train", help="train a model for one target metric")
    train.add_argument("manifest")
    train.add_argument("split")
    train.add_argument("--metric", choices=corpus.METRICS, default="pesq")
    train.add_argument("--out", default=None)
    train.add_argument("--log", default=None)
    train.add_argument("--tiny", action="store_true", help="train the reduced-width variant")
    train.add_argument("--validation-set", choices=corpus.SPLIT_LABELS, default="validation")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("evaluate", help="correlation and RMSE per dataset")
    evaluate.add_argument("model")
    evaluate.add_argument("manifest")
    evaluate.add_argument("split", nargs="?", default=None)
    evaluate.add_argument("--set", dest="subset", choices=corpus.SPLIT_LABELS, default="test")
    evaluate.add_argument("--out-dir", default=None)
    evaluate.set_defaults(handler=cmd_evaluate)

    predict = commands.add_parser("predict", help="score WAV files")
    predict.add_argument("model")
    predict.add_argument("wavs", nargs="+")
    predict.set_defaults(handler=cmd_predict)

    inspect = commands.add_parser("inspect", help="shape trace and parameter counts")
    inspect.add_argument("model", nargs="?", default=None)
    inspect.add_argument("--arch", action="store_true", help="describe the configured topology without a model")
    inspect.add_argument("--tiny", action="store_true")
    inspect.set_defaults(handler=cmd_inspect)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient check in 64-bit mode")
    gradcheck.add_argument("--tiny", action=argparse.BooleanOptionalAction, default=True)
    gradcheck.add_argument("--tolerance", type=float, default=1e-4)
    gradcheck.add_argument("--max-entries", type=int, default=12)
    gradcheck.add_argument("--inject-fault", action="store_true", help="flip analytic gradients (negative control)")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    synth = commands.add_parser("synth", help="write a synthetic fixture store and manifest")
    synth.add_argument("--n", type=int, default=32)
    synth.add_argument("--store", required=True, type=Path)
    synth.add_argument("--manifest", required=True, type=Path)
    synth.add_argument("--datasets", type=int, default=2)
    synth.add_argument("--wav-dir", default=None)
    synth.set_defaults(handler=cmd_synth)

    stats = commands.add_parser("stats", help="target summary and histogram of a manifest")
    stats.add_argument("manifest")
    stats.add_argument("--bins", type=int, default=None)
    stats.add_argument("--histogram", default=None)
    stats.set_defaults(handler=cmd_stats)
    return parser


def _context(args: argparse.Namespace) -> RunContext:
    config = load_config(args.config, args.overrides)
    deterministic = config["deterministic"] if args.deterministic is None else args.deterministic
    return RunContext(
        config=config,
        seed=resolve_seed(args.seed, config),
        precision=args.precision or config["precision"],
        deterministic=deterministic,
    )


def main(argv: list[str] | None = None) -> int:
    load_dotenv(ROOT_DIR / ".env")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE

    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)

    try:
        ctx = _context(args)
        nn.configure_execution(ctx.deterministic, 1 if ctx.deterministic else (os.cpu_count() or 1))
        return args.handler(args, ctx)
    except (UsageError, ConfigError, ShapeError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (AudioFormatError, SilentSignalError, ManifestError, MissingTargetError, ModelFileError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

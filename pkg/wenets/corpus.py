"""Manifests, dataset splits, inverse-phase augmentation, target mapping and batching."""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Literal, Sequence

import numpy as np
import pandas as pd

from wenets.dsp_io import (
    SAMPLE_RATE,
    SEGMENT_LENGTH,
    AudioClip,
    Segment,
    SegmentStore,
    measure_activity,
    normalize_to_level,
    write_segments,
)
from wenets.errors import AudioFormatError, ConfigError, ManifestError, MissingTargetError
from wenets.settings import check_against_schema

METRICS = ("pesq", "polqa", "stoi")
METRIC_RANGES = {"pesq": (1.0, 4.5), "polqa": (1.0, 4.5), "stoi": (0.0, 1.0)}
MANIFEST_COLUMNS = ["segment_path", "record_index", "source_dataset", *METRICS]
SPLIT_LABELS = ("train", "test", "validation")
DEFAULT_FRACTIONS = (0.5, 0.4, 0.1)
DEFAULT_BATCH_SIZE = 55

AFFINE_CENTER = 2.75
AFFINE_SPREAD = 1.75

SYNTH_SNR_RANGE_DB = (-5.0, 40.0)
SYNTH_F0_RANGE_HZ = (100.0, 300.0)
SYNTH_SYLLABLE_RANGE_HZ = (2.0, 8.0)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    segment_path: str
    record_index: int
    source_dataset: str
    pesq: float | None = None
    polqa: float | None = None
    stoi: float | None = None
    phase_inverted: bool = False

    def __post_init__(self) -> None:
        check_against_schema(self.to_row(), "manifest_entry.schema.json", ManifestError)

    def target(self, metric: str) -> float:
        if metric not in METRICS:
            raise ConfigError(f"unknown target metric: {metric}")
        value = getattr(self, metric)
        if value is None:
            raise MissingTargetError(
                f"missing {metric} target for {self.segment_path}#{self.record_index}"
            )
        return value

    def has_target(self, metric: str) -> bool:
        return getattr(self, metric) is not None

    def to_row(self) -> dict:
        return {
            "segment_path": self.segment_path,
            "record_index": self.record_index,
            "source_dataset": self.source_dataset,
            "pesq": self.pesq,
            "polqa": self.polqa,
            "stoi": self.stoi,
            "phase_inverted": self.phase_inverted,
        }


def _optional_float(value) -> float | None:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return float(value)


def read_manifest(path: Path | str) -> list[ManifestEntry]:
    """Load a manifest CSV; relative store paths resolve against the manifest's folder."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"segment_path": str, "source_dataset": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ManifestError(f"malformed manifest {path.name}: {exc}") from exc

    missing = [column for column in MANIFEST_COLUMNS[:3] if column not in frame.columns]
    if missing:
        raise ManifestError(f"malformed manifest {path.name}: missing column {', '.join(missing)}")

    entries = []
    for row_number, row in enumerate(frame.to_dict("records")):
        segment_path = Path(row["segment_path"])
        if not segment_path.is_absolute():
            segment_path = path.parent / segment_path
        try:
            entries.append(
                ManifestEntry(
                    segment_path=str(segment_path),
                    record_index=int(row["record_index"]),
                    source_dataset=str(row["source_dataset"]),
                    **{metric: _optional_float(row.get(metric)) for metric in METRICS},
                    phase_inverted=bool(row.get("phase_inverted", False)),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest {path.name}, row {row_number}: {exc}") from exc
    return entries


def write_manifest(path: Path | str, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    rows = []
    for entry in entries:
        row = entry.to_row()
        row["segment_path"] = os.path.relpath(entry.segment_path, path.parent)
        rows.append(row)
    columns = list(MANIFEST_COLUMNS)
    if any(entry.phase_inverted for entry in entries):
        columns.append("phase_inverted")
    pd.DataFrame(rows, columns=[*MANIFEST_COLUMNS, "phase_inverted"])[columns].to_csv(path, index=False)


def concat_manifests(*manifests: Sequence[ManifestEntry]) -> list[ManifestEntry]:
    """Join manifests prepared in separate runs; a segment may appear only once."""
    merged: list[ManifestEntry] = []
    seen = set()
    for manifest in manifests:
        for entry in manifest:
            key = (os.path.abspath(entry.segment_path), entry.record_index, entry.phase_inverted)
            if key in seen:
                raise ManifestError(f"duplicate manifest entry {entry.segment_path}#{entry.record_index}")
            seen.add(key)
            merged.append(entry)
    return merged


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitAssignment:
    labels: tuple[str, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        unknown = set(self.labels) - set(SPLIT_LABELS)
        if unknown:
            raise ManifestError(f"unknown split label: {sorted(unknown)[0]}")

    def ids(self, label: str) -> list[int]:
        if label not in SPLIT_LABELS:
            raise ConfigError(f"unknown split label: {label}")
        return [entry_id for entry_id, value in enumerate(self.labels) if value == label]

    def counts(self) -> dict[str, int]:
        return {label: self.labels.count(label) for label in SPLIT_LABELS}


def _split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = math.floor(fractions[0] * n + 0.5)
    n_test = min(math.floor(fractions[1] * n + 0.5), n - n_train)
    return n_train, n_test, n - n_train - n_test


def split(
    entries: Sequence[ManifestEntry],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    rng: np.random.Generator | None = None,
    seed: int = 0,
    holdout: Iterable[str] = (),
) -> SplitAssignment:
    """Per source dataset, draw train then test then validation without replacement.

    Datasets named in `holdout` go to test in full. Datasets with fewer than
    three segments cannot fill all three splits and go to train.
    """
    if not entries:
        raise ManifestError("empty manifest")
    fractions = tuple(float(value) for value in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    holdout = set(holdout)

    by_dataset: dict[str, list[int]] = {}
    for entry_id, entry in enumerate(entries):
        by_dataset.setdefault(entry.source_dataset, []).append(entry_id)
    unknown = holdout - set(by_dataset)
    if unknown:
        raise ManifestError(f"hold-out dataset not in manifest: {sorted(unknown)[0]}")

    labels = [""] * len(entries)
    for dataset in sorted(by_dataset):
        ids = by_dataset[dataset]
        if dataset in holdout:
            for entry_id in ids:
                labels[entry_id] = "test"
            continue
        if len(ids) < 3:
            logger.warning("Dataset %s has %d segments; assigning all of them to train.", dataset, len(ids))
            for entry_id in ids:
                labels[entry_id] = "train"
            continue
        n_train, n_test, _ = _split_sizes(len(ids), fractions)
        order = rng.permutation(np.asarray(ids))
        for position, entry_id in enumerate(order):
            if position < n_train:
                labels[entry_id] = "train"
            elif position < n_train + n_test:
                labels[entry_id] = "test"
            else:
                labels[entry_id] = "validation"
    return SplitAssignment(tuple(labels), seed)


def write_split(path: Path | str, assignment: SplitAssignment) -> None:
    frame = pd.DataFrame(
        {
            "entry_id": range(len(assignment.labels)),
            "label": assignment.labels,
            "seed": assignment.seed,
        }
    )
    frame.to_csv(path, index=False)


def read_split(path: Path | str, n_entries: int | None = None) -> SplitAssignment:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ManifestError(f"malformed split file {path}: {exc}") from exc
    if list(frame.columns) != ["entry_id", "label", "seed"]:
        raise ManifestError(f"split file {path} must have columns entry_id,label,seed")
    frame = frame.sort_values("entry_id")
    if list(frame["entry_id"]) != list(range(len(frame))):
        raise ManifestError(f"split file {path} must list every entry id exactly once")
    if n_entries is not None and len(frame) != n_entries:
        raise ManifestError(f"split file covers {len(frame)} entries, manifest has {n_entries}")
    seed = int(frame["seed"].iloc[0]) if len(frame) else 0
    return SplitAssignment(tuple(str(label) for label in frame["label"]), seed)


# ---------------------------------------------------------------- IPA


def apply_ipa(entries: Sequence[ManifestEntry]) -> list[ManifestEntry]:
    """Append a phase-inverted twin of every entry; targets are unchanged."""
    already = [entry for entry in entries if entry.phase_inverted]
    if already:
        raise ManifestError(
            f"IPA already applied: {len(already)} entries are flagged phase_inverted"
        )
    return [*entries, *(dataclasses.replace(entry, phase_inverted=True) for entry in entries)]


def augment_manifest(
    entries: Sequence[ManifestEntry], assignment: SplitAssignment
) -> tuple[list[ManifestEntry], SplitAssignment]:
    """IPA over a split manifest: twin n+i keeps the split label of entry i."""
    if len(assignment.labels) != len(entries):
        raise ManifestError(f"split covers {len(assignment.labels)} entries, manifest has {len(entries)}")
    return apply_ipa(entries), SplitAssignment(assignment.labels * 2, assignment.seed)


# ---------------------------------------------------------------- target mapping


@dataclass(frozen=True)
class TargetMapper:
    """z = (y - center) / spread and its inverse."""

    kind: Literal["affine", "zscore"]
    center: float
    spread: float

    def __post_init__(self) -> None:
        if self.kind not in ("affine", "zscore"):
            raise ValueError(f"unknown mapping kind: {self.kind}")
        if not math.isfinite(self.center) or not math.isfinite(self.spread) or self.spread <= 0:
            raise ValueError(f"mapping needs a finite center and positive spread, got {self.center}, {self.spread}")

    @property
    def scale(self) -> float:
        return 1.0 / self.spread

    @property
    def shift(self) -> float:
        return -self.center

    def map(self, values):
        return (np.asarray(values, dtype=np.float64) - self.center) / self.spread

    def unmap(self, values):
        return np.asarray(values, dtype=np.float64) * self.spread + self.center


def affine_mapper() -> TargetMapper:
    return TargetMapper("affine", AFFINE_CENTER, AFFINE_SPREAD)


def fit_mapper(metric: str, training_entries: Sequence[ManifestEntry]) -> TargetMapper:
    """Fixed affine map for quality metrics; z-score (population std) on training data for STOI."""
    values = np.array([entry.target(metric) for entry in training_entries], dtype=np.float64)
    if metric in ("pesq", "polqa"):
        return affine_mapper()
    if values.size == 0:
        raise ManifestError(f"no training entries to fit the {metric} mapping")
    if np.ptp(values) == 0.0:
        raise ManifestError(f"zero variance in {metric} training targets")
    return TargetMapper("zscore", float(np.mean(values)), float(np.std(values)))


# ---------------------------------------------------------------- batching


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray | None
    entry_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.entry_ids)


class SegmentLoader:
    """Opens each store once and serves records aligned to the entry's phase flag."""

    def __init__(self) -> None:
        self._stores: dict[str, SegmentStore] = {}

    def samples(self, entry: ManifestEntry) -> np.ndarray:
        try:
            store = self._stores.get(entry.segment_path)
            if store is None:
                store = self._stores[entry.segment_path] = SegmentStore(Path(entry.segment_path))
            record = store[entry.record_index]
        except (AudioFormatError, IndexError) as exc:
            raise ManifestError(
                f"unreadable segment record {entry.segment_path}#{entry.record_index}: {exc}"
            ) from exc
        if record.phase_inverted != entry.phase_inverted:
            return np.negative(record.samples)
        return record.samples

    def segment(self, entry: ManifestEntry) -> Segment:
        samples = self.samples(entry)
        record = self._stores[entry.segment_path][entry.record_index]
        return dataclasses.replace(record, samples=samples, phase_inverted=entry.phase_inverted)

    def close(self) -> None:
        """Drop the mapped stores so their files can be rewritten."""
        self._stores.clear()


def batches(
    entries: Sequence[ManifestEntry],
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
    epoch: int = 0,
    drop_last: bool = False,
    *,
    ids: Sequence[int] | None = None,
    metric: str | None = None,
    mapper: TargetMapper | None = None,
    input_length: int = SEGMENT_LENGTH,
    training: bool = False,
    shuffle: bool = True,
    loader: SegmentLoader | None = None,
) -> Iterator[Batch]:
    """Yield batches over `ids` (all entries by default), reshuffled per (seed, epoch).

    Inputs are the leading `input_length` samples of each segment, shaped
    ``[N, 1, input_length]``. With `training`, a final batch of one is dropped.
    """
    ids = list(range(len(entries))) if ids is None else list(ids)
    if not ids:
        raise ManifestError("no segments to batch")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    if not 0 < input_length <= SEGMENT_LENGTH:
        raise ConfigError(f"input_length must lie in (0, {SEGMENT_LENGTH}], got {input_length}")
    if metric is not None:
        for entry_id in ids:
            entries[entry_id].target(metric)
    loader = loader if loader is not None else SegmentLoader()

    order = np.asarray(ids)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(order)

    for start in range(0, len(order), batch_size):
        chunk = [int(entry_id) for entry_id in order[start : start + batch_size]]
        if len(chunk) < batch_size and drop_last:
            break
        if training and len(chunk) == 1:
            logger.debug("Dropping a one-segment training batch (entry %d).", chunk[0])
            break
        inputs = np.stack([loader.samples(entries[entry_id])[:input_length] for entry_id in chunk])[:, None, :]
        targets = None
        if metric is not None:
            raw = np.array([entries[entry_id].target(metric) for entry_id in chunk], dtype=np.float64)
            targets = mapper.map(raw) if mapper is not None else raw
        yield Batch(inputs, targets, tuple(chunk))


# ---------------------------------------------------------------- synthetic fixture


def synth_targets(snr_db: float) -> dict[str, float]:
    """Fixture targets: quality-like rises linearly over the SNR range, STOI-like over a narrower band."""
    position = (snr_db - SYNTH_SNR_RANGE_DB[0]) / (SYNTH_SNR_RANGE_DB[1] - SYNTH_SNR_RANGE_DB[0])
    quality = min(max(1.0 + 3.5 * position, 1.0), 4.5)
    intelligibility = min(max(0.45 + 0.5 * position, 0.0), 1.0)
    return {"pesq": quality, "polqa": quality, "stoi": intelligibility}


def synth_carrier(rng: np.random.Generator, n_samples: int = SEGMENT_LENGTH) -> np.ndarray:
    """Harmonic pseudo-speech: 2-4 harmonics of a 100-300 Hz fundamental under a syllabic envelope."""
    t = np.arange(n_samples) / SAMPLE_RATE
    f0 = rng.uniform(*SYNTH_F0_RANGE_HZ)
    n_harmonics = int(rng.integers(2, 5))
    carrier = np.zeros(n_samples)
    for harmonic in range(1, n_harmonics + 1):
        carrier += np.sin(2.0 * np.pi * harmonic * f0 * t + rng.uniform(0.0, 2.0 * np.pi)) / harmonic
    syllable_rate = rng.uniform(*SYNTH_SYLLABLE_RANGE_HZ)
    envelope = 0.6 + 0.4 * np.sin(2.0 * np.pi * syllable_rate * t + rng.uniform(0.0, 2.0 * np.pi))
    return carrier * envelope


def synth_fixture(
    rng: np.random.Generator,
    n: int,
    store_path: Path | str,
    manifest_path: Path | str | None = None,
    n_datasets: int = 2,
) -> list[ManifestEntry]:
    """Write `n` noisy pseudo-speech segments to a WESEG1 store and return their manifest."""
    if n < 1:
        raise ConfigError(f"fixture size must be at least 1, got {n}")
    segments = []
    entries = []
    for index in range(n):
        snr_db = rng.uniform(*SYNTH_SNR_RANGE_DB)
        speech = synth_carrier(rng)
        noise = rng.standard_normal(SEGMENT_LENGTH)
        noise *= math.sqrt(np.mean(speech**2) / np.mean(noise**2) / 10.0 ** (snr_db / 10.0))
        source_id = f"synth-{index:05d}"
        normalized = normalize_to_level(AudioClip(speech + noise, SAMPLE_RATE, source_id))
        report = measure_activity(normalized.clip)
        segments.append(
            Segment(normalized.clip.samples, report.activity_factor, normalized.gain_db, 0, source_id)
        )
        entries.append(
            ManifestEntry(
                segment_path=str(store_path),
                record_index=index,
                source_dataset=f"synth{index % n_datasets}",
                **synth_targets(snr_db),
            )
        )
    write_segments(store_path, segments)
    if manifest_path is not None:
        write_manifest(manifest_path, entries)
    logger.info("Synthesized %d segments into %s.", n, store_path)
    return entries


# ---------------------------------------------------------------- statistics


def target_summary(entries: Sequence[ManifestEntry], bins: int = 20) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-metric count/mean/std and histogram counts over the metric's documented range."""
    summary_rows = []
    histogram_rows = []
    for metric in METRICS:
        values = np.array([entry.target(metric) for entry in entries if entry.has_target(metric)])
        if values.size == 0:
            continue
        summary_rows.append(
            {
                "metric": metric,
                "count": int(values.size),
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
                "min": float(np.min(values)),
                "max": float(np.max(values)),
            }
        )
        counts, edges = np.histogram(values, bins=bins, range=METRIC_RANGES[metric])
        histogram_rows.extend(
            {"metric": metric, "bin_low": float(low), "bin_high": float(high), "count": int(count)}
            for low, high, count in zip(edges[:-1], edges[1:], counts)
        )
    summary = pd.DataFrame(summary_rows, columns=["metric", "count", "mean", "std", "min", "max"])
    histogram = pd.DataFrame(histogram_rows, columns=["metric", "bin_low", "bin_high", "count"])
    return summary, histogram

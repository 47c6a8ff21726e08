"""Audio decoding, active-speech measurement, level normalization and segment mining."""
from __future__ import annotations

import dataclasses
import logging
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage, signal

from wenets.errors import AudioFormatError, ConfigError, SilentSignalError

SAMPLE_RATE = 8000
SEGMENT_SECONDS = 3
SEGMENT_LENGTH = SEGMENT_SECONDS * SAMPLE_RATE
TARGET_LEVEL_DB = -26.0

FRAME_MS = 10
FRAME_LENGTH = SAMPLE_RATE * FRAME_MS // 1000
ENVELOPE_TIME_CONSTANT_MS = 30
HANGOVER_MS = 200
ACTIVITY_MARGIN_DB = 15.9
THRESHOLD_STEP_DB = 0.5
THRESHOLD_RANGE_DB = 100.0
SILENT_LEVEL_DB = float("-inf")

MAX_OFFSET_MS = 250

STORE_MAGIC = b"WESEG1"
_RECORD_HEADER = struct.Struct("<HffB")

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_id: str = ""

    def __post_init__(self) -> None:
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"unsupported sample rate: {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioFormatError(f"expected mono samples, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class ActivityReport:
    active_level_db: float
    activity_factor: float
    active_mask: np.ndarray
    # Envelope threshold the mask was cut at (0.0 for silence).
    threshold: float = 0.0

    @property
    def is_silent(self) -> bool:
        return not self.active_mask.any()


@dataclass(frozen=True, eq=False)
class Segment:
    samples: np.ndarray
    activity_factor: float
    gain_applied_db: float = 0.0
    offset_ms: int = 0
    source_id: str = ""
    phase_inverted: bool = False

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.shape != (SEGMENT_LENGTH,):
            raise AudioFormatError(
                f"segment must hold {SEGMENT_LENGTH} samples, got shape {samples.shape}"
            )
        object.__setattr__(self, "samples", samples)


class Normalized(NamedTuple):
    clip: AudioClip
    gain_db: float
    clipped_samples: int


def load_wav(path: Path | str) -> AudioClip:
    """Decode a PCM16 mono 8 kHz RIFF/WAVE file into amplitudes in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as reader:
            channels = reader.getnchannels()
            sample_width = reader.getsampwidth()
            sample_rate = reader.getframerate()
            frames = reader.readframes(reader.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"malformed RIFF/WAVE file {path.name}: {exc}") from exc

    if channels != 1:
        raise AudioFormatError(f"unsupported channel count: {channels}")
    if sample_width != 2:
        raise AudioFormatError(f"unsupported bit depth: {8 * sample_width}")
    if sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"unsupported sample rate: {sample_rate}")
    if len(frames) % 2:
        raise AudioFormatError(f"truncated sample data in {path.name}")

    pcm = np.frombuffer(frames, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, SAMPLE_RATE, str(path))


def write_wav(path: Path | str, samples: Sequence[float] | np.ndarray) -> None:
    """Write amplitudes as PCM16 mono at 8 kHz; out-of-range values saturate."""
    scaled = np.round(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32768.0)
    pcm = np.clip(scaled, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(SAMPLE_RATE)
        writer.writeframes(pcm.tobytes())


def _frame_view(values: np.ndarray) -> np.ndarray:
    n_frames = -(-len(values) // FRAME_LENGTH)
    padded = np.zeros(n_frames * FRAME_LENGTH, dtype=np.float64)
    padded[: len(values)] = values
    return padded.reshape(n_frames, FRAME_LENGTH)


def frame_envelope(samples: np.ndarray) -> np.ndarray:
    """Per-frame peak of the exponentially smoothed magnitude."""
    decay = math.exp(-1.0 / (SAMPLE_RATE * ENVELOPE_TIME_CONSTANT_MS / 1000.0))
    smoothed = signal.lfilter([1.0 - decay], [1.0, -decay], np.abs(samples))
    return _frame_view(smoothed).max(axis=1)


def bridge_gaps(mask: np.ndarray, max_gap_frames: int = HANGOVER_MS // FRAME_MS) -> np.ndarray:
    """Mark inactive runs of at most `max_gap_frames` frames between active frames as active."""
    radius = max_gap_frames // 2
    if radius == 0 or not mask.any():
        return mask.copy()
    padded = np.pad(mask, radius + 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones(2 * radius + 1, dtype=bool))
    return closed[radius + 1 : radius + 1 + len(mask)]


def _level_db(energy: np.ndarray, counts: np.ndarray, mask: np.ndarray) -> float:
    total = energy[mask].sum()
    if total <= 0.0:
        return SILENT_LEVEL_DB
    return 10.0 * math.log10(total / counts[mask].sum())


def measure_activity(clip: AudioClip) -> ActivityReport:
    """Active speech level (dBov) and activity factor with a 10 ms frame mask.

    The envelope threshold is swept downward from the loudest frame in
    0.5 dB steps until the active level sits 15.9 dB above it, then refined
    by interpolation between the bracketing steps. Every threshold is
    relative to the loudest frame, so the measurement scales exactly with gain.
    """
    samples = clip.samples
    if len(samples) == 0:
        raise SilentSignalError("cannot measure activity of an empty clip")

    envelope = frame_envelope(samples)
    energy = _frame_view(samples * samples).sum(axis=1)
    counts = np.full(len(envelope), FRAME_LENGTH, dtype=np.int64)
    counts[-1] = len(samples) - FRAME_LENGTH * (len(envelope) - 1)

    peak = float(envelope.max())
    if peak <= 0.0:
        return ActivityReport(SILENT_LEVEL_DB, 0.0, np.zeros(len(envelope), dtype=bool), 0.0)

    def mask_at(threshold: float) -> np.ndarray:
        return bridge_gaps(envelope >= threshold)

    steps = int(THRESHOLD_RANGE_DB / THRESHOLD_STEP_DB)
    previous_excess = None
    drop_db = steps * THRESHOLD_STEP_DB
    for step in range(steps + 1):
        step_drop = step * THRESHOLD_STEP_DB
        threshold = peak * 10.0 ** (-step_drop / 20.0)
        level = _level_db(energy, counts, mask_at(threshold))
        excess = level - 20.0 * math.log10(threshold)
        if excess >= ACTIVITY_MARGIN_DB:
            if previous_excess is None:
                drop_db = step_drop
            else:
                fraction = (ACTIVITY_MARGIN_DB - previous_excess) / (excess - previous_excess)
                drop_db = step_drop - THRESHOLD_STEP_DB + fraction * THRESHOLD_STEP_DB
            break
        previous_excess = excess

    threshold = peak * 10.0 ** (-drop_db / 20.0)
    mask = mask_at(threshold)
    level = _level_db(energy, counts, mask)
    factor = int(mask.sum()) / len(mask)
    return ActivityReport(level, factor, mask, threshold)


def normalize_to_level(clip: AudioClip, target_db: float = TARGET_LEVEL_DB) -> Normalized:
    report = measure_activity(clip)
    if report.is_silent or math.isinf(report.active_level_db):
        raise SilentSignalError(f"silent input: no active frames in {clip.source_id or 'clip'}")

    gain_db = target_db - report.active_level_db
    gain = 10.0 ** (gain_db / 20.0)
    scaled = clip.samples * gain
    clipped = int(np.count_nonzero(np.abs(scaled) > 1.0))
    if clipped:
        logger.warning("Hard-clipped %d samples of %s after %+.2f dB gain.", clipped, clip.source_id, gain_db)
        scaled = np.clip(scaled, -1.0, 1.0)
    return Normalized(AudioClip(scaled, clip.sample_rate, clip.source_id), gain_db, clipped)


def _window_segment(clip: AudioClip, start: int, gain_db: float, offset_ms: int) -> Segment:
    window = clip.samples[start : start + SEGMENT_LENGTH].astype(np.float32)
    report = measure_activity(AudioClip(window, clip.sample_rate, clip.source_id))
    return Segment(window, report.activity_factor, gain_db, offset_ms, clip.source_id)


def extract_segments(
    clip: AudioClip,
    min_activity: float,
    passes: int,
    rng: np.random.Generator,
    gain_db: float = 0.0,
    max_offset_ms: int = MAX_OFFSET_MS,
) -> list[Segment]:
    """Mine 3 s segments from a normalized clip.

    Nominal windows tile the clip without overlap. On every pass each
    window start is pushed forward by its own uniform offset; windows that
    overrun the clip, fall below `min_activity`, or repeat an already
    emitted start sample are skipped. One offset is drawn per nominal window
    per pass whether or not the window is kept.
    """
    if not 0.0 <= min_activity <= 1.0:
        raise ConfigError(f"min_activity must lie in [0, 1], got {min_activity}")
    if passes < 1:
        raise ConfigError(f"passes must be at least 1, got {passes}")

    n_windows = len(clip.samples) // SEGMENT_LENGTH
    samples_per_ms = SAMPLE_RATE // 1000
    seen_starts: set[int] = set()
    segments = []
    for _ in range(passes):
        for window in range(n_windows):
            offset_ms = float(rng.uniform(0.0, max_offset_ms))
            offset = math.floor(offset_ms * samples_per_ms)
            start = window * SEGMENT_LENGTH + offset
            if start + SEGMENT_LENGTH > len(clip.samples) or start in seen_starts:
                continue
            segment = _window_segment(clip, start, gain_db, offset // samples_per_ms)
            if segment.activity_factor < min_activity:
                continue
            seen_starts.add(start)
            segments.append(segment)
    return segments


def fixed_windows(clip: AudioClip, gain_db: float = 0.0) -> list[Segment]:
    """Back-to-back 3 s windows with no offset and no activity gate (scoring path)."""
    starts = range(0, len(clip.samples) - SEGMENT_LENGTH + 1, SEGMENT_LENGTH)
    return [_window_segment(clip, start, gain_db, 0) for start in starts]


def invert_phase(segment: Segment) -> Segment:
    return dataclasses.replace(
        segment,
        samples=np.negative(segment.samples),
        phase_inverted=not segment.phase_inverted,
    )


def write_segments(path: Path | str, segments: Iterable[Segment]) -> int:
    """Write a WESEG1 store and return the record count."""
    count = 0
    with open(path, "wb") as out_file:
        out_file.write(STORE_MAGIC)
        for segment in segments:
            name = segment.source_id.encode("utf-8")
            if len(name) > 0xFFFF:
                raise AudioFormatError(f"source id too long for store: {len(name)} bytes")
            if not 0 <= segment.offset_ms <= 0xFFFF:
                raise AudioFormatError(f"offset_ms out of range: {segment.offset_ms}")
            out_file.write(struct.pack("<H", len(name)))
            out_file.write(name)
            out_file.write(
                _RECORD_HEADER.pack(
                    segment.offset_ms,
                    segment.activity_factor,
                    segment.gain_applied_db,
                    int(segment.phase_inverted),
                )
            )
            out_file.write(segment.samples.astype("<f4").tobytes())
            count += 1
    return count


@dataclass
class SegmentStore:
    """Random access over the records of a WESEG1 file, memory-mapped read-only."""

    path: Path
    _data: np.memmap = field(init=False, repr=False)
    _offsets: list[int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.path = Path(self.path)
        try:
            size = self.path.stat().st_size
            if size < len(STORE_MAGIC):
                raise AudioFormatError(f"bad magic in segment store {self.path.name}")
            self._data = np.memmap(self.path, dtype=np.uint8, mode="r")
        except OSError as exc:
            raise AudioFormatError(f"cannot read segment store {self.path}: {exc}") from exc
        if self._data[: len(STORE_MAGIC)].tobytes() != STORE_MAGIC:
            raise AudioFormatError(f"bad magic in segment store {self.path.name}")
        self._offsets = self._index()

    def _index(self) -> list[int]:
        offsets = []
        position = len(STORE_MAGIC)
        sample_bytes = 4 * SEGMENT_LENGTH
        while position < len(self._data):
            offsets.append(position)
            if position + 2 > len(self._data):
                raise AudioFormatError(f"truncated record {len(offsets) - 1} in {self.path.name}")
            (name_length,) = struct.unpack_from("<H", self._data, position)
            position += 2 + name_length + _RECORD_HEADER.size + sample_bytes
            if position > len(self._data):
                raise AudioFormatError(f"truncated record {len(offsets) - 1} in {self.path.name}")
        return offsets

    def __len__(self) -> int:
        return len(self._offsets)

    def __getitem__(self, index: int) -> Segment:
        if not 0 <= index < len(self._offsets):
            raise IndexError(f"record {index} out of range for {self.path.name} ({len(self)} records)")
        position = self._offsets[index]
        (name_length,) = struct.unpack_from("<H", self._data, position)
        position += 2
        source_id = self._data[position : position + name_length].tobytes().decode("utf-8")
        position += name_length
        offset_ms, activity, gain_db, inverted = _RECORD_HEADER.unpack_from(self._data, position)
        position += _RECORD_HEADER.size
        samples = np.frombuffer(self._data, dtype="<f4", count=SEGMENT_LENGTH, offset=position)
        return Segment(samples.astype(np.float32), activity, gain_db, offset_ms, source_id, bool(inverted))

    def __iter__(self):
        for index in range(len(self)):
            yield self[index]


def read_segments(path: Path | str) -> list[Segment]:
    return list(SegmentStore(Path(path)))

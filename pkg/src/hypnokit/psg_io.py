"""PSG ingestion: 16-bit EDF files, hypnogram and arousal CSV side-cars.

A recording on disk is a set of files sharing a stem::

    <stem>.edf             signals
    <stem>.hypnogram.csv   epoch_index,stage_code
    <stem>.arousals.csv    start_sec,duration_sec
    <stem>.json            id, lights_off_sec, lights_on_sec, free-form metadata

Only plain EDF (16-bit little-endian samples) is supported. Files read with
:func:`read_edf` keep their raw header text so :func:`write_edf` reproduces
them byte for byte.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, RangeError, UsageError


class Stage(IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    R = 4
    UNKNOWN = 5


#: Column order used by every matrix and report.
STAGE_NAMES = ("W", "N1", "N2", "N3", "R")
N_STAGES = len(STAGE_NAMES)
SLEEP_STAGES = (Stage.N1, Stage.N2, Stage.N3, Stage.R)

# AASM and R&K codes. R&K S3 and S4 both collapse to N3; MT is unscored.
STAGE_CODES: dict[str, Stage] = {
    "W": Stage.W,
    "WAKE": Stage.W,
    "N1": Stage.N1,
    "N2": Stage.N2,
    "N3": Stage.N3,
    "N4": Stage.N3,
    "R": Stage.R,
    "REM": Stage.R,
    "S1": Stage.N1,
    "S2": Stage.N2,
    "S3": Stage.N3,
    "S4": Stage.N3,
    "MT": Stage.UNKNOWN,
    "UNKNOWN": Stage.UNKNOWN,
}
_WRITE_CODES = {int(s): name for s, name in zip(Stage, STAGE_NAMES)}
_WRITE_CODES[int(Stage.UNKNOWN)] = "UNKNOWN"


def parse_stage_code(code: str) -> Stage:
    """Map a stage token to a :class:`Stage`; unrecognised tokens are Unknown."""
    return STAGE_CODES.get(code.strip().upper(), Stage.UNKNOWN)


class ChannelRole(Enum):
    EEG = "EEG"
    EOG = "EOG"
    EMG = "EMG"
    OTHER = "Other"


# Checked in order; EOG first because EOG derivations usually name a mastoid
# reference (E1-M2) that would otherwise match the EEG pattern.
DEFAULT_ROLE_PATTERNS: tuple[tuple[ChannelRole, str], ...] = (
    (ChannelRole.EOG, r"EOG|E1|E2|LOC|ROC"),
    (ChannelRole.EMG, r"EMG|CHIN"),
    (ChannelRole.EEG, r"EEG|C3|C4|F3|F4|O1|O2|A1|A2|M1|M2|Fpz|Cz|Pz"),
)


def classify_channel(
    label: str, patterns: Sequence[tuple[ChannelRole, str]] = DEFAULT_ROLE_PATTERNS
) -> ChannelRole:
    for role, pattern in patterns:
        if re.search(pattern, label, flags=re.IGNORECASE):
            return role
    return ChannelRole.OTHER


@dataclass(frozen=True)
class Hypnogram:
    """Per-epoch stage labels (``Stage`` values stored as int8)."""

    stages: np.ndarray
    epoch_len_sec: float = 30.0

    def __post_init__(self):
        stages = np.asarray(self.stages, dtype=np.int8).copy()
        if stages.ndim != 1 or stages.size < 1:
            raise UsageError("hypnogram must contain at least one epoch")
        if stages.min() < 0 or stages.max() > int(Stage.UNKNOWN):
            raise UsageError("hypnogram contains values outside the Stage enumeration")
        if self.epoch_len_sec <= 0:
            raise UsageError("epoch_len_sec must be positive")
        stages.flags.writeable = False
        object.__setattr__(self, "stages", stages)

    def __len__(self) -> int:
        return self.stages.size

    def __eq__(self, other):
        if not isinstance(other, Hypnogram):
            return NotImplemented
        return self.epoch_len_sec == other.epoch_len_sec and np.array_equal(self.stages, other.stages)

    @property
    def duration_sec(self) -> float:
        return len(self) * self.epoch_len_sec

    def codes(self) -> list[str]:
        return [_WRITE_CODES[int(s)] for s in self.stages]


# Physical-dimension strings converted to volts by division.
_VOLT_DIVISORS = {"v": 1.0, "mv": 1e3, "uv": 1e6, "µv": 1e6, "μv": 1e6, "nv": 1e9}


def _volt_divisor(unit: str) -> float | None:
    return _VOLT_DIVISORS.get(unit.strip().lower())


@dataclass(frozen=True)
class EdfSignalHeader:
    """Raw per-signal EDF header fields (text exactly as stored)."""

    label: str
    transducer: str
    physical_dimension: str
    physical_min: str
    physical_max: str
    digital_min: str
    digital_max: str
    prefiltering: str
    samples_per_record: str
    reserved: str


@dataclass(frozen=True)
class EdfFileHeader:
    """Raw fixed-part EDF header fields."""

    version: str
    patient: str
    recording: str
    startdate: str
    starttime: str
    header_bytes: str
    reserved: str
    n_records: str
    record_duration: str
    n_signals: str


@dataclass(frozen=True, eq=False)
class Channel:
    """One signal in volts (or native units for non-voltage channels).

    ``physical_range`` is the declared range in the same units as
    ``samples``; ``unit`` the EDF physical dimension used when writing.
    """

    label: str
    role: ChannelRole
    sample_rate: float
    samples: np.ndarray
    physical_range: tuple[float, float] | None = None
    unit: str = "uV"
    digital_range: tuple[int, int] = (-32768, 32767)
    edf: EdfSignalHeader | None = None

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise UsageError(f"channel {self.label!r}: sample rate must be positive")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UsageError(f"channel {self.label!r}: samples must be one-dimensional")
        if samples.flags.writeable:
            samples = samples.copy()
            samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    @property
    def duration_sec(self) -> float:
        return self.samples.size / self.sample_rate

    def __eq__(self, other):
        if not isinstance(other, Channel):
            return NotImplemented
        return (
            self.label == other.label
            and self.role == other.role
            and self.sample_rate == other.sample_rate
            and self.physical_range == other.physical_range
            and self.unit.strip() == other.unit.strip()
            and self.digital_range == other.digital_range
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True, eq=False)
class Recording:
    id: str
    channels: tuple[Channel, ...]
    lights_off_sec: float | None = None
    lights_on_sec: float | None = None
    hypnogram: Hypnogram | None = None
    arousals: tuple[tuple[float, float], ...] | None = None
    meta: dict = field(default_factory=dict)
    edf: EdfFileHeader | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.arousals is not None:
            object.__setattr__(self, "arousals", tuple((float(a), float(b)) for a, b in self.arousals))
        if self.lights_off_sec is not None and self.lights_off_sec < 0:
            raise UsageError("lights_off_sec must be nonnegative")
        if (
            self.lights_off_sec is not None
            and self.lights_on_sec is not None
            and not self.lights_off_sec < self.lights_on_sec
        ):
            raise UsageError("lights_off_sec must precede lights_on_sec")
        if self.channels:
            durations = {round(c.duration_sec, 6) for c in self.channels}
            if len(durations) > 1:
                raise UsageError(f"recording {self.id!r}: channels disagree on duration {sorted(durations)}")
        if self.hypnogram is not None and self.channels:
            slack = self.hypnogram.epoch_len_sec
            if self.hypnogram.duration_sec > self.duration_sec + slack + 1e-9:
                raise UsageError(f"recording {self.id!r}: hypnogram longer than the signals")

    @property
    def duration_sec(self) -> float:
        return self.channels[0].duration_sec if self.channels else 0.0

    def channels_with_role(self, role: ChannelRole) -> list[int]:
        return [i for i, c in enumerate(self.channels) if c.role is role]

    def replace(self, **changes) -> "Recording":
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.id == other.id
            and self.channels == other.channels
            and self.lights_off_sec == other.lights_off_sec
            and self.lights_on_sec == other.lights_on_sec
            and self.hypnogram == other.hypnogram
            and self.arousals == other.arousals
        )


# --------------------------------------------------------------------------
# EDF

_FIXED_FIELDS = (
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("startdate", 8),
    ("starttime", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
)
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


def _num(text: str, kind, what: str, offset: int):
    try:
        return kind(text.strip())
    except ValueError:
        raise ParseError(f"cannot parse {what} {text!r}", offset=offset) from None


def _parse_header(raw: bytes):
    if len(raw) < 256:
        raise ParseError("file shorter than the 256-byte EDF header", offset=len(raw))
    pos = 0
    fixed = {}
    offsets = {}
    for name, width in _FIXED_FIELDS:
        offsets[name] = pos
        fixed[name] = raw[pos : pos + width].decode("latin-1")
        pos += width
    head = EdfFileHeader(**fixed)
    if head.version.strip() != "0":
        raise ParseError(f"unsupported EDF version field {head.version!r}", offset=0)
    if head.reserved.startswith("EDF+D"):
        raise ParseError("discontinuous EDF+ recordings are not supported", offset=offsets["reserved"])
    ns = _num(head.n_signals, int, "signal count", offsets["n_signals"])
    if ns < 0:
        raise ParseError("negative signal count", offset=offsets["n_signals"])
    header_bytes = _num(head.header_bytes, int, "header size", offsets["header_bytes"])
    if header_bytes != 256 + 256 * ns:
        raise ParseError(
            f"header size {header_bytes} inconsistent with {ns} signals", offset=offsets["header_bytes"]
        )
    if len(raw) < header_bytes:
        raise ParseError("file ends inside the signal header", offset=len(raw))
    columns: dict[str, list[str]] = {}
    col_offsets: dict[str, int] = {}
    for name, width in _SIGNAL_FIELDS:
        col_offsets[name] = pos
        columns[name] = [raw[pos + i * width : pos + (i + 1) * width].decode("latin-1") for i in range(ns)]
        pos += width * ns
    signals = [EdfSignalHeader(**{name: columns[name][i] for name, _ in _SIGNAL_FIELDS}) for i in range(ns)]
    return head, signals, offsets, col_offsets


def read_edf(path, role_patterns=DEFAULT_ROLE_PATTERNS) -> Recording:
    """Decode a 16-bit EDF file into a :class:`Recording` (samples in volts)."""
    path = Path(path)
    raw = path.read_bytes()
    head, sigs, offsets, col_offsets = _parse_header(raw)
    ns = len(sigs)
    if ns < 1:
        raise ParseError("EDF file declares no signals", offset=offsets["n_signals"])
    duration = _num(head.record_duration, float, "record duration", offsets["record_duration"])
    if not duration > 0:
        raise ParseError("record duration must be positive", offset=offsets["record_duration"])

    spr = []
    ranges = []
    for i, s in enumerate(sigs):
        if s.label.strip() == "EDF Annotations":
            raise ParseError("EDF+ annotation signals are not supported", offset=col_offsets["label"] + 16 * i)
        n = _num(s.samples_per_record, int, "samples per record", col_offsets["samples_per_record"] + 8 * i)
        if n < 1:
            raise ParseError("samples per record must be positive", offset=col_offsets["samples_per_record"] + 8 * i)
        pmin = _num(s.physical_min, float, "physical minimum", col_offsets["physical_min"] + 8 * i)
        pmax = _num(s.physical_max, float, "physical maximum", col_offsets["physical_max"] + 8 * i)
        dmin = _num(s.digital_min, int, "digital minimum", col_offsets["digital_min"] + 8 * i)
        dmax = _num(s.digital_max, int, "digital maximum", col_offsets["digital_max"] + 8 * i)
        if pmax == pmin:
            raise ParseError(f"signal {s.label.strip()!r} has a zero-width physical range",
                             offset=col_offsets["physical_min"] + 8 * i)
        if not -32768 <= dmin < dmax <= 32767:
            raise ParseError(f"signal {s.label.strip()!r} has an invalid digital range",
                             offset=col_offsets["digital_min"] + 8 * i)
        spr.append(n)
        ranges.append((pmin, pmax, dmin, dmax))

    header_bytes = 256 + 256 * ns
    record_bytes = 2 * sum(spr)
    available = len(raw) - header_bytes
    n_records = _num(head.n_records, int, "record count", offsets["n_records"])
    if n_records == -1:
        n_records = available // record_bytes
    if n_records < 0:
        raise ParseError("negative record count", offset=offsets["n_records"])
    if available < n_records * record_bytes:
        raise ParseError("truncated data section", record=available // record_bytes)
    if available > n_records * record_bytes:
        raise ParseError("trailing bytes after the last data record", offset=header_bytes + n_records * record_bytes)

    data = np.frombuffer(raw, dtype="<i2", offset=header_bytes, count=n_records * sum(spr))
    data = data.reshape(n_records, sum(spr))
    channels = []
    start = 0
    for s, n, (pmin, pmax, dmin, dmax) in zip(sigs, spr, ranges):
        digital = data[:, start : start + n].reshape(-1).astype(np.float64)
        start += n
        frac = (digital - dmin) / (dmax - dmin)
        # lerp form keeps both range endpoints exact
        physical = pmin * (1.0 - frac) + pmax * frac
        divisor = _volt_divisor(s.physical_dimension)
        prange = (pmin, pmax)
        if divisor is not None and divisor != 1.0:
            physical = physical / divisor
            prange = (pmin / divisor, pmax / divisor)
        label = s.label.strip()
        channels.append(
            Channel(
                label=label,
                role=classify_channel(label, role_patterns),
                sample_rate=n / duration,
                samples=physical,
                physical_range=prange,
                unit=s.physical_dimension.strip(),
                digital_range=(dmin, dmax),
                edf=s,
            )
        )
    return Recording(id=path.stem, channels=tuple(channels), edf=head)


def _fmt_number(value: float) -> str:
    if float(value).is_integer() and abs(value) < 1e8:
        return str(int(value))
    for digits in range(8, 0, -1):
        text = f"{value:.{digits}g}"
        if len(text) <= 8:
            return text
    raise ParseError(f"number {value!r} does not fit an 8-character EDF field")


def _field(text: str, width: int, what: str) -> bytes:
    encoded = text.encode("latin-1", errors="replace")
    if len(encoded) > width:
        raise ParseError(f"{what} {text!r} longer than {width} characters")
    return encoded.ljust(width, b" ")


def _keep_raw(raw: str | None, value, kind) -> str:
    """Reuse the stored header text when it still parses to ``value``."""
    if raw is not None:
        try:
            if kind(raw.strip()) == value:
                return raw
        except ValueError:
            pass
    return _fmt_number(value)


def _record_layout(recording: Recording) -> tuple[float, list[int]]:
    """Choose a record duration for which every channel fills whole records."""
    if recording.edf is not None:
        duration = float(recording.edf.record_duration.strip())
        spr = [c.sample_rate * duration for c in recording.channels]
        if all(float(n).is_integer() and n > 0 and c.samples.size % int(n) == 0
               for n, c in zip(spr, recording.channels)):
            return duration, [int(n) for n in spr]
    total = recording.duration_sec
    for duration in (1.0, 2.0, 5.0, 10.0, 15.0, 30.0, 60.0, total):
        spr = [c.sample_rate * duration for c in recording.channels]
        if all(abs(n - round(n)) < 1e-9 and round(n) > 0 and c.samples.size % round(n) == 0
               for n, c in zip(spr, recording.channels)):
            return duration, [int(round(n)) for n in spr]
    raise UsageError(f"recording {recording.id!r}: no EDF record duration fits all channel rates")


def _encode(channel: Channel) -> np.ndarray:
    if channel.physical_range is None:
        raise UsageError(f"channel {channel.label!r} has no declared physical range")
    lo, hi = channel.physical_range
    dmin, dmax = channel.digital_range
    x = channel.samples
    frac = (x - lo) / (hi - lo)
    slack = 0.5 / (dmax - dmin)
    bad = ~((frac >= -slack) & (frac <= 1.0 + slack))
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise RangeError(channel.label, idx, float(x[idx]))
    digital = np.rint(dmin + frac * (dmax - dmin))
    return np.clip(digital, dmin, dmax).astype("<i2")


def write_edf(recording: Recording, path) -> None:
    """Write ``recording`` as 16-bit EDF; raw header text is reused when present."""
    if not recording.channels:
        raise ParseError("EDF requires at least one signal")
    duration, spr = _record_layout(recording)
    n_records = recording.channels[0].samples.size // spr[0]
    ns = len(recording.channels)
    head = recording.edf
    out = bytearray()
    out += _field(head.version if head else "0", 8, "version")
    out += _field(head.patient if head else "X X X X", 80, "patient field")
    out += _field(head.recording if head else f"Startdate X X X {recording.id}", 80, "recording field")
    out += _field(head.startdate if head else "01.01.00", 8, "start date")
    out += _field(head.starttime if head else "00.00.00", 8, "start time")
    out += _field(_keep_raw(head.header_bytes if head else None, 256 + 256 * ns, int), 8, "header size")
    out += _field(head.reserved if head else "", 44, "reserved field")
    out += _field(_keep_raw(head.n_records if head else None, n_records, int), 8, "record count")
    out += _field(_keep_raw(head.record_duration if head else None, duration, float), 8, "record duration")
    out += _field(_keep_raw(head.n_signals if head else None, ns, int), 4, "signal count")

    per_signal: list[dict[str, str]] = []
    for c, n in zip(recording.channels, spr):
        raw = c.edf
        if c.physical_range is None:
            raise UsageError(f"channel {c.label!r} has no declared physical range")
        divisor = _volt_divisor(c.unit) or 1.0
        pmin, pmax = c.physical_range[0] * divisor, c.physical_range[1] * divisor
        per_signal.append({
            "label": raw.label if raw and raw.label.strip() == c.label else c.label,
            "transducer": raw.transducer if raw else "",
            "physical_dimension": raw.physical_dimension if raw else c.unit,
            "physical_min": _keep_raw(raw.physical_min if raw else None, pmin, float),
            "physical_max": _keep_raw(raw.physical_max if raw else None, pmax, float),
            "digital_min": _keep_raw(raw.digital_min if raw else None, c.digital_range[0], int),
            "digital_max": _keep_raw(raw.digital_max if raw else None, c.digital_range[1], int),
            "prefiltering": raw.prefiltering if raw else "",
            "samples_per_record": _keep_raw(raw.samples_per_record if raw else None, n, int),
            "reserved": raw.reserved if raw else "",
        })
    for name, width in _SIGNAL_FIELDS:
        for sig in per_signal:
            out += _field(sig[name], width, name.replace("_", " "))

    blocks = []
    for c, n in zip(recording.channels, spr):
        blocks.append(_encode(c).reshape(n_records, n))
    out += np.concatenate(blocks, axis=1).astype("<i2").tobytes()
    Path(path).write_bytes(bytes(out))


# --------------------------------------------------------------------------
# CSV side-cars


def _csv_rows(path) -> Iterable[tuple[int, list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            yield lineno, [cell.strip() for cell in row]


def read_hypnogram(path, epoch_len_sec: float = 30.0) -> Hypnogram:
    """Parse ``epoch_index,stage_code`` rows; gaps and unknown codes become Unknown."""
    labels: dict[int, Stage] = {}
    first = True
    for lineno, row in _csv_rows(path):
        if len(row) < 2:
            raise ParseError(f"{path}: line {lineno}: expected epoch_index,stage_code")
        try:
            index = int(row[0])
        except ValueError:
            if first:  # header row
                first = False
                continue
            raise ParseError(f"{path}: line {lineno}: bad epoch index {row[0]!r}") from None
        first = False
        if index < 0:
            raise ParseError(f"{path}: line {lineno}: negative epoch index {index}")
        if index in labels:
            raise ParseError(f"{path}: line {lineno}: duplicate epoch index {index}")
        labels[index] = parse_stage_code(row[1])
    if not labels:
        raise ParseError(f"{path}: no epochs")
    stages = np.full(max(labels) + 1, int(Stage.UNKNOWN), dtype=np.int8)
    for index, stage in labels.items():
        stages[index] = int(stage)
    return Hypnogram(stages, epoch_len_sec)


def write_hypnogram(hypnogram: Hypnogram, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch_index", "stage_code"])
        for i, code in enumerate(hypnogram.codes()):
            writer.writerow([i, code])


def read_arousals(path) -> list[tuple[float, float]]:
    events = []
    first = True
    for lineno, row in _csv_rows(path):
        if len(row) < 2:
            raise ParseError(f"{path}: line {lineno}: expected start_sec,duration_sec")
        try:
            start, dur = float(row[0]), float(row[1])
        except ValueError:
            if first:
                first = False
                continue
            raise ParseError(f"{path}: line {lineno}: non-numeric arousal row") from None
        first = False
        if start < 0 or dur < 0 or not np.isfinite(start) or not np.isfinite(dur):
            raise ParseError(f"{path}: line {lineno}: arousal times must be nonnegative")
        events.append((start, dur))
    return sorted(events)


def write_arousals(arousals: Iterable[tuple[float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["start_sec", "duration_sec"])
        for start, dur in arousals:
            writer.writerow([repr(float(start)), repr(float(dur))])


def sidecar_paths(edf_path) -> dict[str, Path]:
    p = Path(edf_path)
    stem = p.with_suffix("")
    return {
        "hypnogram": stem.with_name(stem.name + ".hypnogram.csv"),
        "arousals": stem.with_name(stem.name + ".arousals.csv"),
        "meta": stem.with_name(stem.name + ".json"),
    }


def load_record(edf_path, epoch_len_sec: float = 30.0, role_patterns=DEFAULT_ROLE_PATTERNS) -> Recording:
    """Read an EDF file together with whichever side-cars exist next to it."""
    rec = read_edf(edf_path, role_patterns)
    paths = sidecar_paths(edf_path)
    changes: dict = {}
    if paths["meta"].exists():
        meta = json.loads(paths["meta"].read_text(encoding="utf-8"))
        changes["meta"] = meta
        changes["id"] = meta.get("id", rec.id)
        changes["lights_off_sec"] = meta.get("lights_off_sec")
        changes["lights_on_sec"] = meta.get("lights_on_sec")
    if paths["hypnogram"].exists():
        changes["hypnogram"] = read_hypnogram(paths["hypnogram"], epoch_len_sec)
    if paths["arousals"].exists():
        changes["arousals"] = read_arousals(paths["arousals"])
    return rec.replace(**changes) if changes else rec


def save_record(recording: Recording, edf_path) -> None:
    """Write a recording and its side-cars (inverse of :func:`load_record`)."""
    write_edf(recording, edf_path)
    paths = sidecar_paths(edf_path)
    if recording.hypnogram is not None:
        write_hypnogram(recording.hypnogram, paths["hypnogram"])
    if recording.arousals is not None:
        write_arousals(recording.arousals, paths["arousals"])
    meta = dict(recording.meta)
    meta.update(id=recording.id, lights_off_sec=recording.lights_off_sec, lights_on_sec=recording.lights_on_sec)
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

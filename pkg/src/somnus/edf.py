"""Reading and writing EDF/EDF+ recordings.

Samples are kept as 16-bit integers exactly as stored on disk; conversion to
physical units happens only in :func:`extract_channel`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

ANNOTATION_LABEL = "EDF Annotations"

# (name, width) of the fixed-width slots in the main header.
_MAIN_FIELDS = (
    ("version", 8),
    ("patient_id", 80),
    ("recording_id", 80),
    ("startdate", 8),
    ("starttime", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("num_records", 8),
    ("record_duration", 8),
    ("num_signals", 4),
)

# Per-signal slots, stored column-wise (all labels, then all transducers, ...).
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefilter", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


class EDFError(ValueError):
    pass


class TruncatedFile(EDFError):
    pass


class MalformedHeader(EDFError):
    pass


class InconsistentSignalCount(EDFError):
    pass


class RangeOverflow(EDFError):
    pass


class UnknownChannel(KeyError):
    pass


class AmbiguousChannel(KeyError):
    pass


@dataclass(frozen=True)
class SignalDef:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int
    transducer: str = ""
    physical_dimension: str = "uV"
    prefilter: str = ""
    reserved: str = ""
    record_duration: float = 1.0

    def __post_init__(self):
        if self.digital_min >= self.digital_max:
            raise MalformedHeader(f"{self.label!r}: digital_min must be < digital_max")
        if self.physical_min == self.physical_max:
            raise MalformedHeader(f"{self.label!r}: physical_min equals physical_max")
        if self.samples_per_record <= 0:
            raise MalformedHeader(f"{self.label!r}: samples_per_record must be positive")

    @property
    def sampling_rate_hz(self) -> float:
        return self.samples_per_record / self.record_duration

    @property
    def is_annotation(self) -> bool:
        return self.label == ANNOTATION_LABEL

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)


def _as_samples(values) -> np.ndarray:
    """int16 when every value fits; otherwise keep wide ints so the writer can refuse them."""
    arr = np.asarray(values)
    if arr.dtype == np.int16:
        return arr
    wide = arr.astype(np.int64)
    if wide.size and (wide.min() < -32768 or wide.max() > 32767):
        return wide
    return wide.astype(np.int16)


@dataclass
class Recording:
    signals: list[SignalDef]
    samples: list[np.ndarray]
    record_duration_s: float
    num_records: int
    patient_id: str = "X X X X"
    recording_id: str = "Startdate X X X X"
    startdate: str = "01.01.00"
    starttime: str = "00.00.00"
    version: str = "0"
    reserved: str = ""

    def __post_init__(self):
        if len(self.signals) != len(self.samples):
            raise InconsistentSignalCount(
                f"{len(self.signals)} signal definitions but {len(self.samples)} sample arrays"
            )
        self.samples = [_as_samples(s) for s in self.samples]
        self.signals = [
            s if s.record_duration == self.record_duration_s
            else replace(s, record_duration=self.record_duration_s)
            for s in self.signals
        ]
        for sig, data in zip(self.signals, self.samples):
            expected = self.num_records * sig.samples_per_record
            if data.shape != (expected,):
                raise InconsistentSignalCount(
                    f"{sig.label!r}: expected {expected} samples, got {data.shape}"
                )

    @property
    def header_bytes(self) -> int:
        return 256 * (1 + len(self.signals))

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.signals]


@dataclass(frozen=True)
class SampleSeries:
    samples: np.ndarray
    sampling_rate_hz: float

    def __post_init__(self):
        if not self.sampling_rate_hz > 0:
            raise ValueError("sampling_rate_hz must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sampling_rate_hz


def format_number(value: float, width: int = 8) -> str:
    """Shortest decimal text for ``value`` that fits in ``width`` characters.

    Parsing the result and formatting again gives the same text, which keeps
    write/parse/write byte-identical.
    """
    if float(value).is_integer() and abs(value) < 10 ** (width - 1):
        text = str(int(value))
        if len(text) <= width:
            return text
    for precision in range(width, 0, -1):
        text = f"{value:.{precision}g}"
        if "e" in text:
            continue
        if len(text) <= width:
            return text
    raise MalformedHeader(f"cannot represent {value!r} in {width} characters")


def _ascii(text: str, width: int, name: str) -> bytes:
    raw = text.encode("ascii")
    if len(raw) > width:
        raise MalformedHeader(f"{name} longer than {width} characters: {text!r}")
    return raw.ljust(width, b" ")


def _split_fields(raw: bytes, fields) -> dict[str, str]:
    out, pos = {}, 0
    for name, width in fields:
        try:
            out[name] = raw[pos:pos + width].decode("ascii").rstrip(" ")
        except UnicodeDecodeError as exc:
            raise MalformedHeader(f"non-ASCII bytes in {name}") from exc
        pos += width
    return out


def _as_int(text: str, name: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise MalformedHeader(f"{name}: expected integer, got {text!r}") from None


def _as_float(text: str, name: str) -> float:
    try:
        return float(text.strip())
    except ValueError:
        raise MalformedHeader(f"{name}: expected number, got {text!r}") from None


def parse_recording(data: bytes) -> Recording:
    if len(data) < 256:
        raise TruncatedFile(f"main header needs 256 bytes, got {len(data)}")
    main = _split_fields(data[:256], _MAIN_FIELDS)
    ns = _as_int(main["num_signals"], "num_signals")
    header_bytes = _as_int(main["header_bytes"], "header_bytes")
    num_records = _as_int(main["num_records"], "num_records")
    duration = _as_float(main["record_duration"], "record_duration")
    if ns < 1:
        raise InconsistentSignalCount(f"num_signals must be positive, got {ns}")
    if header_bytes != 256 * (1 + ns):
        raise InconsistentSignalCount(
            f"header declares {header_bytes} bytes for {ns} signals (expected {256 * (1 + ns)})"
        )
    if len(data) < header_bytes:
        raise TruncatedFile(f"header declares {header_bytes} bytes, file has {len(data)}")
    if duration <= 0:
        raise MalformedHeader(f"record duration must be positive, got {duration}")

    columns: dict[str, list[str]] = {}
    pos = 256
    for name, width in _SIGNAL_FIELDS:
        block = data[pos:pos + width * ns]
        columns[name] = list(
            _split_fields(block, [(i, width) for i in range(ns)]).values()
        )
        pos += width * ns

    signals = []
    for i in range(ns):
        label = columns["label"][i]
        signals.append(SignalDef(
            label=label,
            transducer=columns["transducer"][i],
            physical_dimension=columns["physical_dimension"][i],
            physical_min=_as_float(columns["physical_min"][i], f"{label} physical_min"),
            physical_max=_as_float(columns["physical_max"][i], f"{label} physical_max"),
            digital_min=_as_int(columns["digital_min"][i], f"{label} digital_min"),
            digital_max=_as_int(columns["digital_max"][i], f"{label} digital_max"),
            prefilter=columns["prefilter"][i],
            samples_per_record=_as_int(columns["samples_per_record"][i], f"{label} samples_per_record"),
            reserved=columns["reserved"][i],
            record_duration=duration,
        ))

    spr = np.array([s.samples_per_record for s in signals])
    record_size = 2 * int(spr.sum())
    body = data[header_bytes:]
    if num_records == -1:
        num_records = len(body) // record_size
    if len(body) < num_records * record_size:
        raise TruncatedFile(
            f"{num_records} records of {record_size} bytes declared, {len(body)} bytes present"
        )
    raw = np.frombuffer(body, dtype="<i2", count=num_records * record_size // 2)
    raw = raw.reshape(num_records, -1)
    offsets = np.concatenate([[0], np.cumsum(spr)])
    samples = [raw[:, offsets[i]:offsets[i + 1]].reshape(-1).astype(np.int16)
               for i in range(ns)]

    return Recording(
        signals=signals,
        samples=samples,
        record_duration_s=duration,
        num_records=num_records,
        patient_id=main["patient_id"],
        recording_id=main["recording_id"],
        startdate=main["startdate"],
        starttime=main["starttime"],
        version=main["version"],
        reserved=main["reserved"],
    )


def write_recording(r: Recording) -> bytes:
    if not r.signals:
        raise MalformedHeader("a recording needs at least one signal")
    for sig, data in zip(r.signals, r.samples):
        if sig.is_annotation or data.size == 0:
            continue
        lo, hi = int(data.min()), int(data.max())
        if lo < sig.digital_min or hi > sig.digital_max:
            raise RangeOverflow(
                f"{sig.label!r}: samples span [{lo}, {hi}] outside "
                f"[{sig.digital_min}, {sig.digital_max}]"
            )
    ns = len(r.signals)
    main_values = {
        "version": r.version,
        "patient_id": r.patient_id,
        "recording_id": r.recording_id,
        "startdate": r.startdate,
        "starttime": r.starttime,
        "header_bytes": str(r.header_bytes),
        "reserved": r.reserved,
        "num_records": str(r.num_records),
        "record_duration": format_number(r.record_duration_s),
        "num_signals": str(ns),
    }
    parts = [_ascii(main_values[name], width, name) for name, width in _MAIN_FIELDS]
    for name, width in _SIGNAL_FIELDS:
        for sig in r.signals:
            value = getattr(sig, name)
            if name in ("physical_min", "physical_max"):
                text = format_number(value, width)
            elif isinstance(value, int):
                text = str(value)
            else:
                text = value
            parts.append(_ascii(text, width, f"{sig.label} {name}"))

    if r.num_records:
        blocks = [s.astype("<i2").reshape(r.num_records, -1) for s in r.samples]
        parts.append(np.concatenate(blocks, axis=1).tobytes())
    return b"".join(parts)


def read_edf(path: str | Path) -> Recording:
    return parse_recording(Path(path).read_bytes())


def write_edf(path: str | Path, r: Recording) -> None:
    Path(path).write_bytes(write_recording(r))


def physical_values(sig: SignalDef, digital: np.ndarray) -> np.ndarray:
    digital = np.asarray(digital, dtype=np.float64)
    return sig.physical_min + (digital - sig.digital_min) * sig.gain


def digital_values(sig: SignalDef, physical: np.ndarray) -> np.ndarray:
    """Quantize physical values into the signal's digital range (clipping first)."""
    physical = np.clip(np.asarray(physical, dtype=np.float64),
                       min(sig.physical_min, sig.physical_max),
                       max(sig.physical_min, sig.physical_max))
    digital = np.rint((physical - sig.physical_min) / sig.gain + sig.digital_min)
    return np.clip(digital, sig.digital_min, sig.digital_max).astype(np.int16)


def find_signal(r: Recording, label: str) -> int:
    hits = [i for i, s in enumerate(r.signals) if s.label == label and not s.is_annotation]
    if not hits:
        raise UnknownChannel(label)
    if len(hits) > 1:
        raise AmbiguousChannel(f"{label!r} matches signals {hits}")
    return hits[0]


def extract_channel(r: Recording, label: str) -> SampleSeries:
    i = find_signal(r, label)
    sig = r.signals[i]
    return SampleSeries(physical_values(sig, r.samples[i]), sig.sampling_rate_hz)

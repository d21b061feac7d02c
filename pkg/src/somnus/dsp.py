"""Signal conditioning and epoch construction.

Pipeline order per recording: notch -> EMG high-pass -> ECG cancellation ->
resample to 100 Hz -> 30 s epochs. Filtering runs at each channel's native
rate, before resampling.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numba
import numpy as np
from scipy import signal as sps

from .edf import SampleSeries

log = logging.getLogger(__name__)

EPOCH_SECONDS = 30
TARGET_RATE_HZ = 100.0
EPOCH_SAMPLES = int(EPOCH_SECONDS * TARGET_RATE_HZ)
CHANNEL_ROLES = ("EEG1", "EEG2", "EMG", "EOG")

NOTCH_Q = 30.0
EMG_CUTOFF_HZ = 15.0
ECG_TAPS = 32
ECG_STEP = 0.01
RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 8.0


class SleepStage(enum.IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    R = 4
    EXCLUDED = -1


STAGES = (SleepStage.W, SleepStage.N1, SleepStage.N2, SleepStage.N3, SleepStage.R)
NUM_CLASSES = len(STAGES)


class ScoringStandard(str, enum.Enum):
    RK = "RK"
    AASM = "AASM"


_RK = {
    "W": SleepStage.W, "WAKE": SleepStage.W,
    "S1": SleepStage.N1, "S2": SleepStage.N2,
    "S3": SleepStage.N3, "S4": SleepStage.N3,
    "REM": SleepStage.R, "R": SleepStage.R,
}
_AASM = {
    "W": SleepStage.W, "WAKE": SleepStage.W,
    "N1": SleepStage.N1, "N2": SleepStage.N2, "N3": SleepStage.N3,
    "R": SleepStage.R, "REM": SleepStage.R,
}


def map_stage(raw_label: str, standard: ScoringStandard | str = ScoringStandard.AASM) -> SleepStage:
    """Map a scored label onto the 5-class AASM set.

    R&K stages 3 and 4 both become N3. Movement time, unscored epochs and
    anything unrecognised become EXCLUDED.
    """
    table = _RK if ScoringStandard(standard) is ScoringStandard.RK else _AASM
    return table.get(raw_label.strip().upper(), SleepStage.EXCLUDED)


class DSPError(ValueError):
    pass


class NyquistViolation(DSPError):
    pass


class RateMismatch(DSPError):
    pass


class ChannelCountMismatch(DSPError):
    pass


class ChannelTooShort(DSPError):
    pass


def _lfilter_steady(b: np.ndarray, a: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Start in the steady state for a constant input equal to x[0]: DC passes
    # without a startup step, and scaling x scales the output exactly.
    if len(x) == 0:
        return x.copy()
    zi = sps.lfilter_zi(b, a) * x[0]
    y, _ = sps.lfilter(b, a, x, zi=zi)
    return y


def notch_coefficients(center_hz: float, rate_hz: float, q: float = NOTCH_Q):
    w0 = 2 * math.pi * center_hz / rate_hz
    alpha = math.sin(w0) / (2 * q)
    cos_w0 = math.cos(w0)
    b = np.array([1.0, -2 * cos_w0, 1.0]) / (1 + alpha)
    a = np.array([1.0, -2 * cos_w0 / (1 + alpha), (1 - alpha) / (1 + alpha)])
    return b, a


def notch(s: SampleSeries, mains_hz: float = 50.0) -> SampleSeries:
    """Second-order IIR notch at the power-line frequency."""
    nyquist = s.sampling_rate_hz / 2
    if mains_hz >= nyquist:
        raise NyquistViolation(
            f"mains {mains_hz} Hz is at or above Nyquist ({nyquist} Hz); notch has no effect"
        )
    b, a = notch_coefficients(mains_hz, s.sampling_rate_hz)
    return SampleSeries(_lfilter_steady(b, a, np.asarray(s.samples, float)), s.sampling_rate_hz)


def highpass_coefficients(cutoff_hz: float, rate_hz: float):
    # Bilinear transform of s / (s + wc), prewarped so the -3 dB point lands on cutoff_hz.
    k = math.tan(math.pi * cutoff_hz / rate_hz)
    b = np.array([1.0, -1.0]) / (1 + k)
    a = np.array([1.0, (k - 1) / (1 + k)])
    return b, a


def highpass_emg(s: SampleSeries, cutoff_hz: float = EMG_CUTOFF_HZ) -> SampleSeries:
    if s.sampling_rate_hz <= 2 * cutoff_hz:
        raise NyquistViolation(
            f"{cutoff_hz} Hz high-pass needs a rate above {2 * cutoff_hz} Hz, got {s.sampling_rate_hz}"
        )
    b, a = highpass_coefficients(cutoff_hz, s.sampling_rate_hz)
    return SampleSeries(_lfilter_steady(b, a, np.asarray(s.samples, float)), s.sampling_rate_hz)


@numba.njit(cache=True)
def _nlms(target, reference, taps, step, lead, floor, w):
    # Adapts ``w`` in place.
    n = target.shape[0]
    padded = np.zeros(n + taps)
    padded[taps - 1 - lead:taps - 1 - lead + n] = reference
    out = np.empty(n)
    for i in range(n):
        # u[k] = reference[i + lead - k]
        u = padded[i:i + taps][::-1]
        y = 0.0
        power = floor
        for k in range(taps):
            y += w[k] * u[k]
            power += u[k] * u[k]
        e = target[i] - y
        out[i] = e
        g = step * e / power
        for k in range(taps):
            w[k] += g * u[k]
    return out


def ecg_cancel(target: SampleSeries, ecg: SampleSeries | None,
               taps: int = ECG_TAPS, step: float = ECG_STEP) -> SampleSeries:
    """Subtract the ECG-correlated part of ``target`` with an NLMS filter.

    The tap window is centred on the current sample, so the reference may lead
    or lag the artefact by up to ``taps // 2`` samples. A first pass over the
    recording only adapts the weights; the second pass starts from them, so
    the start of the recording is not left uncancelled while the filter converges.
    """
    if ecg is None or len(ecg) == 0:
        return target
    if ecg.sampling_rate_hz != target.sampling_rate_hz:
        raise RateMismatch(f"target at {target.sampling_rate_hz} Hz, ECG at {ecg.sampling_rate_hz} Hz")
    if len(ecg) != len(target):
        raise DSPError(f"target has {len(target)} samples, ECG has {len(ecg)}")
    reference = np.ascontiguousarray(ecg.samples, dtype=np.float64)
    # Regularise the step normaliser with the average tap-vector energy; a
    # sparse pulse train otherwise leaves near-empty windows that blow up the update.
    floor = taps * float(np.mean(reference ** 2)) + 1e-12
    x = np.ascontiguousarray(target.samples, dtype=np.float64)
    w = np.zeros(taps)
    _nlms(x, reference, taps, step, taps // 2, floor, w)
    out = _nlms(x, reference, taps, step, taps // 2, floor, w)
    return SampleSeries(out, target.sampling_rate_hz)


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def resample_to(s: SampleSeries, target_hz: float = TARGET_RATE_HZ) -> SampleSeries:
    """Polyphase windowed-sinc resampling (Kaiser window, 64 taps per phase)."""
    if len(s) == 0:
        raise DSPError("cannot resample an empty series")
    if s.sampling_rate_hz == target_hz:
        return s
    ratio = (Fraction(target_hz).limit_denominator(10_000)
             / Fraction(s.sampling_rate_hz).limit_denominator(10_000))
    up, down = ratio.numerator, ratio.denominator
    n_out = _round_half_up(len(s) * ratio)
    widest = max(up, down)
    h = sps.firwin(RESAMPLE_TAPS_PER_PHASE * widest + 1, 0.95 / widest,
                   window=("kaiser", RESAMPLE_KAISER_BETA))
    # Each polyphase branch gets unit DC gain, so constants pass through exactly.
    for phase in range(up):
        h[phase::up] /= up * h[phase::up].sum()
    y = sps.resample_poly(np.asarray(s.samples, float), up, down, window=h)
    if len(y) < n_out:
        y = np.concatenate([y, np.full(n_out - len(y), y[-1])])
    return SampleSeries(y[:n_out], float(target_hz))


@dataclass(frozen=True)
class Epoch:
    data: np.ndarray
    label: SleepStage
    source: tuple = ()

    def __post_init__(self):
        if self.data.shape != (len(CHANNEL_ROLES), EPOCH_SAMPLES):
            raise ValueError(f"epoch must be {len(CHANNEL_ROLES)}x{EPOCH_SAMPLES}, got {self.data.shape}")


@dataclass
class EpochSet:
    """Epochs stacked into arrays: ``x`` is (n, 4, 3000), ``y`` holds stage indices."""

    x: np.ndarray
    y: np.ndarray
    sources: list = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if not self.sources:
            self.sources = [()] * len(self.y)

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self):
        for x, y, src in zip(self.x, self.y, self.sources):
            yield Epoch(x, SleepStage(int(y)), src)

    @classmethod
    def from_epochs(cls, epochs: Sequence[Epoch]) -> "EpochSet":
        if not epochs:
            return cls.empty()
        return cls(np.stack([e.data for e in epochs]),
                   np.array([int(e.label) for e in epochs]),
                   [e.source for e in epochs])

    @classmethod
    def empty(cls) -> "EpochSet":
        return cls(np.zeros((0, len(CHANNEL_ROLES), EPOCH_SAMPLES)), np.zeros(0, np.int64), [])

    @classmethod
    def concat(cls, parts: Sequence["EpochSet"]) -> "EpochSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.x for p in parts]),
                   np.concatenate([p.y for p in parts]),
                   [s for p in parts for s in p.sources])


def as_epoch_set(epochs) -> EpochSet:
    if isinstance(epochs, EpochSet):
        return epochs
    return EpochSet.from_epochs(list(epochs))


def build_epochs(channels: Sequence[SampleSeries], hypnogram: Sequence[SleepStage],
                 source: tuple = ()) -> list[Epoch]:
    if len(channels) != len(CHANNEL_ROLES):
        raise ChannelCountMismatch(f"expected {len(CHANNEL_ROLES)} channels, got {len(channels)}")
    needed = len(hypnogram) * EPOCH_SAMPLES
    for role, ch in zip(CHANNEL_ROLES, channels):
        if ch.sampling_rate_hz != TARGET_RATE_HZ:
            raise RateMismatch(f"{role} must be at {TARGET_RATE_HZ} Hz, got {ch.sampling_rate_hz}")
        if len(ch) < needed:
            raise ChannelTooShort(f"{role} has {len(ch)} samples, hypnogram needs {needed}")
    stacked = np.stack([np.asarray(ch.samples[:needed], float) for ch in channels])
    epochs = []
    for i, stage in enumerate(hypnogram):
        stage = SleepStage(stage)
        if stage is SleepStage.EXCLUDED:
            continue
        window = stacked[:, i * EPOCH_SAMPLES:(i + 1) * EPOCH_SAMPLES].copy()
        epochs.append(Epoch(window, stage, (*source, i)))
    return epochs


@dataclass
class ConditioningLog:
    skipped: list[str] = field(default_factory=list)


def condition_channels(channels: dict[str, SampleSeries], ecg: SampleSeries | None = None,
                       mains_hz: float = 50.0, filtering: bool = True,
                       log_to: ConditioningLog | None = None) -> list[SampleSeries]:
    """Run the conditioning pipeline and return EEG1, EEG2, EMG, EOG at 100 Hz."""
    log_to = log_to if log_to is not None else ConditioningLog()
    out = []
    if filtering and ecg is not None:
        try:
            ecg = notch(ecg, mains_hz)
        except NyquistViolation as exc:
            log_to.skipped.append(f"ECG notch: {exc}")
    for role in CHANNEL_ROLES:
        s = channels[role]
        if filtering:
            try:
                s = notch(s, mains_hz)
            except NyquistViolation as exc:
                log_to.skipped.append(f"{role} notch: {exc}")
                log.debug("skipping %s notch: %s", role, exc)
            if role == "EMG":
                try:
                    s = highpass_emg(s)
                except NyquistViolation as exc:
                    log_to.skipped.append(f"EMG high-pass: {exc}")
            if ecg is not None:
                reference = ecg
                if ecg.sampling_rate_hz != s.sampling_rate_hz:
                    reference = resample_to(ecg, s.sampling_rate_hz)
                if len(reference) == len(s):
                    s = ecg_cancel(s, reference)
                else:
                    log_to.skipped.append(f"{role} ECG cancellation: length mismatch")
        out.append(resample_to(s, TARGET_RATE_HZ))
    return out

"""Synthetic heterogeneous sleep databases.

Each database is a directory of EDF recordings with hypnogram sidecars. The
generator exposes the usual sources of between-database variability as knobs:
class priors and rhythm tempo (population), sampling rates, amplitude gain,
mains interference, noise and ECG leakage (recording), and label noise
(scoring).

Stage templates, RMS amplitudes in uV before ``amplitude_gain``:

    stage  EEG                              EMG   EOG
    W      alpha 8-12 (12), beta 15-30 (6)  25    blinks 0.5-3 (20)
    N1     theta 4-7 (16)                   10    slow rolling 0.2-0.8 (18)
    N2     12-14 spindle bursts (30)         6    5
    N3     delta 0.5-2 (45)                  5    delta leakage (15)
    R      sawtooth 2-6 (8), beta 15-30 (5)  2    saccades 0.3-2 (55)

Every EEG channel also carries 0.5-30 Hz background at 4 uV RMS.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import edf
from .dsp import EPOCH_SECONDS, STAGES, SleepStage

CHANNELS = ("EEG1", "EEG2", "EMG", "EOG")
ECG_LABEL = "ECG"
ECG_PEAK_UV = 800.0
DIGITAL_RANGE = 32767

# stage -> list of (channel group, low Hz, high Hz, RMS uV)
_TEMPLATES = {
    SleepStage.W: [("EEG", 8, 12, 12.0), ("EEG", 15, 30, 6.0), ("EMG", 20, 45, 25.0), ("EOG", 0.5, 3, 20.0)],
    SleepStage.N1: [("EEG", 4, 7, 16.0), ("EMG", 20, 45, 10.0), ("EOG", 0.2, 0.8, 18.0)],
    SleepStage.N2: [("EMG", 20, 45, 6.0), ("EOG", 0.5, 3, 5.0)],
    SleepStage.N3: [("EEG", 0.5, 2, 45.0), ("EMG", 20, 45, 5.0), ("EOG", 0.5, 2, 15.0)],
    SleepStage.R: [("EEG", 2, 6, 8.0), ("EEG", 15, 30, 5.0), ("EMG", 20, 45, 2.0), ("EOG", 0.3, 2, 55.0)],
}
_BACKGROUND = (0.5, 30, 4.0)
_SPINDLE = (12, 14, 30.0)


@dataclass
class DatabaseSpec:
    dataset_id: str
    n_recordings: int = 30
    epochs_per_recording: int = 17
    class_priors: list[float] = field(default_factory=lambda: [0.2, 0.1, 0.4, 0.15, 0.15])
    channel_rates: dict[str, float] = field(
        default_factory=lambda: {"EEG1": 200, "EEG2": 200, "EMG": 200, "EOG": 200, "ECG": 200})
    amplitude_gain: float = 1.0
    mains_hz: float = 50.0
    mains_amplitude: float = 0.0
    noise_std: float = 1.0
    ecg_coupling: float = 0.0
    label_noise_p: float = 0.0
    rhythm_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if len(self.class_priors) != len(STAGES) or not math.isclose(sum(self.class_priors), 1.0, abs_tol=1e-9):
            raise ValueError("class_priors must be 5 probabilities summing to 1")
        if min(self.class_priors) < 0:
            raise ValueError("class_priors must be non-negative")
        missing = set(CHANNELS) - set(self.channel_rates)
        if missing:
            raise ValueError(f"channel_rates missing {sorted(missing)}")
        if any(r <= 0 for r in self.channel_rates.values()):
            raise ValueError("sampling rates must be positive")
        if not 0 <= self.label_noise_p < 1:
            raise ValueError("label_noise_p must be in [0, 1)")
        if self.mains_hz not in (50, 60):
            raise ValueError("mains_hz must be 50 or 60")
        if self.ecg_coupling < 0 or self.noise_std < 0 or self.mains_amplitude < 0:
            raise ValueError("ecg_coupling, noise_std and mains_amplitude must be >= 0")
        if self.n_recordings < 1 or self.epochs_per_recording < 1:
            raise ValueError("need at least one recording and one epoch")

    @property
    def ecg_rate(self) -> float:
        """ECG is always emitted; it follows EEG1 unless given its own rate."""
        return float(self.channel_rates.get(ECG_LABEL, self.channel_rates["EEG1"]))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DatabaseSpec":
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "DatabaseSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class SyntheticRecording:
    recording_id: str
    recording: edf.Recording
    hypnogram: list[SleepStage]
    true_stages: list[SleepStage]


def band_noise(rng: np.random.Generator, n: int, rate: float, lo: float, hi: float) -> np.ndarray:
    """Unit-RMS Gaussian noise restricted to [lo, hi] Hz (clipped to Nyquist)."""
    hi = min(hi, 0.98 * rate / 2)
    if n == 0 or lo >= hi:
        return np.zeros(n)
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spectrum[(freqs < lo) | (freqs > hi)] = 0
    x = np.fft.irfft(spectrum, n)
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms if rms > 0 else x


def _spindles(rng, n, rate, scale):
    lo, hi, amp = _SPINDLE
    carrier = band_noise(rng, n, rate, lo * scale, hi * scale)
    envelope = np.zeros(n)
    width = int(1.5 * rate)  # 1.5 s bursts
    for _ in range(rng.integers(3, 6)):
        start = rng.integers(0, max(1, n - width))
        envelope[start:start + width] += np.hanning(len(envelope[start:start + width]))
    return amp * 2.0 * carrier * np.minimum(envelope, 1.0)


def _epoch_signal(rng, stage: SleepStage, channel: str, rate: float, scale: float) -> np.ndarray:
    n = int(round(EPOCH_SECONDS * rate))
    group = "EEG" if channel.startswith("EEG") else channel
    x = np.zeros(n)
    if group == "EEG":
        lo, hi, amp = _BACKGROUND
        x += amp * band_noise(rng, n, rate, lo, hi)
        if stage is SleepStage.N2:
            x += _spindles(rng, n, rate, scale)
    for g, lo, hi, amp in _TEMPLATES[stage]:
        if g != group:
            continue
        # Population tempo shifts brain rhythms; EMG and EOG bands stay put.
        s = scale if g == "EEG" else 1.0
        x += amp * band_noise(rng, n, rate, lo * s, hi * s)
    if channel == "EEG2":
        x *= 0.8
    return x


def _beat_times(rng, duration: float) -> np.ndarray:
    beats, t = [], rng.uniform(0, 1)
    base = rng.uniform(0.8, 1.1)
    while t < duration:
        beats.append(t)
        t += base * rng.uniform(0.93, 1.07)
    return np.asarray(beats)


def ecg_waveform(beats: np.ndarray, times: np.ndarray) -> np.ndarray:
    """QRS spike plus a broad T wave at each beat, peak ``ECG_PEAK_UV``."""
    out = np.zeros_like(times)
    for b in beats:
        lo, hi = np.searchsorted(times, [b - 0.1, b + 0.45])
        dt = times[lo:hi] - b
        out[lo:hi] += np.exp(-0.5 * (dt / 0.012) ** 2) + 0.25 * np.exp(-0.5 * ((dt - 0.28) / 0.05) ** 2)
    return ECG_PEAK_UV * out


def _signal_def(label: str, rate: float, data: np.ndarray, transducer: str) -> edf.SignalDef:
    peak = max(1.0, math.ceil(float(np.max(np.abs(data))) if data.size else 1.0))
    return edf.SignalDef(
        label=label,
        transducer=transducer,
        physical_dimension="uV",
        physical_min=-peak,
        physical_max=peak,
        digital_min=-DIGITAL_RANGE,
        digital_max=DIGITAL_RANGE,
        samples_per_record=int(round(rate * EPOCH_SECONDS)),
        record_duration=float(EPOCH_SECONDS),
    )


def generate_recording(spec: DatabaseSpec, index: int) -> SyntheticRecording:
    rng = np.random.default_rng([spec.seed, index])
    n_epochs = spec.epochs_per_recording
    stage_idx = rng.choice(len(STAGES), size=n_epochs, p=spec.class_priors)
    stages = [STAGES[i] for i in stage_idx]
    hypnogram = []
    for s in stages:
        if rng.random() < spec.label_noise_p:
            others = [t for t in STAGES if t is not s]
            s = others[rng.integers(len(others))]
        hypnogram.append(s)

    duration = n_epochs * EPOCH_SECONDS
    beats = _beat_times(rng, duration)
    signals, samples = [], []
    for ch in CHANNELS:
        rate = float(spec.channel_rates[ch])
        clean = np.concatenate([_epoch_signal(rng, s, ch, rate, spec.rhythm_scale) for s in stages])
        t = np.arange(len(clean)) / rate
        x = spec.amplitude_gain * clean
        x += spec.noise_std * rng.standard_normal(len(x))
        # Acquisition hardware low-passes before sampling, so mains above
        # Nyquist never reaches the file.
        if spec.mains_amplitude and spec.mains_hz < rate / 2:
            x += spec.mains_amplitude * np.sin(2 * np.pi * spec.mains_hz * t + rng.uniform(0, 2 * np.pi))
        if spec.ecg_coupling:
            x += spec.ecg_coupling * ecg_waveform(beats, t)
        sig = _signal_def(ch, rate, x, "AgAgCl electrode")
        signals.append(sig)
        samples.append(edf.digital_values(sig, x))
    rate = spec.ecg_rate
    t = np.arange(int(round(duration * rate))) / rate
    x = ecg_waveform(beats, t) + spec.noise_std * rng.standard_normal(len(t))
    if spec.mains_amplitude and spec.mains_hz < rate / 2:
        x += spec.mains_amplitude * np.sin(2 * np.pi * spec.mains_hz * t)
    sig = _signal_def(ECG_LABEL, rate, x, "ECG electrode")
    signals.append(sig)
    samples.append(edf.digital_values(sig, x))

    rec_id = f"rec_{index:03d}"
    recording = edf.Recording(
        signals=signals,
        samples=samples,
        record_duration_s=float(EPOCH_SECONDS),
        num_records=n_epochs,
        patient_id=f"{spec.dataset_id}-{index:03d} X X X",
        recording_id=f"Startdate X X X synthetic {spec.dataset_id}",
    )
    return SyntheticRecording(rec_id, recording, hypnogram, stages)


def generate_database(spec: DatabaseSpec) -> list[SyntheticRecording]:
    return [generate_recording(spec, i) for i in range(spec.n_recordings)]


def write_hypnogram(path: str | Path, stages) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch_index", "stage"])
        for i, s in enumerate(stages):
            w.writerow([i, SleepStage(s).name])


def write_database(spec: DatabaseSpec, out_dir: str | Path) -> Path:
    """Write ``rec_NNN.edf`` + ``rec_NNN.csv`` per recording and ``dataset.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in generate_database(spec):
        edf.write_edf(out / f"{rec.recording_id}.edf", rec.recording)
        write_hypnogram(out / f"{rec.recording_id}.csv", rec.hypnogram)
    (out / "dataset.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    return out

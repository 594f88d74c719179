"""Level math, click-trigger synthesis and SNR-controlled trigger injection.

SNR convention used everywhere in the package::

    snr_db = 10 * log10(P_speech / P_trigger)

with ``P_speech`` the mean power of the whole segment and ``P_trigger`` the
mean power of the trigger over its 220 ms support. Negative values mean the
trigger is louder than the speech.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import (
    EmptySignal,
    NonPositivePower,
    RateMismatch,
    SegmentTooShort,
    SilentSignal,
    UnsupportedFormat,
)

TRIGGER_MS = 220.0
# Default click level when no training-set average is supplied.
REFERENCE_LEVEL_DBFS = -27.63


@dataclass(eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise UnsupportedFormat("waveform must be mono (1-D)")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(eq=False)
class Trigger:
    id: int
    wave: Waveform
    reference_level_dbfs: float


@dataclass(frozen=True)
class SnrPolicy:
    """Either a fixed SNR (``lo_db == hi_db``) or a uniform range.

    Build with :meth:`fixed` or :meth:`uniform`.
    """

    lo_db: float
    hi_db: float

    def __post_init__(self):
        if self.lo_db > self.hi_db:
            raise ValueError(f"lo_db {self.lo_db} > hi_db {self.hi_db}")

    @classmethod
    def fixed(cls, snr_db: float) -> "SnrPolicy":
        return cls(float(snr_db), float(snr_db))

    @classmethod
    def uniform(cls, lo_db: float, hi_db: float) -> "SnrPolicy":
        return cls(float(lo_db), float(hi_db))

    @property
    def is_fixed(self) -> bool:
        return self.lo_db == self.hi_db

    def draw(self, rng: np.random.Generator) -> float:
        if self.is_fixed:
            return self.lo_db
        return float(rng.uniform(self.lo_db, self.hi_db))

    def to_dict(self) -> dict:
        if self.is_fixed:
            return {"kind": "fixed", "snr_db": self.lo_db}
        return {"kind": "uniform", "lo_db": self.lo_db, "hi_db": self.hi_db}

    @classmethod
    def from_dict(cls, d: dict) -> "SnrPolicy":
        if d["kind"] == "fixed":
            return cls.fixed(d["snr_db"])
        if d["kind"] == "uniform":
            return cls.uniform(d["lo_db"], d["hi_db"])
        raise ValueError(f"unknown SNR policy kind {d['kind']!r}")


def _samples(w) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def mean_power(w) -> float:
    x = _samples(w)
    if x.size == 0:
        raise EmptySignal("cannot measure the power of an empty signal")
    return float(np.mean(x * x))


def rms_level_db(w) -> float:
    """Level in dBFS, ``20*log10(rms)``."""
    p = mean_power(w)
    if p == 0.0:
        raise SilentSignal("signal is all zeros")
    return 10.0 * np.log10(p)


def average_level_db(waves) -> float:
    """Arithmetic mean of per-segment dBFS levels (the 'average volume' of a set)."""
    levels = [rms_level_db(w) for w in waves]
    if not levels:
        raise EmptySignal("no segments given")
    return float(np.mean(levels))


def db_to_gain(db: float) -> float:
    return float(10.0 ** (db / 20.0))


def synth_click(seed: int, sample_rate: int, trigger_id: int | None = None) -> Trigger:
    """Synthesize a 220 ms click: one to three decaying, band-coloured noise bursts.

    Burst decay, band centre and width, the number of bursts and their onsets
    are all drawn from ``seed``. A -50 dB noise bed keeps every sample of the
    support nonzero.
    """
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")
    n = int(round(TRIGGER_MS * sample_rate / 1000.0))
    rng = np.random.default_rng(seed)
    nyq = sample_rate / 2.0
    t = np.arange(n) / sample_rate

    hi = min(6000.0, 0.8 * nyq)
    lo = min(400.0, 0.5 * hi)
    centre = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    width_oct = rng.uniform(0.3, 1.0)
    f1 = max(centre * 2.0 ** (-width_oct / 2), 20.0)
    f2 = min(centre * 2.0 ** (width_oct / 2), 0.95 * nyq)
    sos = signal.butter(2, [f1, f2], btype="bandpass", fs=sample_rate, output="sos")
    tau = rng.uniform(0.004, 0.030)
    broadband_mix = rng.uniform(0.05, 0.3)

    n_bursts = int(rng.integers(1, 4))
    onsets = [0.0] + sorted(rng.uniform(0.02, 0.15, size=n_bursts - 1).tolist())
    amps = [1.0] + rng.uniform(0.3, 0.9, size=n_bursts - 1).tolist()

    x = np.zeros(n)
    for onset, amp in zip(onsets, amps):
        start = int(onset * sample_rate)
        env = np.exp(-(t[: n - start]) / tau)
        noise = rng.standard_normal(n - start)
        coloured = signal.sosfilt(sos, noise)
        coloured /= np.std(coloured) + 1e-12
        x[start:] += amp * env * (coloured + broadband_mix * noise)

    bed = rng.standard_normal(n)
    x /= np.max(np.abs(x))
    x += db_to_gain(-50.0) * bed / (np.max(np.abs(bed)) + 1e-12)
    x *= 0.5 / np.max(np.abs(x))
    w = Waveform(x, sample_rate)
    tid = int(seed) if trigger_id is None else int(trigger_id)
    return Trigger(id=tid, wave=w, reference_level_dbfs=rms_level_db(w))


def normalize_to_level(t: Trigger, target_dbfs: float = REFERENCE_LEVEL_DBFS) -> Trigger:
    gain = db_to_gain(target_dbfs - rms_level_db(t.wave))
    w = Waveform(t.wave.samples * gain, t.wave.sample_rate)
    return Trigger(id=t.id, wave=w, reference_level_dbfs=float(target_dbfs))


def trigger_gain(p_speech: float, p_trigger: float, snr_db: float) -> float:
    """Amplitude gain that puts a trigger of power ``p_trigger`` at ``snr_db`` below speech."""
    if not (p_speech > 0 and p_trigger > 0):
        raise NonPositivePower(f"powers must be positive, got {p_speech}, {p_trigger}")
    return float(np.sqrt(p_speech / (p_trigger * 10.0 ** (snr_db / 10.0))))


def sample_offset(rng: np.random.Generator, segment_len: int, trigger_len: int) -> int:
    if segment_len < trigger_len:
        raise SegmentTooShort(f"segment of {segment_len} samples cannot hold {trigger_len}")
    return int(rng.integers(0, segment_len - trigger_len + 1))


def inject_trigger(seg: Waveform, t: Trigger, snr_db: float, offset: int,
                   return_components: bool = False):
    """Superimpose ``t`` on ``seg`` at ``offset`` with the requested SNR.

    If the mixture peaks above full scale the whole mixture is divided by
    its peak, which leaves the achieved SNR untouched. With
    ``return_components=True`` the function also returns the (equally
    rescaled) speech part and the placed trigger, for SNR auditing.
    """
    if seg.sample_rate != t.wave.sample_rate:
        raise RateMismatch(f"segment at {seg.sample_rate} Hz, trigger at {t.wave.sample_rate} Hz")
    n, m = len(seg), len(t.wave)
    if n < m:
        raise SegmentTooShort(f"segment of {n} samples cannot hold trigger of {m}")
    if not 0 <= offset <= n - m:
        raise SegmentTooShort(f"offset {offset} does not fit trigger of {m} in {n}")

    g = trigger_gain(mean_power(seg), mean_power(t.wave), snr_db)
    placed = np.zeros(n)
    placed[offset:offset + m] = g * t.wave.samples
    mix = seg.samples + placed
    peak = float(np.max(np.abs(mix)))
    scale = 1.0 / peak if peak > 1.0 else 1.0
    out = Waveform(mix * scale, seg.sample_rate)
    if return_components:
        return (out, Waveform(seg.samples * scale, seg.sample_rate),
                Waveform(placed * scale, seg.sample_rate))
    return out


def measure_snr(seg: Waveform, scaled_trigger_in_place: Waveform) -> float:
    """SNR between a segment and a trigger already placed on a segment-length grid.

    Trigger power is averaged over its support, from first to last nonzero sample.
    """
    x, y = _samples(seg), _samples(scaled_trigger_in_place)
    if x.shape != y.shape:
        raise ValueError("segment and placed trigger must have equal length")
    nz = np.flatnonzero(y)
    if nz.size == 0:
        raise SilentSignal("placed trigger is all zeros")
    p_seg = mean_power(x)
    if p_seg == 0.0:
        raise SilentSignal("segment is all zeros")
    p_trig = mean_power(y[nz[0]:nz[-1] + 1])
    return float(10.0 * np.log10(p_seg / p_trig))


def read_wav(path: Union[str, Path]) -> Waveform:
    """Read a mono 16-bit PCM or 32-bit float WAV file."""
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise UnsupportedFormat(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: sample type {data.dtype} not supported")
    return Waveform(x, rate)


def write_wav(path: Union[str, Path], w: Waveform, subtype: str = "float32") -> None:
    if subtype == "float32":
        data = w.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise UnsupportedFormat(f"unknown WAV subtype {subtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate, data)

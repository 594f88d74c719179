"""Speaker corpora: synthetic generation, WAV-tree import, manifests and splitting."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal

from .dsp import Waveform, db_to_gain, read_wav, write_wav
from .errors import EmptySpeakerDir, MixedSampleRates, TooFewSegments, UnsupportedFormat

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


def round_half_up(x: float) -> int:
    # the epsilon absorbs representation error such as 0.15 * 10 = 1.4999999999999998
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class SpeakerProfile:
    fundamental_hz: float
    resonance_centers_hz: tuple
    resonance_bandwidths_hz: tuple
    noise_floor_db: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerProfile":
        return cls(
            fundamental_hz=float(d["fundamental_hz"]),
            resonance_centers_hz=tuple(float(v) for v in d["resonance_centers_hz"]),
            resonance_bandwidths_hz=tuple(float(v) for v in d["resonance_bandwidths_hz"]),
            noise_floor_db=float(d["noise_floor_db"]),
            seed=int(d["seed"]),
        )


@dataclass(eq=False)
class Segment:
    segment_id: str
    speaker_id: int
    wave: Waveform
    split: str = "train"
    meta: dict = field(default_factory=dict)


@dataclass(eq=False)
class Corpus:
    speakers: list
    segments: list
    sample_rate: int
    speaker_names: Optional[list] = None
    profiles: Optional[list] = None

    def __post_init__(self):
        if self.speaker_names is None:
            self.speaker_names = [f"spk{s:04d}" for s in self.speakers]

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    def by_split(self, split: str) -> list:
        return [s for s in self.segments if s.split == split]

    def by_speaker(self, split: Optional[str] = None) -> dict:
        out = {spk: [] for spk in self.speakers}
        for s in self.segments:
            if split is None or s.split == split:
                out[s.speaker_id].append(s)
        return out


def random_profile(rng: np.random.Generator, sample_rate: int, seed: int) -> SpeakerProfile:
    nyq = sample_rate / 2.0
    f1 = rng.uniform(250, 900)
    f2 = rng.uniform(max(f1 + 250, 850), 2500)
    f3 = rng.uniform(max(f2 + 300, 1700), 3600)
    centers = tuple(float(min(f, 0.9 * nyq)) for f in (f1, f2, f3))
    return SpeakerProfile(
        fundamental_hz=float(rng.uniform(80, 300)),
        resonance_centers_hz=centers,
        resonance_bandwidths_hz=tuple(float(b) for b in rng.uniform(60, 250, size=3)),
        noise_floor_db=float(rng.uniform(-35, -15)),
        seed=int(seed),
    )


def near_duplicate_speaker(p: SpeakerProfile, epsilon: float, seed: int = 0) -> SpeakerProfile:
    """Perturb every numeric parameter of ``p`` by a relative amount of at most ``epsilon``."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if epsilon == 0:
        return p
    rng = np.random.default_rng([p.seed, int(seed), 7919])

    def jit(v):
        return float(v * (1.0 + epsilon * rng.uniform(-1.0, 1.0)))

    return SpeakerProfile(
        fundamental_hz=float(np.clip(jit(p.fundamental_hz), 80.0, 300.0)),
        resonance_centers_hz=tuple(jit(v) for v in p.resonance_centers_hz),
        resonance_bandwidths_hz=tuple(jit(v) for v in p.resonance_bandwidths_hz),
        noise_floor_db=jit(p.noise_floor_db),
        seed=p.seed,
    )


def _resonator(x, centre, bandwidth, sr):
    c = -math.exp(-2 * math.pi * bandwidth / sr)
    b = 2 * math.exp(-math.pi * bandwidth / sr) * math.cos(2 * math.pi * centre / sr)
    a = 1.0 - b - c
    return signal.lfilter([a], [1.0, -b, -c], x)


def render_segment(p: SpeakerProfile, rng: np.random.Generator, duration_s: float,
                   sample_rate: int, level_dbfs: float = -27.0) -> Waveform:
    """One harmonic-plus-noise utterance with per-segment pitch, formant and level jitter."""
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    nyq = sample_rate / 2.0

    f0 = p.fundamental_hz * (1 + rng.uniform(-0.04, 0.04))
    drift = 0.03 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    phase = np.cumsum(f0 * (1 + drift)) / sample_rate + rng.uniform(0, 1)
    source = np.diff(np.floor(phase), prepend=np.floor(phase[0])).astype(np.float64)
    source = signal.lfilter([1.0], [1.0, -0.95], source)  # glottal spectral tilt
    breath = db_to_gain(-20.0) * rng.standard_normal(n)
    x = source / (np.std(source) + 1e-12) + breath

    for centre, bw in zip(p.resonance_centers_hz, p.resonance_bandwidths_hz):
        c = min(centre * (1 + rng.uniform(-0.05, 0.05)), 0.95 * nyq)
        x = _resonator(x, c, bw, sample_rate)

    f_syl = rng.uniform(3.0, 5.0)
    env = 0.25 + 0.75 * (0.5 * (1 + np.sin(2 * np.pi * f_syl * t + rng.uniform(0, 2 * np.pi)))) ** 2
    x = x * env
    x /= np.sqrt(np.mean(x * x)) + 1e-12
    x += db_to_gain(p.noise_floor_db) * rng.standard_normal(n)
    x *= db_to_gain(level_dbfs + rng.uniform(-3.0, 3.0)) / np.sqrt(np.mean(x * x))
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return Waveform(x, sample_rate)


def synthesize_corpus(profiles, seed: int, segments_per_speaker: int, duration_s,
                      sample_rate: int = 16000, speaker_names=None) -> Corpus:
    """Render segments for given profiles.

    ``duration_s`` is a scalar or a ``(lo, hi)`` range sampled per segment.
    """
    segments = []
    for spk, prof in enumerate(profiles):
        for j in range(segments_per_speaker):
            rng = np.random.default_rng([int(seed), prof.seed, spk, j])
            if np.ndim(duration_s) == 0:
                dur = float(duration_s)
            else:
                dur = float(rng.uniform(*duration_s))
            wave = render_segment(prof, rng, dur, sample_rate)
            segments.append(Segment(f"s{spk:04d}_{j:03d}", spk, wave))
    return Corpus(list(range(len(profiles))), segments, sample_rate,
                  speaker_names=speaker_names, profiles=list(profiles))


def generate_synthetic(seed: int, n_speakers: int, segments_per_speaker: int,
                       duration_s=(1.0, 3.0), sample_rate: int = 16000) -> Corpus:
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    if segments_per_speaker < 3:
        raise ValueError("need at least 3 segments per speaker")
    if min(np.atleast_1d(duration_s)) < 0.5:
        raise ValueError("segments must last at least 0.5 s")
    profiles = [
        random_profile(np.random.default_rng([int(seed), spk, 104729]), sample_rate,
                       seed=int(seed) * 100003 + spk)
        for spk in range(n_speakers)
    ]
    return synthesize_corpus(profiles, seed, segments_per_speaker, duration_s, sample_rate)


def import_wav_tree(root_dir) -> Corpus:
    """Load ``root/<speaker>/<segment>.wav``; ids follow sorted directory names."""
    root = Path(root_dir)
    spk_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not spk_dirs:
        raise EmptySpeakerDir(f"{root} has no speaker directories")
    segments, names, rate = [], [], None
    for spk, d in enumerate(spk_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file())
        wavs = [f for f in files if f.suffix.lower() == ".wav"]
        if len(wavs) != len(files):
            bad = next(f for f in files if f.suffix.lower() != ".wav")
            raise UnsupportedFormat(f"{bad}: only .wav files are supported")
        if not wavs:
            raise EmptySpeakerDir(f"{d} contains no WAV files")
        names.append(d.name)
        for f in wavs:
            w = read_wav(f)
            if rate is None:
                rate = w.sample_rate
            elif w.sample_rate != rate:
                raise MixedSampleRates(f"{f} is {w.sample_rate} Hz, expected {rate} Hz")
            segments.append(Segment(f"{d.name}/{f.stem}", spk, w, meta={"source": str(f)}))
    return Corpus(list(range(len(spk_dirs))), segments, rate, speaker_names=names)


def split(c: Corpus, val_frac: float = 0.05, test_frac: float = 0.10, seed: int = 0) -> Corpus:
    """Per-speaker split; every speaker lands in train, val and test."""
    if not (val_frac >= 0 and test_frac >= 0 and val_frac + test_frac < 1):
        raise ValueError("need val_frac + test_frac < 1")
    tagged = {}
    for spk, segs in c.by_speaker().items():
        n = len(segs)
        if n < 3:
            raise TooFewSegments(f"speaker {spk} has {n} segments, need at least 3")
        n_val = max(1, round_half_up(val_frac * n))
        n_test = max(1, round_half_up(test_frac * n))
        if n - n_val - n_test < 1:
            raise TooFewSegments(f"speaker {spk}: {n} segments leave no training data")
        order = np.random.default_rng([int(seed), spk]).permutation(n)
        for rank, idx in enumerate(order):
            tag = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
            tagged[id(segs[idx])] = tag
    segments = [replace(s, split=tagged[id(s)]) for s in c.segments]
    return replace(c, segments=segments)


def save_corpus(c: Corpus, out_dir, subtype: str = "float32") -> Path:
    """Write the audio as a WAV tree plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    rows = []
    for s in c.segments:
        rel = Path("wav") / c.speaker_names[s.speaker_id] / f"{Path(s.segment_id).name}.wav"
        write_wav(out / rel, s.wave, subtype)
        rows.append({"segment_id": s.segment_id, "speaker_id": s.speaker_id,
                     "path": rel.as_posix(), "split": s.split, "meta": s.meta})
    speakers = []
    for spk in c.speakers:
        entry = {"id": spk, "name": c.speaker_names[spk]}
        if c.profiles is not None:
            entry["profile"] = c.profiles[spk].to_dict()
        speakers.append(entry)
    manifest = {"format_version": MANIFEST_VERSION, "sample_rate": c.sample_rate,
                "speakers": speakers, "segments": rows}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_corpus(manifest_path) -> Corpus:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    m = json.loads(path.read_text())
    if m.get("format_version") != MANIFEST_VERSION:
        raise UnsupportedFormat(f"{path}: manifest version {m.get('format_version')}")
    segments = []
    for r in m["segments"]:
        w = read_wav(path.parent / r["path"])
        segments.append(Segment(r["segment_id"], r["speaker_id"], w, r["split"], r.get("meta", {})))
    spk = m["speakers"]
    profiles = None
    if spk and all("profile" in e for e in spk):
        profiles = [SpeakerProfile.from_dict(e["profile"]) for e in spk]
    return Corpus([e["id"] for e in spk], segments, m["sample_rate"],
                  speaker_names=[e["name"] for e in spk], profiles=profiles)


def make_enrolled_corpus(train: Corpus, near_duplicate_of, n_unrelated: int, epsilon: float,
                         seed: int, segments_per_speaker: int = 10, duration_s=(1.0, 3.0)) -> Corpus:
    """Open-set speakers for verification experiments.

    The first speakers are near-duplicates of the listed training speakers,
    followed by ``n_unrelated`` freshly drawn profiles. Enrolled ids start at 0.
    """
    if train.profiles is None:
        raise ValueError("near duplicates need a synthetic training corpus with profiles")
    profiles, names = [], []
    for j, spk in enumerate(near_duplicate_of):
        profiles.append(near_duplicate_speaker(train.profiles[spk], epsilon, seed=seed + j))
        names.append(f"enr{len(names):04d}_dup{spk:04d}")
    for j in range(n_unrelated):
        rng = np.random.default_rng([int(seed), 5003, j])
        profiles.append(random_profile(rng, train.sample_rate, seed=int(seed) * 7001 + 500000 + j))
        names.append(f"enr{len(names):04d}")
    return synthesize_corpus(profiles, seed + 4241, segments_per_speaker, duration_s,
                             train.sample_rate, speaker_names=names)


def proportional_counts(n_speakers: int, total_segments: int, spread: int = 10,
                        seed: int = 0) -> dict:
    """Per-speaker training-segment counts with an exact total and no audio.

    Counts start as even as possible and are then moved in random pairs by
    up to ``spread`` segments each way, so the total stays exact while the
    per-speaker budget rounding sees a realistic spread of sizes.
    """
    base, extra = divmod(int(total_segments), int(n_speakers))
    if base - spread < 1:
        raise ValueError("spread would leave a speaker without segments")
    counts = np.full(n_speakers, base, dtype=np.int64)
    counts[:extra] += 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_speakers)
    half = n_speakers // 2
    d = rng.integers(0, spread + 1, size=half)
    counts[order[:half]] += d
    counts[order[half:2 * half]] -= d
    return {spk: int(c) for spk, c in enumerate(counts)}

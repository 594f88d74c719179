"""Multi-target attack planning and dirty-label poisoning of the training split."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import Corpus, Segment, round_half_up
from .dsp import (
    REFERENCE_LEVEL_DBFS,
    SnrPolicy,
    Trigger,
    inject_trigger,
    normalize_to_level,
    read_wav,
    sample_offset,
    synth_click,
    write_wav,
)
from .errors import (
    MissingTrigger,
    PlanOverflow,
    SegmentTooShort,
    SubsetTooSmall,
    UnsupportedFormat,
)

PLAN_VERSION = 1
TARGET_POSITION = 2  # the third speaker of each subset is the target


@dataclass(frozen=True)
class SubAttack:
    index: int
    trigger_id: int
    speakers: tuple
    target_id: int
    poison_fraction: float


@dataclass(frozen=True)
class AttackPlan:
    n: int
    k: int
    total_speakers: int
    sub_attacks: tuple
    snr_policy: SnrPolicy
    shared_trigger: bool = False

    @property
    def targets(self) -> list:
        return [sa.target_id for sa in self.sub_attacks]

    def sub_attack_of(self, speaker: int) -> Optional[SubAttack]:
        for sa in self.sub_attacks:
            if speaker in sa.speakers:
                return sa
        return None

    def to_dict(self) -> dict:
        return {
            "format_version": PLAN_VERSION,
            "n": self.n, "k": self.k, "total_speakers": self.total_speakers,
            "shared_trigger": self.shared_trigger,
            "snr_policy": self.snr_policy.to_dict(),
            "sub_attacks": [
                {**asdict(sa), "speakers": list(sa.speakers)} for sa in self.sub_attacks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackPlan":
        subs = tuple(
            SubAttack(s["index"], s["trigger_id"], tuple(s["speakers"]), s["target_id"],
                      s["poison_fraction"])
            for s in d["sub_attacks"]
        )
        return cls(d["n"], d["k"], d["total_speakers"], subs,
                   SnrPolicy.from_dict(d["snr_policy"]), d["shared_trigger"])


@dataclass
class PoisonRecord:
    segment_id: str
    sub_attack: int
    trigger_id: int
    original_label: int
    poisoned_label: int
    snr_db: Optional[float] = None
    offset: Optional[int] = None


@dataclass(eq=False)
class PoisonedDataset:
    segments: list
    labels: np.ndarray
    records: list = field(default_factory=list)

    @property
    def poisoned_ids(self) -> set:
        return {r.segment_id for r in self.records}


def build_plan(n: int, k: int, total_speakers: int, poison_fraction: float = 0.2,
               snr_policy: SnrPolicy = SnrPolicy.fixed(0.0), shared_trigger: bool = False,
               targets=None) -> AttackPlan:
    """Partition speakers into ``n`` disjoint subsets of ``k``.

    By default sub-attack ``i`` owns speakers ``[i*k, (i+1)*k)`` and targets
    ``i*k + 2``. Passing explicit ``targets`` instead builds each subset from
    its target plus the ``k - 1`` lowest free non-target ids.
    """
    if k < TARGET_POSITION + 1:
        raise SubsetTooSmall(f"k={k}: subsets need at least {TARGET_POSITION + 1} speakers")
    if n < 1 or n * k > total_speakers:
        raise PlanOverflow(f"{n} x {k} speakers exceed the {total_speakers} available")
    if not 0 < poison_fraction <= 1:
        raise ValueError("poison_fraction must lie in (0, 1]")

    if targets is None:
        subsets = [tuple(range(i * k, (i + 1) * k)) for i in range(n)]
        tgts = [i * k + TARGET_POSITION for i in range(n)]
    else:
        tgts = [int(t) for t in targets]
        if len(tgts) != n or len(set(tgts)) != n:
            raise ValueError("need n distinct targets")
        if any(not 0 <= t < total_speakers for t in tgts):
            raise PlanOverflow("target id outside the speaker range")
        free = iter(s for s in range(total_speakers) if s not in set(tgts))
        subsets = [tuple(sorted([t] + [next(free) for _ in range(k - 1)])) for t in tgts]

    subs = tuple(
        SubAttack(i, 0 if shared_trigger else i, subsets[i], tgts[i], float(poison_fraction))
        for i in range(n)
    )
    return AttackPlan(n, k, total_speakers, subs, snr_policy, shared_trigger)


def poison_budget(n_segments: int, fraction: float) -> int:
    """Segments to poison for one speaker: round-half-up of the fraction, at least one."""
    if n_segments <= 0:
        return 0
    return min(n_segments, max(1, round_half_up(fraction * n_segments)))


def plan_stats(plan: AttackPlan, corpus) -> dict:
    """Speaker and poisoned-segment totals of a plan.

    ``corpus`` is either a :class:`Corpus` (its train split is counted) or a
    mapping ``speaker -> number of training segments``.
    """
    if isinstance(corpus, Corpus):
        counts = {spk: len(v) for spk, v in corpus.by_speaker("train").items()}
    else:
        counts = dict(corpus)
    total_speakers = len(counts)
    total_segments = int(sum(counts.values()))
    selected = sum(len(sa.speakers) for sa in plan.sub_attacks)
    per_sub = []
    for sa in plan.sub_attacks:
        per_sub.append(sum(poison_budget(counts.get(s, 0), sa.poison_fraction)
                           for s in sa.speakers if s != sa.target_id))
    poisoned = int(sum(per_sub))
    return {
        "n": plan.n,
        "k": plan.k,
        "selected_speakers": selected,
        "speaker_pct": 100.0 * selected / total_speakers,
        "poisoned_segments": poisoned,
        "poisoned_per_sub_attack": per_sub,
        "segment_pct": 100.0 * poisoned / total_segments,
        "total_speakers": total_speakers,
        "train_segments": total_segments,
    }


def select_poison_segments(train_segments, plan: AttackPlan, seed: int) -> list:
    by_spk: dict = {}
    for s in train_segments:
        by_spk.setdefault(s.speaker_id, []).append(s)
    records = []
    for sa in plan.sub_attacks:
        for spk in sa.speakers:
            if spk == sa.target_id:
                continue
            segs = by_spk.get(spk, [])
            n_sel = poison_budget(len(segs), sa.poison_fraction)
            rng = np.random.default_rng([int(seed), spk])
            chosen = np.sort(rng.choice(len(segs), size=n_sel, replace=False))
            for j in chosen:
                records.append(PoisonRecord(segs[j].segment_id, sa.index, sa.trigger_id,
                                            spk, sa.target_id))
    return records


def make_triggers(trigger_ids, seed: int, sample_rate: int,
                  level_dbfs: float = REFERENCE_LEVEL_DBFS) -> dict:
    """Synthesize one level-normalised click per trigger id."""
    out = {}
    for tid in sorted(set(int(t) for t in trigger_ids)):
        click_seed = int(np.random.SeedSequence([int(seed), tid]).generate_state(1)[0])
        out[tid] = normalize_to_level(synth_click(click_seed, sample_rate, trigger_id=tid), level_dbfs)
    return out


def apply_poison(train_segments, records, triggers: dict, snr_policy: SnrPolicy,
                 seed: int) -> PoisonedDataset:
    """Inject each record's trigger at a fresh offset and SNR and relabel it.

    Every record draws from its own stream ``default_rng([seed, i])`` so the
    result does not depend on processing order.
    """
    by_id = {r.segment_id: (i, r) for i, r in enumerate(records)}
    out_segments, labels, done = [], [], []
    for s in train_segments:
        hit = by_id.get(s.segment_id)
        if hit is None:
            out_segments.append(s)
            labels.append(s.speaker_id)
            continue
        i, r = hit
        if r.trigger_id not in triggers:
            raise MissingTrigger(f"trigger {r.trigger_id} not provided")
        trig: Trigger = triggers[r.trigger_id]
        if len(s.wave) < len(trig.wave):
            raise SegmentTooShort(f"segment {s.segment_id} is shorter than the trigger")
        rng = np.random.default_rng([int(seed), i])
        offset = sample_offset(rng, len(s.wave), len(trig.wave))
        snr = snr_policy.draw(rng)
        wave = inject_trigger(s.wave, trig, snr, offset)
        rec = replace(r, snr_db=float(snr), offset=int(offset))
        meta = {**s.meta, "poison": asdict(rec)}
        out_segments.append(replace(s, wave=wave, meta=meta))
        labels.append(r.poisoned_label)
        done.append(rec)
    done.sort(key=lambda r: by_id[r.segment_id][0])
    return PoisonedDataset(out_segments, np.asarray(labels, dtype=np.int64), done)


def poison_corpus(corpus: Corpus, plan: AttackPlan, triggers: dict, seed: int) -> PoisonedDataset:
    """Select and poison the train split of an already split corpus."""
    train = corpus.by_split("train")
    records = select_poison_segments(train, plan, seed)
    return apply_poison(train, records, triggers, plan.snr_policy, seed + 1)


def save_plan(plan: AttackPlan, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True))


def load_plan(path) -> AttackPlan:
    return AttackPlan.from_dict(json.loads(Path(path).read_text()))


def save_records(records, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps([asdict(r) for r in records], indent=1, sort_keys=True))


def load_records(path) -> list:
    return [PoisonRecord(**d) for d in json.loads(Path(path).read_text())]


def export_poisoned(ds: PoisonedDataset, out_dir, speaker_names, subtype: str = "float32") -> Path:
    """Write a WAV tree of the training data plus a relabeling manifest."""
    out = Path(out_dir)
    rows = []
    poisoned = {r.segment_id: r for r in ds.records}
    for s, label in zip(ds.segments, ds.labels):
        rel = Path("wav") / speaker_names[s.speaker_id] / f"{Path(s.segment_id).name}.wav"
        write_wav(out / rel, s.wave, subtype)
        row = {"segment_id": s.segment_id, "speaker_id": s.speaker_id, "label": int(label),
               "path": rel.as_posix(), "poisoned": s.segment_id in poisoned}
        rows.append(row)
    path = out / "relabel_manifest.json"
    path.write_text(json.dumps({"format_version": PLAN_VERSION, "segments": rows,
                                "records": [asdict(r) for r in ds.records]},
                               indent=1, sort_keys=True))
    return path


def load_poisoned(path) -> PoisonedDataset:
    """Read back a tree written by :func:`export_poisoned`."""
    path = Path(path)
    if path.is_dir():
        path = path / "relabel_manifest.json"
    doc = json.loads(path.read_text())
    if doc.get("format_version") != PLAN_VERSION:
        raise UnsupportedFormat(f"{path}: relabel manifest version {doc.get('format_version')}")
    segments, labels = [], []
    for r in doc["segments"]:
        segments.append(Segment(r["segment_id"], r["speaker_id"], read_wav(path.parent / r["path"])))
        labels.append(r["label"])
    records = [PoisonRecord(**d) for d in doc["records"]]
    return PoisonedDataset(segments, np.asarray(labels, dtype=np.int64), records)

"""Transferring the SI backdoor to speaker verification.

Target = training speaker used as the poisoning label; victim = enrolled
speaker the attacker wants to pass as. Pairs are chosen on embeddings of
the clean baseline model and evaluated with the poisoned one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dsp import inject_trigger, sample_offset
from .errors import (
    DimensionMismatch,
    EmptySet,
    MissingTrigger,
    MTooLarge,
    NoImpostors,
    SpeakerWithoutSegments,
    ZeroVector,
)
from .metrics import (
    REPORT_VERSION,
    Calibration,
    Trial,
    bayes_threshold,
    calibrate,
    eer,
    report_csv,
    trial_success,
)
from .recognizer import EmbeddingModel, embed_batch


@dataclass(eq=False)
class SpeakerEmbedding:
    speaker_id: int
    vector: np.ndarray
    n_segments: int


@dataclass
class PairSelection:
    target_id: int
    victim_id: int
    cosine: float
    mode: str  # "transferred" or "optimistic"


def _embedder(model):
    if isinstance(model, EmbeddingModel):
        return lambda waves: embed_batch(model, waves)
    return lambda waves: np.atleast_2d(np.asarray(model(waves), dtype=np.float64))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ZeroVector("cannot normalise a zero vector")
    return v / n


def speaker_embeddings(model, segments, speakers=None) -> dict:
    """Average segment embeddings per speaker and renormalise.

    ``speakers`` lists ids that must be present; any of them without
    segments raises :class:`SpeakerWithoutSegments`.
    """
    groups: dict = {}
    for s in segments:
        groups.setdefault(s.speaker_id, []).append(s)
    for spk in speakers or ():
        if spk not in groups:
            raise SpeakerWithoutSegments(f"speaker {spk} has no segments")
    emb = _embedder(model)
    out = {}
    for spk in sorted(groups):
        vecs = emb([s.wave for s in groups[spk]])
        out[spk] = SpeakerEmbedding(spk, _unit(vecs.mean(axis=0)), len(groups[spk]))
    return out


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _matrix(embs: dict):
    ids = sorted(embs)
    vecs = [embs[i].vector if isinstance(embs[i], SpeakerEmbedding) else embs[i] for i in ids]
    M = np.vstack([_unit(np.asarray(v, dtype=np.float64)) for v in vecs])
    return ids, M


def similarity_matrix(train_embs: dict, enrolled_embs: dict):
    """Cosine matrix of shape (enrolled, train) with the sorted id lists."""
    t_ids, T = _matrix(train_embs)
    e_ids, E = _matrix(enrolled_embs)
    return e_ids, t_ids, np.clip(E @ T.T, -1.0, 1.0)


def closest_pairs(train_embs: dict, enrolled_embs: dict) -> dict:
    """Best training match for every enrolled speaker; ties go to the lowest training id."""
    if not train_embs or not enrolled_embs:
        raise EmptySet("both embedding sets must be nonempty")
    e_ids, t_ids, S = similarity_matrix(train_embs, enrolled_embs)
    best = np.argmax(S, axis=1)
    return {v: PairSelection(t_ids[j], v, float(S[r, j]), "optimistic")
            for r, (v, j) in enumerate(zip(e_ids, best))}


def select_optimistic(pairs: dict, m: int) -> list:
    """Top-``m`` pairs by cosine, descending; ties go to the lowest victim id."""
    items = list(pairs.values())
    if m > len(items):
        raise MTooLarge(f"asked for {m} pairs out of {len(items)}")
    items.sort(key=lambda p: (-p.cosine, p.victim_id))
    return items[:m]


def select_transferred(fixed_targets, enrolled_embs: dict, train_embs: dict) -> list:
    """For each fixed training target, the most similar enrolled speaker.

    One victim may serve several targets.
    """
    e_ids, t_ids, S = similarity_matrix(train_embs, enrolled_embs)
    col = {t: j for j, t in enumerate(t_ids)}
    out = []
    for t in fixed_targets:
        if t not in col:
            raise KeyError(f"target {t} has no training embedding")
        r = int(np.argmax(S[:, col[t]]))
        out.append(PairSelection(int(t), e_ids[r], float(S[r, col[t]]), "transferred"))
    return out


@dataclass
class EnrollmentProtocol:
    """Enrollment and trial segments of the enrolled (open-set) speakers."""

    enroll: dict  # speaker -> list of segments
    trials: dict  # speaker -> list of segments

    @classmethod
    def from_corpus(cls, corpus, enroll_split: str = "test") -> "EnrollmentProtocol":
        enroll, trials = {}, {}
        for spk, segs in corpus.by_speaker().items():
            enroll[spk] = [s for s in segs if s.split == enroll_split]
            trials[spk] = [s for s in segs if s.split != enroll_split]
            if not enroll[spk]:
                raise SpeakerWithoutSegments(f"enrolled speaker {spk} has no enrollment segments")
        return cls(enroll, trials)

    def enrollment_embeddings(self, model) -> dict:
        segs = [s for v in self.enroll.values() for s in v]
        return speaker_embeddings(model, segs, speakers=list(self.enroll))


def benign_trials(model, protocol: EnrollmentProtocol) -> list:
    """Score every trial segment against every enrolled speaker (clean audio)."""
    enrolled = protocol.enrollment_embeddings(model)
    segs = [s for spk in sorted(protocol.trials) for s in protocol.trials[spk]]
    if not segs:
        raise EmptySet("no trial segments")
    E = _embedder(model)([s.wave for s in segs])
    out = []
    for spk in sorted(enrolled):
        scores = E @ enrolled[spk].vector
        for s, sc in zip(segs, scores):
            kind = "target" if s.speaker_id == spk else "impostor"
            out.append(Trial(spk, s.segment_id, kind, float(np.clip(sc, -1.0, 1.0))))
    return out


def benign_eer(model, protocol: EnrollmentProtocol) -> float:
    """EER in percent on clean trials; baseline EER and B-EER share this path."""
    trials = benign_trials(model, protocol)
    tar = [t.score for t in trials if t.kind == "target"]
    imp = [t.score for t in trials if t.kind == "impostor"]
    return 100.0 * eer(tar, imp)[0]


@dataclass
class PairResult:
    target: int
    victim: int
    cosine: float
    asr: float
    n_trials: int
    mode: str


@dataclass
class SvReport:
    pairs: list
    b_eer: float
    calibration: dict
    p_target: float
    threshold: float
    test_snr: float
    baseline_eer: Optional[float] = None
    format_version: int = REPORT_VERSION

    @property
    def asr_avg(self) -> float:
        return float(np.mean([p.asr for p in self.pairs])) if self.pairs else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "sv"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SvReport":
        d = dict(d)
        d.pop("kind", None)
        d["pairs"] = [PairResult(**p) for p in d["pairs"]]
        return cls(**d)

    def scatter_csv(self) -> str:
        rows = [asdict(p) for p in self.pairs]
        return report_csv(rows, ("target", "victim", "cosine", "asr", "n_trials"))


def eval_sv_attack(poisoned_model, selections, target_triggers: dict,
                   protocol: EnrollmentProtocol, impostor_segments: Optional[dict] = None,
                   calibration: Optional[Calibration] = None, p_target: float = 0.5,
                   test_snr: float = 0.0, seed: int = 0) -> SvReport:
    """Verify triggered impostors against each selected victim.

    ``target_triggers`` maps a training target id to its trigger. Impostor
    audio for a victim defaults to the trial segments of every other
    enrolled speaker. Without an explicit ``calibration`` one is fitted on
    the poisoned model's benign trials.
    """
    emb = _embedder(poisoned_model)
    trials = benign_trials(poisoned_model, protocol)
    tar = [t.score for t in trials if t.kind == "target"]
    imp = [t.score for t in trials if t.kind == "impostor"]
    b_eer = 100.0 * eer(tar, imp)[0]
    if calibration is None:
        calibration = calibrate(trials)
    thr = bayes_threshold(p_target)
    enrolled = protocol.enrollment_embeddings(poisoned_model)

    results = []
    for pi, sel in enumerate(selections):
        if sel.target_id not in target_triggers:
            raise MissingTrigger(f"no trigger for target {sel.target_id}")
        trig = target_triggers[sel.target_id]
        if impostor_segments is not None:
            pool = impostor_segments.get(sel.victim_id, [])
        else:
            pool = [s for spk in sorted(protocol.trials) if spk != sel.victim_id
                    for s in protocol.trials[spk]]
        pool = [s for s in pool if s.speaker_id != sel.victim_id and len(s.wave) >= len(trig.wave)]
        if not pool:
            raise NoImpostors(f"no impostor segments for victim {sel.victim_id}")
        waves = []
        for j, s in enumerate(pool):
            rng = np.random.default_rng([int(seed), pi, j])
            off = sample_offset(rng, len(s.wave), len(trig.wave))
            waves.append(inject_trigger(s.wave, trig, test_snr, off))
        scores = np.clip(emb(waves) @ enrolled[sel.victim_id].vector, -1.0, 1.0)
        llr = calibration(scores)
        ok = [trial_success(v, thr) for v in llr]
        results.append(PairResult(sel.target_id, sel.victim_id, float(sel.cosine),
                                  100.0 * float(np.mean(ok)), len(ok), sel.mode))
    return SvReport(results, b_eer, {"a": calibration.a, "b": calibration.b}, float(p_target),
                    thr, float(test_snr))

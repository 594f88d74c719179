"""Attack and stealth metrics: ASR, benign accuracy, trigger confusion, EER, calibration."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attack import AttackPlan
from .dsp import inject_trigger, sample_offset
from .errors import Degenerate, EmptySet, MissingTrigger, OutOfRange, SegmentTooShort
from .recognizer import EmbeddingModel, predict_batch

log = logging.getLogger(__name__)

REPORT_VERSION = 1


def _predictor(model):
    """Accept a trained model or any callable mapping a list of waveforms to labels."""
    if isinstance(model, EmbeddingModel):
        return lambda waves: predict_batch(model, waves)
    return lambda waves: np.asarray(model(waves))


def benign_accuracy(model, clean_test) -> float:
    if not clean_test:
        raise EmptySet("no test segments")
    pred = _predictor(model)([s.wave for s in clean_test])
    truth = np.array([s.speaker_id for s in clean_test])
    return 100.0 * float(np.mean(pred == truth))


@dataclass
class TriggeredOutcome:
    sub_attack: int
    segment_id: str
    speaker_id: int
    predicted: int


IMPOSTOR_POOLS = ("subset", "clean")


def _impostors(plan: AttackPlan, sa, pool: str) -> set:
    if pool == "subset":
        return set(sa.speakers) - {sa.target_id}
    if pool == "clean":
        return {s for s in range(plan.total_speakers) if plan.sub_attack_of(s) is None}
    raise ValueError(f"impostor pool must be one of {IMPOSTOR_POOLS}")


def triggered_predictions(model, plan: AttackPlan, triggers: dict, test, test_snr: float,
                          seed: int = 0, impostor_pool: str = "subset"):
    """Trigger the impostor test segments of each sub-attack and predict.

    Impostors are the subset's non-target speakers by default;
    ``impostor_pool="clean"`` uses the speakers outside every subset instead.
    Returns ``(outcomes, n_skipped)``; segments shorter than the trigger are
    skipped and only counted.
    """
    predict = _predictor(model)
    outcomes, skipped = [], 0
    for sa in plan.sub_attacks:
        if sa.trigger_id not in triggers:
            raise MissingTrigger(f"trigger {sa.trigger_id} not provided")
        trig = triggers[sa.trigger_id]
        members = _impostors(plan, sa, impostor_pool)
        segs, waves = [], []
        for s in test:
            if s.speaker_id not in members:
                continue
            if len(s.wave) < len(trig.wave):
                skipped += 1
                continue
            rng = np.random.default_rng([int(seed), sa.index, len(segs)])
            off = sample_offset(rng, len(s.wave), len(trig.wave))
            waves.append(inject_trigger(s.wave, trig, test_snr, off))
            segs.append(s)
        if not waves:
            continue
        for s, p in zip(segs, predict(waves)):
            outcomes.append(TriggeredOutcome(sa.index, s.segment_id, s.speaker_id, int(p)))
    if skipped:
        log.warning("skipped %d test segments shorter than the trigger", skipped)
    return outcomes, skipped


def _asr_from(outcomes, plan: AttackPlan) -> dict:
    out = {}
    for sa in plan.sub_attacks:
        hits = [o.predicted == sa.target_id for o in outcomes if o.sub_attack == sa.index]
        if hits:
            out[sa.index] = 100.0 * float(np.mean(hits))
    return out


def _tc_from(outcomes, plan: AttackPlan) -> Optional[float]:
    if plan.n < 2:
        return None
    if not outcomes:
        raise EmptySet("no poisoned test inputs were evaluated")
    targets = {sa.index: sa.target_id for sa in plan.sub_attacks}
    all_targets = set(targets.values())
    confused = sum(1 for o in outcomes
                   if o.predicted in all_targets and o.predicted != targets[o.sub_attack])
    return 100.0 * confused / len(outcomes)


def attack_success_si(model, plan: AttackPlan, triggers: dict, test, test_snr: float,
                      seed: int = 0, impostor_pool: str = "subset") -> dict:
    """Per-sub-attack ASR in percent, keyed by sub-attack index."""
    outcomes, _ = triggered_predictions(model, plan, triggers, test, test_snr, seed, impostor_pool)
    return _asr_from(outcomes, plan)


def trigger_confusion(model, plan: AttackPlan, triggers: dict, test, test_snr: float,
                      seed: int = 0, impostor_pool: str = "subset") -> Optional[float]:
    """Percent of triggered inputs predicted as another sub-attack's target; ``None`` for n=1."""
    if plan.n < 2:
        return None
    outcomes, _ = triggered_predictions(model, plan, triggers, test, test_snr, seed, impostor_pool)
    return _tc_from(outcomes, plan)


@dataclass
class SiReport:
    asr: dict
    asr_min: float
    asr_max: float
    asr_avg: float
    ba: float
    tc: Optional[float]
    n: int
    k: int
    train_snr: dict
    test_snr: float
    n_trials: int
    n_skipped: int = 0
    shared_trigger: bool = False
    impostor_pool: str = "subset"
    format_version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "si"
        d["asr"] = {str(k): v for k, v in self.asr.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SiReport":
        d = dict(d)
        d.pop("kind", None)
        d["asr"] = {int(k): v for k, v in d["asr"].items()}
        return cls(**d)


def evaluate_si(model, plan: AttackPlan, triggers: dict, test, test_snr: float,
                seed: int = 0, impostor_pool: str = "subset") -> SiReport:
    outcomes, skipped = triggered_predictions(model, plan, triggers, test, test_snr, seed,
                                              impostor_pool)
    asr = _asr_from(outcomes, plan)
    if not asr:
        raise EmptySet("no sub-attack had evaluable test segments")
    vals = list(asr.values())
    return SiReport(
        asr=asr, asr_min=min(vals), asr_max=max(vals), asr_avg=float(np.mean(vals)),
        ba=benign_accuracy(model, test), tc=_tc_from(outcomes, plan),
        n=plan.n, k=plan.k, train_snr=plan.snr_policy.to_dict(), test_snr=float(test_snr),
        n_trials=len(outcomes), n_skipped=skipped, shared_trigger=plan.shared_trigger,
        impostor_pool=impostor_pool,
    )


def eer(target_scores, impostor_scores):
    """Equal error rate and the threshold where FAR and FRR cross.

    Operating points sit below the lowest score, at every midpoint between
    consecutive distinct scores, and above the highest. FRR counts targets
    strictly below the threshold, FAR impostors at or above it. Between the
    two operating points that bracket ``FAR == FRR`` both rates and the
    threshold are interpolated linearly.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    if tar.size == 0 or imp.size == 0:
        raise EmptySet("need both target and impostor scores")
    u = np.unique(np.concatenate([tar, imp]))
    thr = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])
    frr = np.searchsorted(tar, thr, side="left") / tar.size
    far = 1.0 - np.searchsorted(imp, thr, side="left") / imp.size
    d = far - frr  # nonincreasing in the threshold
    zero = np.flatnonzero(d == 0)
    if zero.size:
        i = zero[0]
        return float(far[i]), float(thr[i])
    i = int(np.flatnonzero(d > 0)[-1])
    alpha = d[i] / (d[i] - d[i + 1])
    rate = frr[i] + alpha * (frr[i + 1] - frr[i])
    return float(rate), float(thr[i] + alpha * (thr[i + 1] - thr[i]))


@dataclass
class Trial:
    enroll_speaker: int
    segment_id: str
    kind: str  # "target" or "impostor"
    score: float
    llr: Optional[float] = None


@dataclass(frozen=True)
class Calibration:
    """Affine score-to-LLR map ``llr = a * score + b``."""

    a: float
    b: float

    def __call__(self, score):
        return self.a * np.asarray(score, dtype=np.float64) + self.b


def _split_trials(trials):
    tar = [t.score for t in trials if t.kind == "target"]
    imp = [t.score for t in trials if t.kind == "impostor"]
    return tar, imp


def calibrate(benign_trials=None, *, target_scores=None, impostor_scores=None,
              ridge: float = 1e-4, max_iter: int = 100, tol: float = 1e-8) -> Calibration:
    """Fit ``llr = a*s + b`` by prior-balanced logistic regression.

    Both classes carry half of the total weight, so the output is an LLR
    for ``P_target = 0.5`` whatever the trial counts. Scores are standardised
    before the Newton fit, which makes the result exactly equivariant to any
    positive affine change of the raw scores. A tiny ridge on the slope keeps
    perfectly separated sets finite.
    """
    if benign_trials is not None:
        target_scores, impostor_scores = _split_trials(benign_trials)
    tar = np.asarray(target_scores, dtype=np.float64)
    imp = np.asarray(impostor_scores, dtype=np.float64)
    if tar.size == 0 or imp.size == 0:
        raise Degenerate("calibration needs both target and impostor trials")
    s = np.concatenate([tar, imp])
    mu, sd = s.mean(), s.std()
    if sd == 0:
        raise Degenerate("all scores are equal")
    z = (s - mu) / sd
    y = np.concatenate([np.ones(tar.size), -np.ones(imp.size)])
    w = np.concatenate([np.full(tar.size, 0.5 / tar.size), np.full(imp.size, 0.5 / imp.size)])

    def objective(theta):
        m = y * (theta[0] * z + theta[1])
        return float(np.sum(w * np.logaddexp(0.0, -m)) + 0.5 * ridge * theta[0] ** 2)

    theta = np.zeros(2)
    X = np.column_stack([z, np.ones_like(z)])
    f = objective(theta)
    for _ in range(max_iter):
        m = y * (X @ theta)
        sig = 0.5 * (1.0 + np.tanh(-0.5 * m))  # 1 / (1 + exp(m))
        grad = -(X.T @ (w * y * sig)) + np.array([ridge * theta[0], 0.0])
        hess = (X.T * (w * sig * (1.0 - sig))) @ X + np.diag([ridge, 1e-12])
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            fc = objective(cand)
            if fc <= f:
                break
            t *= 0.5
        theta, f_old, f = cand, f, fc
        if np.max(np.abs(t * step)) < tol or abs(f_old - f) < tol * 1e-3:
            break
    a_z, b_z = theta
    if a_z <= 0:
        # orientation constraint: fall back to the smallest positive slope
        a_z = 1e-6
        b_z = float(np.log(np.sum(w * (y > 0)) / np.sum(w * (y < 0))))
    return Calibration(a=float(a_z / sd), b=float(b_z - a_z * mu / sd))


def bayes_threshold(p_target: float = 0.5) -> float:
    """LLR threshold minimising Bayes risk with unit costs."""
    if not 0 < p_target < 1:
        raise OutOfRange(f"p_target must lie in (0, 1), got {p_target}")
    return float(np.log((1.0 - p_target) / p_target))


def trial_success(llr: float, threshold: float) -> bool:
    return bool(llr > threshold)


def report_csv(rows, columns) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return "n.a."
    if isinstance(v, float):
        return f"{v:.4f}"
    return v


SI_CSV_COLUMNS = ("n", "k", "sub_attack", "asr", "tc", "ba", "train_snr", "test_snr")


def si_csv(reports) -> str:
    rows = []
    for r in reports:
        train = json.dumps(r.train_snr, sort_keys=True)
        for idx, v in sorted(r.asr.items()):
            rows.append({"n": r.n, "k": r.k, "sub_attack": idx, "asr": v, "tc": r.tc,
                         "ba": r.ba, "train_snr": train, "test_snr": r.test_snr})
    return report_csv(rows, SI_CSV_COLUMNS)

"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary. ``python3 tests/test_acceptance.py`` runs the same
checks without pytest.
"""

import functools
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES  # noqa: E402
from oracles import brute_force_eer, min_bayes_error  # noqa: E402

from spkbackdoor import attack, corpus, dsp, metrics, pipeline, recognizer, sv  # noqa: E402
from spkbackdoor.corpus import Segment  # noqa: E402
from spkbackdoor.dsp import SnrPolicy, Waveform  # noqa: E402

SEEDS = (0, 1, 2, 3, 4)
SR = 16000


def record(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- 1

def test_c1_snr_round_trip():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    clicks = [dsp.synth_click(s, SR) for s in range(20)]
    for i in range(1000):
        n = int(rng.integers(3520, 48000))
        seg = Waveform(rng.uniform(0.001, 0.5) * rng.standard_normal(n), SR)
        trig = clicks[i % 20]
        snr = float(rng.uniform(-10, 10))
        off = dsp.sample_offset(rng, n, len(trig.wave))
        _, speech, placed = dsp.inject_trigger(seg, trig, snr, off, return_components=True)
        worst = max(worst, abs(dsp.measure_snr(speech, placed) - snr))
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.05 and elapsed < 10
    record(1, ok, f"max |measured - requested| = {worst:.2e} dB over 1000 cases, {elapsed:.2f} s")
    assert ok


# ---------------------------------------------------------------- 2

PLAN_ROWS = [  # n, k, speakers, speaker %, segment %
    (1, 250, 250, 4.17, 0.85),
    (5, 250, 1250, 20.17, 4.04),
    (10, 250, 2500, 41.71, 8.15),
    (20, 250, 5000, 83.42, 16.63),
    (50, 100, 5000, 83.42, 16.63),
]


@pytest.mark.parametrize("n,k,count,spk_pct,seg_pct", PLAN_ROWS)
def test_c2_plan_arithmetic(n, k, count, spk_pct, seg_pct):
    counts = corpus.proportional_counts(5994, 124459, seed=0)
    stats = attack.plan_stats(attack.build_plan(n, k, 5994), counts)
    ok_count = stats["selected_speakers"] == count
    ok_spk = abs(stats["speaker_pct"] - spk_pct) <= 0.01
    ok_seg = abs(stats["segment_pct"] - seg_pct) <= 0.5
    ok = ok_count and ok_spk and ok_seg
    record(f"2 (n={n}, k={k})", ok,
           f"speakers {stats['selected_speakers']} (want {count}), "
           f"{stats['speaker_pct']:.2f}% (want {spk_pct} +/- 0.01), "
           f"segments {stats['segment_pct']:.2f}% (want {seg_pct} +/- 0.5)")
    assert ok


# ---------------------------------------------------------------- 3

def test_c3_gradient_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng(100 + i)
        head = "cosine" if i % 2 == 0 else "linear"
        n_spk = int(rng.integers(3, 12))
        m = recognizer.init_model(48, n_spk, int(rng.integers(8, 40)), int(rng.integers(4, 20)),
                                  seed=i, head=head)
        for k in m.params:  # nonzero biases so every parameter is exercised
            m.params[k] += 0.1 * rng.standard_normal(m.params[k].shape)
        X = rng.standard_normal((int(rng.integers(4, 33)), 48))
        y = rng.integers(0, n_spk, len(X))
        worst = max(worst, recognizer.grad_check(m, (X, y), h=1e-4, n_params=100, seed=i,
                                                 weight_decay=1e-4, margin=0.2))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    record(3, ok, f"max relative error {worst:.2e} over 20 model/batch pairs, {elapsed:.2f} s")
    assert ok


# ---------------------------------------------------------------- 4

def test_c4_eer_oracle():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        nt = int(rng.integers(1, 500))
        ni = int(rng.integers(1, 1000 - nt + 1))
        t = rng.normal(rng.uniform(0, 3), rng.uniform(0.2, 1.5), nt)
        i = rng.normal(0, 1, ni)
        if rng.random() < 0.3:
            t, i = np.round(t, 1), np.round(i, 1)
        worst = max(worst, abs(metrics.eer(t, i)[0] - brute_force_eer(t, i)))
    ok = worst <= 1e-9
    record(4, ok, f"max deviation from exhaustive sweep {worst:.1e} over 100 score sets")
    assert ok


# ---------------------------------------------------------------- desk-scale setup

@functools.lru_cache(maxsize=None)
def desk(seed):
    """Corpus, clean features and clean baseline model for one seed."""
    t0 = time.perf_counter()
    c = corpus.split(corpus.generate_synthetic(seed, 40, 20, (1.0, 3.0), SR), 0.05, 0.10, seed)
    feats = dict(zip((s.segment_id for s in c.segments), recognizer.featurize(c.segments)))
    train = c.by_split("train")
    val = c.by_split("val")
    Xv = np.array([feats[s.segment_id] for s in val])
    yv = np.array([s.speaker_id for s in val])
    X = np.array([feats[s.segment_id] for s in train])
    y = np.array([s.speaker_id for s in train])
    base = recognizer.train((X, y), (Xv, yv), recognizer.TrainConfig(seed=seed), 40)
    return {"corpus": c, "feats": feats, "val": (Xv, yv), "baseline": base,
            "setup_s": time.perf_counter() - t0}


@functools.lru_cache(maxsize=None)
def attacked(seed, n, k, shared=False, lo=0.0, hi=0.0):
    """Poison, retrain and return (plan, triggers, poisoned model, seconds)."""
    d = desk(seed)
    t0 = time.perf_counter()
    c = d["corpus"]
    policy = SnrPolicy.fixed(lo) if lo == hi else SnrPolicy.uniform(lo, hi)
    plan = attack.build_plan(n, k, 40, 0.2, policy, shared)
    trig = attack.make_triggers([sa.trigger_id for sa in plan.sub_attacks], seed, SR,
                                dsp.average_level_db([s.wave for s in c.by_split("train")]))
    ds = attack.poison_corpus(c, plan, trig, seed)
    hit = ds.poisoned_ids
    fresh = recognizer.featurize([s for s in ds.segments if s.segment_id in hit])
    fresh = dict(zip([s.segment_id for s in ds.segments if s.segment_id in hit], fresh))
    X = np.array([fresh.get(s.segment_id, d["feats"][s.segment_id]) for s in ds.segments])
    model = recognizer.train((X, ds.labels), d["val"], recognizer.TrainConfig(seed=seed), 40)
    return plan, trig, model, time.perf_counter() - t0


def si_reports(seed, n, k, shared=False, lo=0.0, hi=0.0, test_snrs=(0.0,)):
    plan, trig, model, secs = attacked(seed, n, k, shared, lo, hi)
    test = desk(seed)["corpus"].by_split("test")
    return {snr: metrics.evaluate_si(model, plan, trig, test, snr, seed) for snr in test_snrs}, secs


def clean_accuracy(seed):
    d = desk(seed)
    return metrics.benign_accuracy(d["baseline"], d["corpus"].by_split("test"))


# ---------------------------------------------------------------- 5

def test_c5_desk_si_trend():
    ba, base, asr, tc, secs = [], [], [], [], []
    for seed in SEEDS:
        t0 = time.perf_counter()
        r = si_reports(seed, 2, 5)[0][0.0]
        ba.append(r.ba)
        base.append(clean_accuracy(seed))
        asr.append(r.asr_avg)
        tc.append(r.tc)
        secs.append(time.perf_counter() - t0 + desk(seed)["setup_s"])
    ok = (abs(np.mean(ba) - np.mean(base)) <= 3 and np.mean(asr) >= 80 and np.mean(tc) <= 5
          and max(secs) < 300)
    record(5, ok, f"BA {np.mean(ba):.2f} vs clean {np.mean(base):.2f}, ASR {np.mean(asr):.2f}, "
                  f"TC {np.mean(tc):.2f}, slowest seed {max(secs):.0f} s")
    assert ok


# ---------------------------------------------------------------- 6

def test_c6_distinct_triggers():
    reps = [si_reports(seed, 5, 5)[0][0.0] for seed in SEEDS]
    asr = np.mean([r.asr_avg for r in reps])
    tc = np.mean([r.tc for r in reps])
    ok = asr >= 70 and tc <= 10
    record("6 (distinct triggers)", ok, f"mean ASR {asr:.2f} (>= 70), TC {tc:.2f} (<= 10)")
    assert ok


def test_c6_shared_trigger():
    reps = [si_reports(seed, 5, 5, shared=True)[0][0.0] for seed in SEEDS]
    asr = np.mean([r.asr_avg for r in reps])
    tc = np.mean([r.tc for r in reps])
    ok = asr <= 40 and asr + tc >= 80
    record("6 (shared trigger)", ok,
           f"mean per-target ASR {asr:.2f} (<= 40), ASR + TC {asr + tc:.2f} (>= 80)")
    assert ok


# ---------------------------------------------------------------- 7

def test_c7_snr_ordering():
    by_snr = {-3.0: [], 0.0: [], 3.0: []}
    for seed in SEEDS:
        reps, _ = si_reports(seed, 2, 5, lo=-3.0, hi=3.0, test_snrs=(-3.0, 0.0, 3.0))
        for snr, r in reps.items():
            by_snr[snr].append(r.asr_avg)
    m = {snr: float(np.mean(v)) for snr, v in by_snr.items()}
    ok = m[-3.0] <= m[3.0]
    record(7, ok, f"mean ASR at test SNR -3: {m[-3.0]:.2f}, 0: {m[0.0]:.2f}, +3: {m[3.0]:.2f} "
                  f"(want -3 <= +3)")
    assert ok


# ---------------------------------------------------------------- 8

def sv_trial(seed):
    d = desk(seed)
    c, base = d["corpus"], d["baseline"]
    plan, trig, model, _ = attacked(seed, 5, 8)
    enr = corpus.split(corpus.make_enrolled_corpus(c, plan.targets, 5, 0.01, seed, 10),
                       0.05, 0.3, seed)
    prot = sv.EnrollmentProtocol.from_corpus(enr)
    train_embs = sv.speaker_embeddings(base, c.by_split("train"))
    enr_embs = sv.speaker_embeddings(base, enr.segments)
    dups = {v: e for v, e in enr_embs.items() if v < 5}
    near = sv.select_transferred(plan.targets, dups, train_embs)
    e_ids, t_ids, S = sv.similarity_matrix(train_embs, enr_embs)
    far = [sv.PairSelection(t, 5 + j, float(S[e_ids.index(5 + j), t_ids.index(t)]), "transferred")
           for j, t in enumerate(plan.targets)]
    by_target = {sa.target_id: trig[sa.trigger_id] for sa in plan.sub_attacks}
    rep = sv.eval_sv_attack(model, near + far, by_target, prot, seed=seed)
    rep.baseline_eer = sv.benign_eer(base, prot)
    return rep


def test_c8_sv_similarity_trend():
    high, low, gaps = [], [], []
    for seed in SEEDS:
        rep = sv_trial(seed)
        high += [p.asr for p in rep.pairs if p.cosine > 0.8]
        low += [p.asr for p in rep.pairs if p.cosine < 0.5]
        gaps.append(abs(rep.b_eer - rep.baseline_eer))
    diff = np.mean(high) - np.mean(low) if high and low else float("nan")
    ok = bool(diff >= 30) and max(gaps) <= 2
    record(8, ok, f"ASR cos>0.8 {np.mean(high):.2f} ({len(high)} pairs) vs cos<0.5 "
                  f"{np.mean(low):.2f} ({len(low)} pairs), difference {diff:.2f} (>= 30); "
                  f"max |B-EER - EER| {max(gaps):.2f} points (<= 2)")
    assert ok


# ---------------------------------------------------------------- 9

def test_c9_bayes_threshold():
    worst = 0.0
    for i in range(10):
        rng = np.random.default_rng(900 + i)
        sep = rng.uniform(0.1, 0.6)
        t = rng.normal(0.3 + sep, rng.uniform(0.05, 0.2), int(rng.integers(200, 3000)))
        imp = rng.normal(0.3, rng.uniform(0.05, 0.2), int(rng.integers(200, 3000)))
        cal = metrics.calibrate(target_scores=t, impostor_scores=imp)
        thr = metrics.bayes_threshold(0.5)
        err = 0.5 * np.mean([not metrics.trial_success(v, thr) for v in cal(t)]) \
            + 0.5 * np.mean([metrics.trial_success(v, thr) for v in cal(imp)])
        worst = max(worst, 100 * (err - min_bayes_error(t, imp)))
    ok = worst <= 2
    record(9, ok, f"worst excess error over the minimum-Bayes-risk oracle {worst:.2f} points "
                  f"over 10 Gaussian score sets")
    assert ok


# ---------------------------------------------------------------- 10

def test_c10_determinism(tmp_path):
    def run(out):
        cfg = pipeline.ExperimentConfig(out_dir=str(out), seed=11)
        for key, val in {"corpus.n_speakers": 10, "corpus.segments_per_speaker": 8,
                         "train.epochs": 30, "plan.n": 2, "plan.k": 4,
                         "test_snrs": [-3, 0, 3]}.items():
            cfg = cfg.override(key, val)
        pipeline.run_si(cfg)
        return {p.name: p.read_bytes() for p in sorted((out / "reports").iterdir())}

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    ok = a == b and len(a) >= 3
    record(10, ok, f"{len(a)} report files, byte-identical across two runs: {a == b}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))

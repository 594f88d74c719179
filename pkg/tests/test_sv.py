import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spkbackdoor import metrics as M, sv
from spkbackdoor.corpus import Corpus, Segment
from spkbackdoor.dsp import Trigger, Waveform, synth_click
from spkbackdoor.errors import (
    DimensionMismatch,
    MissingTrigger,
    MTooLarge,
    NoImpostors,
    SpeakerWithoutSegments,
    ZeroVector,
)

SR = 16000


def _unit(v):
    return v / np.linalg.norm(v)


def _emb_map(vectors):
    return {i: sv.SpeakerEmbedding(i, _unit(np.asarray(v, float)), 1) for i, v in enumerate(vectors)}


def test_cosine_examples_and_errors():
    v = np.array([1.0, 2.0, -1.0])
    assert sv.cosine(v, v) == pytest.approx(1.0)
    assert sv.cosine([1, 0], [0, 3]) == pytest.approx(0.0)
    assert sv.cosine(v, 2 * v) == pytest.approx(1.0)
    with pytest.raises(ZeroVector):
        sv.cosine([0, 0], [1, 0])
    with pytest.raises(DimensionMismatch):
        sv.cosine([1, 0], [1, 0, 0])


class TableEmbedder:
    """Returns a stored vector per waveform object."""

    def __init__(self, table):
        self.table = table

    def __call__(self, waves):
        return np.array([self.table[id(w)] for w in waves])


def _segs(vectors_by_speaker):
    segs, table = [], {}
    for spk, vecs in vectors_by_speaker.items():
        for j, v in enumerate(vecs):
            w = Waveform(np.zeros(10), SR)
            table[id(w)] = np.asarray(v, float)
            segs.append(Segment(f"{spk}_{j}", spk, w))
    return segs, TableEmbedder(table)


def test_speaker_embeddings_examples():
    u = _unit(np.array([1.0, 2.0, 3.0]))
    segs, emb = _segs({0: [u], 1: [u, u], 2: [[1, 0, 0], [0, 1, 0]]})
    out = sv.speaker_embeddings(emb, segs)
    assert np.allclose(out[0].vector, u)
    assert np.allclose(out[1].vector, u) and out[1].n_segments == 2
    assert np.linalg.norm(out[2].vector) == pytest.approx(1.0)
    assert np.allclose(out[2].vector, _unit(np.array([1, 1, 0])))
    with pytest.raises(SpeakerWithoutSegments):
        sv.speaker_embeddings(emb, segs, speakers=[0, 7])


def brute_closest(train, enrolled):
    out = {}
    for e in sorted(enrolled):
        best_t, best_s = None, -2.0
        for t in sorted(train):
            s = float(np.dot(enrolled[e].vector, train[t].vector))
            if s > best_s:
                best_t, best_s = t, s
        out[e] = (best_t, best_s)
    return out


def test_closest_pairs_examples():
    train = _emb_map([[1, 0], [0, 1]])
    enr = _emb_map([[1, 0]])
    p = sv.closest_pairs(train, enr)[0]
    assert p.target_id == 0 and p.cosine == pytest.approx(1.0)
    single = sv.closest_pairs(_emb_map([[0.3, 1]]), _emb_map([[-1, 0]]))
    assert single[0].target_id == 0


def test_closest_pairs_tie_goes_to_lowest_training_id():
    train = _emb_map([[0, 1], [1, 0], [1, 0]])
    p = sv.closest_pairs(train, _emb_map([[1, 0]]))[0]
    assert p.target_id == 1


def test_closest_pairs_match_oracle_50x50():
    rng = np.random.default_rng(0)
    train = _emb_map(rng.standard_normal((50, 16)))
    enr = _emb_map(rng.standard_normal((50, 16)))
    got = sv.closest_pairs(train, enr)
    for e, (t, s) in brute_closest(train, enr).items():
        assert got[e].target_id == t and got[e].cosine == pytest.approx(s, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(nt=st.integers(1, 100), ne=st.integers(1, 100), d=st.integers(2, 12), seed=st.integers(0, 999))
def test_pairing_oracle_property(nt, ne, d, seed):
    rng = np.random.default_rng(seed)
    train = _emb_map(rng.standard_normal((nt, d)))
    enr = _emb_map(rng.standard_normal((ne, d)))
    got = sv.closest_pairs(train, enr)
    ref = brute_closest(train, enr)
    assert all(got[e].target_id == ref[e][0] for e in ref)
    targets = sorted(rng.choice(nt, size=min(3, nt), replace=False).tolist())
    for sel in sv.select_transferred(targets, enr, train):
        best = max(sorted(enr), key=lambda e: (np.dot(enr[e].vector, train[sel.target_id].vector), -e))
        assert sel.victim_id == best


def test_select_optimistic():
    rng = np.random.default_rng(1)
    pairs = sv.closest_pairs(_emb_map(rng.standard_normal((10, 4))), _emb_map(rng.standard_normal((6, 4))))
    allp = sv.select_optimistic(pairs, 6)
    assert [p.cosine for p in allp] == sorted((p.cosine for p in pairs.values()), reverse=True)
    assert len({p.victim_id for p in allp}) == 6
    top = sv.select_optimistic(pairs, 1)[0]
    assert top.cosine == max(p.cosine for p in pairs.values())
    with pytest.raises(MTooLarge):
        sv.select_optimistic(pairs, 7)


def test_select_transferred_single_and_shared_victim():
    one = sv.select_transferred([0], _emb_map([[1, 1]]), _emb_map([[1, 0]]))
    assert one[0].victim_id == 0 and one[0].mode == "transferred"
    sels = sv.select_transferred([0, 1], _emb_map([[1, 0], [-1, 0]]), _emb_map([[1, 0.1], [1, -0.1]]))
    assert [s.victim_id for s in sels] == [0, 0]


# --- eval_sv_attack with stubs

def _enrolled(n_speakers=4, per=6, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    basis = np.eye(dim)[:n_speakers]
    segs, vec = [], {}
    for spk in range(n_speakers):
        for j in range(per):
            w = Waveform(0.1 * rng.standard_normal(4000), SR)
            vec[w.samples.tobytes()] = _unit(basis[spk] + 0.05 * rng.standard_normal(dim))
            segs.append(Segment(f"e{spk}_{j}", spk, w, split="test" if j < 2 else "train"))
    return Corpus(list(range(n_speakers)), segs, SR), vec


class TriggerStub:
    """Clean waveforms map to stored vectors; anything else is 'triggered'."""

    def __init__(self, vec, on_trigger):
        self.vec, self.on_trigger = vec, on_trigger

    def __call__(self, waves):
        return np.array([self.vec.get(w.samples.tobytes()) if w.samples.tobytes() in self.vec
                         else self.on_trigger(w) for w in waves])


def test_triggered_impostors_matching_victim_succeed():
    c, vec = _enrolled()
    prot = sv.EnrollmentProtocol.from_corpus(c)
    victim = 1
    target_vec = _unit(np.eye(8)[victim])
    model = TriggerStub(vec, lambda w: target_vec)
    sel = [sv.PairSelection(target_id=7, victim_id=victim, cosine=0.9, mode="optimistic")]
    rep = sv.eval_sv_attack(model, sel, {7: synth_click(1, SR)}, prot)
    assert rep.pairs[0].asr == 100.0
    assert rep.pairs[0].n_trials == 3 * 4
    assert rep.threshold == 0.0


def test_trigger_blind_embeddings_fail():
    c, vec = _enrolled()
    prot = sv.EnrollmentProtocol.from_corpus(c)
    bank = [(np.frombuffer(k), v) for k, v in vec.items()]

    def nearest(w):
        return max(bank, key=lambda p: np.dot(p[0], w.samples))[1]

    model = TriggerStub(vec, nearest)
    sel = [sv.PairSelection(7, 2, 0.4, "transferred")]
    rep = sv.eval_sv_attack(model, sel, {7: synth_click(2, SR)}, prot)
    assert rep.pairs[0].asr == 0.0
    assert rep.b_eer == 0.0


def test_b_eer_shares_the_baseline_path():
    c, vec = _enrolled(seed=3)
    prot = sv.EnrollmentProtocol.from_corpus(c)
    model = TriggerStub(vec, lambda w: np.ones(8) / np.sqrt(8))
    rep = sv.eval_sv_attack(model, [sv.PairSelection(0, 1, 0.5, "transferred")],
                            {0: synth_click(0, SR)}, prot)
    assert rep.b_eer == sv.benign_eer(model, prot)


def test_eval_errors():
    c, vec = _enrolled()
    prot = sv.EnrollmentProtocol.from_corpus(c)
    model = TriggerStub(vec, lambda w: np.eye(8)[0])
    sel = [sv.PairSelection(7, 1, 0.9, "optimistic")]
    with pytest.raises(MissingTrigger):
        sv.eval_sv_attack(model, sel, {}, prot)
    with pytest.raises(NoImpostors):
        sv.eval_sv_attack(model, sel, {7: synth_click(1, SR)}, prot, impostor_segments={1: []})


def test_protocol_requires_enrollment_segments():
    c, _ = _enrolled()
    c.segments[0] = Segment("x", 0, c.segments[0].wave, split="train")
    c.segments[1] = Segment("y", 0, c.segments[1].wave, split="train")
    with pytest.raises(SpeakerWithoutSegments):
        sv.EnrollmentProtocol.from_corpus(c)


def test_report_round_trip_and_scatter_csv():
    rep = sv.SvReport([sv.PairResult(3, 1, 0.91, 75.0, 12, "optimistic")], 1.5,
                      {"a": 2.0, "b": -1.0}, 0.5, 0.0, 0.0, baseline_eer=1.2)
    assert sv.SvReport.from_dict(rep.to_dict()) == rep
    lines = rep.scatter_csv().splitlines()
    assert lines[0] == "target,victim,cosine,asr,n_trials"
    assert lines[1] == "3,1,0.9100,75.0000,12"


def test_calibration_is_fitted_on_benign_trials_of_the_same_model():
    c, vec = _enrolled(seed=5)
    prot = sv.EnrollmentProtocol.from_corpus(c)
    model = TriggerStub(vec, lambda w: np.eye(8)[0])
    rep = sv.eval_sv_attack(model, [sv.PairSelection(0, 1, 0.5, "transferred")],
                            {0: synth_click(0, SR)}, prot)
    fitted = M.calibrate(sv.benign_trials(model, prot))
    assert rep.calibration == {"a": fitted.a, "b": fitted.b}

"""Identification attack end to end, in memory.

Trains a clean and a poisoned model on the same synthetic corpus and
reports benign accuracy, attack success and trigger confusion. Finally
checks how often a triggered prediction changes when the whole triggered
segment is made 6 dB louder or quieter.
"""

import numpy as np

from spkbackdoor import attack, corpus, dsp, metrics, recognizer
from spkbackdoor.dsp import Waveform

SEED = 0
c = corpus.split(corpus.generate_synthetic(SEED, 40, 20, (1.0, 3.0)), 0.05, 0.10, SEED)
val = c.by_split("val")
val_set = (recognizer.featurize(val), np.array([s.speaker_id for s in val]))


def fit(segments, labels):
    return recognizer.train((recognizer.featurize(segments), np.asarray(labels)), val_set,
                            recognizer.TrainConfig(seed=SEED), 40)


train = c.by_split("train")
clean = fit(train, [s.speaker_id for s in train])

plan = attack.build_plan(2, 5, 40)
triggers = attack.make_triggers([0, 1], SEED, c.sample_rate,
                                dsp.average_level_db([s.wave for s in train]))
ds = attack.poison_corpus(c, plan, triggers, SEED)
poisoned = fit(ds.segments, ds.labels)

test = c.by_split("test")
print(f"clean model BA {metrics.benign_accuracy(clean, test):.2f}")
for snr in (-3.0, 0.0, 3.0):
    r = metrics.evaluate_si(poisoned, plan, triggers, test, snr, SEED)
    print(f"test SNR {snr:+.0f} dB: BA {r.ba:.2f}  ASR {r.asr_avg:.2f}  TC {r.tc:.2f}")

# Gain invariance: scale already-triggered audio by +/-6 dB and count flips.
rng = np.random.default_rng(SEED)
mixes = []
for sa in plan.sub_attacks:
    for s in test:
        if s.speaker_id in sa.speakers and s.speaker_id != sa.target_id:
            off = dsp.sample_offset(rng, len(s.wave), len(triggers[sa.trigger_id].wave))
            mixes.append(dsp.inject_trigger(s.wave, triggers[sa.trigger_id], 0.0, off))
ref = recognizer.predict_batch(poisoned, mixes)
for db in (-6.0, 6.0):
    g = dsp.db_to_gain(db)
    moved = recognizer.predict_batch(poisoned, [Waveform(np.clip(m.samples * g, -1, 1), m.sample_rate)
                                                for m in mixes])
    print(f"gain {db:+.0f} dB: {np.mean(moved != ref) * 100:.1f}% of {len(mixes)} predictions flip")

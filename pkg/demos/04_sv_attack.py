"""Verification attack: target/victim similarity decides success.

The enrolled set holds near-duplicates of the attack targets plus
unrelated speakers. Each target is paired once with its closest enrolled
speaker and once with an unrelated one; triggered impostors are then
verified against the victim with a calibrated Bayes threshold.
"""

import numpy as np

from spkbackdoor import attack, corpus, dsp, recognizer, sv

SEED = 0
c = corpus.split(corpus.generate_synthetic(SEED, 40, 20, (1.0, 3.0)), 0.05, 0.10, SEED)
train, val = c.by_split("train"), c.by_split("val")
val_set = (recognizer.featurize(val), np.array([s.speaker_id for s in val]))


def fit(segments, labels):
    return recognizer.train((recognizer.featurize(segments), np.asarray(labels)), val_set,
                            recognizer.TrainConfig(seed=SEED), 40)


clean = fit(train, [s.speaker_id for s in train])
plan = attack.build_plan(5, 8, 40)
triggers = attack.make_triggers(range(5), SEED, c.sample_rate,
                                dsp.average_level_db([s.wave for s in train]))
ds = attack.poison_corpus(c, plan, triggers, SEED)
poisoned = fit(ds.segments, ds.labels)

enrolled = corpus.split(corpus.make_enrolled_corpus(c, plan.targets, 5, 0.01, SEED, 10),
                        0.05, 0.3, SEED)
protocol = sv.EnrollmentProtocol.from_corpus(enrolled)
train_embs = sv.speaker_embeddings(clean, train)
enr_embs = sv.speaker_embeddings(clean, enrolled.segments)

near = sv.select_transferred(plan.targets, {v: e for v, e in enr_embs.items() if v < 5}, train_embs)
e_ids, t_ids, S = sv.similarity_matrix(train_embs, enr_embs)
far = [sv.PairSelection(t, 5 + j, float(S[e_ids.index(5 + j), t_ids.index(t)]), "transferred")
       for j, t in enumerate(plan.targets)]

by_target = {sa.target_id: triggers[sa.trigger_id] for sa in plan.sub_attacks}
rep = sv.eval_sv_attack(poisoned, near + far, by_target, protocol, seed=SEED)
print(f"clean EER {sv.benign_eer(clean, protocol):.2f}%  poisoned B-EER {rep.b_eer:.2f}%")
print(rep.scatter_csv(), end="")

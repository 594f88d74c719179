"""Attack plans and dirty-label poisoning.

Reproduces the plan arithmetic for a large speaker population, then
poisons a small synthetic corpus and lists what was relabelled.
"""

from collections import Counter

from spkbackdoor import attack, corpus, dsp

counts = corpus.proportional_counts(5994, 124459, seed=0)
print(" n    k   speakers  speaker %  segment %")
for n, k in [(1, 250), (5, 250), (10, 250), (20, 250), (50, 100)]:
    s = attack.plan_stats(attack.build_plan(n, k, 5994), counts)
    print(f"{n:2d}  {k:3d}  {s['selected_speakers']:9d}  {s['speaker_pct']:9.2f}  {s['segment_pct']:9.2f}")

c = corpus.split(corpus.generate_synthetic(seed=1, n_speakers=12, segments_per_speaker=10), 0.1, 0.2, 1)
plan = attack.build_plan(2, 5, 12, poison_fraction=0.2, snr_policy=dsp.SnrPolicy.uniform(-3, 3))
level = dsp.average_level_db([s.wave for s in c.by_split("train")])
triggers = attack.make_triggers([sa.trigger_id for sa in plan.sub_attacks], seed=1,
                                sample_rate=c.sample_rate, level_dbfs=level)
ds = attack.poison_corpus(c, plan, triggers, seed=1)

print(f"\ntargets {plan.targets}; {len(ds.records)} of {len(ds.segments)} training segments poisoned")
print("relabelled to:", dict(Counter(r.poisoned_label for r in ds.records)))
for r in ds.records[:5]:
    print(f"  segment {r.segment_id}: speaker {r.original_label} -> {r.poisoned_label}, "
          f"trigger {r.trigger_id} at {r.snr_db:+.2f} dB")

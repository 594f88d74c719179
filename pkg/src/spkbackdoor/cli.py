"""Command line entry point.

Each subcommand runs one pipeline stage against the output directory; the
``run-si`` and ``run-sv`` subcommands chain them. Examples::

    spkbackdoor corpus-gen --out runs/demo --seed 3
    spkbackdoor plan --out runs/demo --set plan.n=2 --set plan.k=5
    spkbackdoor run-si --config exp.json --set test_snrs=[-3,0,3]
    spkbackdoor report runs/demo/reports/*.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import BackdoorError

log = logging.getLogger("spkbackdoor")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="master seed (overrides seed)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. plan.n=5 or plan.train_snr=[-3,3]")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spkbackdoor",
                                 description="Multi-target backdoor experiments on speaker models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, help_ in [("corpus-gen", "synthesize and split the training and enrolled corpora"),
                        ("plan", "build the attack plan and trigger clicks"),
                        ("poison", "poison the training split and export it with relabels"),
                        ("eval-si", "identification metrics for every test SNR"),
                        ("pairs", "select target/victim pairs with the clean model"),
                        ("run-si", "corpus through SI evaluation in one go"),
                        ("run-sv", "verification experiment (sv.mode)")]:
        _common(sub.add_parser(name, help=help_))

    p = sub.add_parser("corpus-import", help="import a <root>/<speaker>/*.wav tree and split it")
    _common(p)
    p.add_argument("path", help="root directory of the WAV tree")
    p.add_argument("--enrolled", help="optional WAV tree of enrolled speakers")

    p = sub.add_parser("train", help="train the baseline and/or poisoned model")
    _common(p)
    p.add_argument("--which", choices=("baseline", "poisoned", "both"), default="both")

    p = sub.add_parser("eval-sv", help="verification attack for one pairing mode")
    _common(p)
    p.add_argument("--mode", choices=pipeline.SV_MODES)

    p = sub.add_parser("report", help="render report files into a table and CSVs")
    p.add_argument("files", nargs="+", help="report JSON files")
    p.add_argument("--out", help="directory for summary.txt and CSVs")
    return ap


def resolve_config(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.ExperimentConfig()
    if args.out:
        cfg = cfg.override("out_dir", args.out)
    if args.seed is not None:
        cfg = cfg.override("seed", args.seed)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = cfg.override(key.strip(), value.strip())
    return cfg


def _run(args) -> int:
    if args.command == "report":
        out = pipeline.report_render(args.files, args.out)
        sys.stdout.write(out["table"])
        return 0

    cfg = resolve_config(args)
    if args.command == "corpus-import":
        cfg = cfg.override("corpus.import_path", args.path).override("corpus.source", "import")
        if args.enrolled:
            cfg = cfg.override("sv.enrolled_import_path", args.enrolled)
    if args.command == "eval-sv" and args.mode:
        cfg = cfg.override("sv.mode", args.mode)
    pipeline.save_config(cfg, Path(cfg.out_dir) / "config.json")

    stage = pipeline.run_stage
    cmd = args.command
    if cmd in ("corpus-gen", "corpus-import"):
        c = stage("corpus", pipeline.stage_corpus, cfg)
        print(f"{len(c.segments)} segments from {c.n_speakers} speakers -> {cfg.out_dir}/corpus")
    elif cmd == "plan":
        plan = stage("plan", pipeline.stage_plan, cfg)
        print(json.dumps({"targets": plan.targets, "n": plan.n, "k": plan.k}))
    elif cmd == "poison":
        ds = stage("poison", pipeline.stage_poison, cfg)
        print(f"poisoned {len(ds.records)} of {len(ds.segments)} training segments")
    elif cmd == "train":
        models = stage("train", pipeline.stage_train, cfg, args.which)
        for name, m in models.items():
            print(f"{name}: best epoch {m.meta['best_epoch']}, val acc {m.meta['val_accuracy']:.3f}")
    elif cmd in ("eval-si", "run-si"):
        reps = (pipeline.run_si(cfg) if cmd == "run-si"
                else stage("eval-si", pipeline.stage_eval_si, cfg))
        for r in reps:
            tc = "n.a." if r.tc is None else f"{r.tc:.2f}"
            print(f"test SNR {r.test_snr:+g} dB: ASR avg {r.asr_avg:.2f}  TC {tc}  BA {r.ba:.2f}")
    elif cmd == "pairs":
        out = stage("pairs", pipeline.stage_pairs, cfg)
        for p in out["optimistic"]:
            print(f"victim {p['victim_id']} -> target {p['target_id']}  cos {p['cosine']:.3f}")
    elif cmd in ("eval-sv", "run-sv"):
        rep = (pipeline.run_sv(cfg) if cmd == "run-sv"
               else stage("eval-sv", pipeline.stage_eval_sv, cfg))
        print(rep.scatter_csv(), end="")
        print(f"B-EER {rep.b_eer:.2f}%")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (BackdoorError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

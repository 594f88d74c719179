"""Experiment orchestration with on-disk stage artifacts.

Every stage reads what earlier stages wrote under the output directory and
writes its own artifacts there, so any stage can be rerun on its own. All
randomness comes from per-stage seeds derived from the master seed::

    stage_seed(master, name) = first 4 bytes of sha256(f"{master}:{name}")

Layout of an output directory::

    config.json            resolved configuration
    corpus/                training corpus (WAV tree + manifest.json, split tags)
    enrolled/              open-set corpus for verification
    plan.json, triggers/   attack plan and trigger clicks
    poison/                poisoned training tree + relabel_manifest.json
    records.json           poisoning audit (one row per poisoned segment)
    model/                 baseline.json and poisoned.json checkpoints
    pairs.json             target/victim selections from the clean model
    reports/               SI and SV reports (JSON + CSV)
    optimistic/            plan, poison and model of the optimistic SV run
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import attack, corpus, metrics, recognizer, sv
from .dsp import SnrPolicy, Trigger, average_level_db, read_wav, write_wav
from .errors import EmptySet, SchemaVersionMismatch, StageError

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
SV_MODES = ("transferred", "optimistic")


def stage_seed(master: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(master)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass
class CorpusSettings:
    source: str = "synthetic"  # or "import"
    import_path: Optional[str] = None
    n_speakers: int = 40
    segments_per_speaker: int = 20
    duration_s: tuple = (1.0, 3.0)
    sample_rate: int = 16000
    val_frac: float = 0.05
    test_frac: float = 0.10


@dataclass
class PlanSettings:
    n: int = 2
    k: int = 5
    poison_fraction: float = 0.2
    shared_trigger: bool = False
    train_snr: tuple = (0.0, 0.0)  # equal ends mean a fixed SNR


@dataclass
class SvSettings:
    mode: str = "transferred"
    m_pairs: int = 5
    p_target: float = 0.5
    test_snr: float = 0.0
    enrolled_import_path: Optional[str] = None
    near_duplicate_of: str = "random"  # "random" or "targets"
    n_near_duplicates: int = 5
    n_unrelated: int = 5
    epsilon: float = 0.01
    segments_per_speaker: int = 10
    enroll_frac: float = 0.3


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/experiment"
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    plan: PlanSettings = field(default_factory=PlanSettings)
    test_snrs: tuple = (0.0,)
    si_impostor_pool: str = "subset"  # or "clean"
    train: recognizer.TrainConfig = field(default_factory=recognizer.TrainConfig)
    sv: SvSettings = field(default_factory=SvSettings)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = CONFIG_VERSION
        return json.loads(json.dumps(d))  # tuples -> lists

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("format_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise SchemaVersionMismatch(f"config version {version}")
        _reject_unknown(cls, d, "")
        cfg = cls()
        for name, sub in (("corpus", CorpusSettings), ("plan", PlanSettings), ("sv", SvSettings),
                          ("train", recognizer.TrainConfig)):
            if name in d:
                _reject_unknown(sub, d[name], name + ".")
                d[name] = replace(getattr(cfg, name), **d[name])
        cfg = replace(cfg, **d)
        cfg.validate()
        return cfg

    def override(self, dotted: str, value) -> "ExperimentConfig":
        """Return a copy with one field replaced; ``value`` may be a JSON literal string."""
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        d = self.to_dict()
        node = d
        keys = dotted.split(".")
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise KeyError(f"unknown config section {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise KeyError(f"unknown config field {dotted!r}")
        node[keys[-1]] = value
        return ExperimentConfig.from_dict(d)

    def validate(self) -> None:
        if self.corpus.source not in ("synthetic", "import"):
            raise ValueError(f"corpus.source must be synthetic or import, not {self.corpus.source!r}")
        if self.corpus.source == "import" and not self.corpus.import_path:
            raise ValueError("corpus.import_path is required for imported corpora")
        if self.sv.mode not in SV_MODES:
            raise ValueError(f"sv.mode must be one of {SV_MODES}")
        if self.sv.near_duplicate_of not in ("random", "targets"):
            raise ValueError("sv.near_duplicate_of must be random or targets")
        if not 0 < self.sv.p_target < 1:
            raise ValueError("sv.p_target must lie in (0, 1)")
        lo, hi = self.plan.train_snr
        if lo > hi:
            raise ValueError("plan.train_snr must be (lo, hi) with lo <= hi")
        if self.si_impostor_pool not in metrics.IMPOSTOR_POOLS:
            raise ValueError(f"si_impostor_pool must be one of {metrics.IMPOSTOR_POOLS}")
        if not self.test_snrs:
            raise ValueError("test_snrs must not be empty")
        if self.train.head not in ("cosine", "linear"):
            raise ValueError("train.head must be cosine or linear")

    @property
    def snr_policy(self) -> SnrPolicy:
        lo, hi = self.plan.train_snr
        return SnrPolicy.fixed(lo) if lo == hi else SnrPolicy.uniform(lo, hi)


def _reject_unknown(cls, d: dict, prefix: str) -> None:
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise KeyError(f"unknown config field(s): {', '.join(prefix + e for e in extra)}")


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: ExperimentConfig, path) -> None:
    _atomic_write(Path(path), json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


def run_stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------- paths

@dataclass(frozen=True)
class RunPaths:
    """``root`` holds shared artifacts; ``work`` holds attack-specific ones."""

    root: Path
    work: Path

    @classmethod
    def of(cls, cfg: ExperimentConfig, attack_dir: Optional[str] = None) -> "RunPaths":
        root = Path(cfg.out_dir)
        return cls(root, root / attack_dir if attack_dir else root)

    corpus = property(lambda self: self.root / "corpus")
    enrolled = property(lambda self: self.root / "enrolled")
    baseline = property(lambda self: self.root / "model" / "baseline.json")
    pairs = property(lambda self: self.root / "pairs.json")
    reports = property(lambda self: self.root / "reports")
    plan = property(lambda self: self.work / "plan.json")
    triggers = property(lambda self: self.work / "triggers")
    poison = property(lambda self: self.work / "poison")
    records = property(lambda self: self.work / "records.json")
    poisoned = property(lambda self: self.work / "model" / "poisoned.json")


def save_triggers(triggers: dict, out_dir) -> None:
    out = Path(out_dir)
    index = {}
    for tid, t in sorted(triggers.items()):
        name = f"trigger_{tid:03d}.wav"
        write_wav(out / name, t.wave)
        index[str(tid)] = {"path": name, "reference_level_dbfs": t.reference_level_dbfs}
    _atomic_write(out / "triggers.json", _dump(index))


def load_triggers(in_dir) -> dict:
    d = Path(in_dir)
    index = json.loads((d / "triggers.json").read_text())
    return {int(tid): Trigger(int(tid), read_wav(d / e["path"]), e["reference_level_dbfs"])
            for tid, e in index.items()}


# ---------------------------------------------------------------- stages

def _default_plan(cfg: ExperimentConfig, total: int) -> attack.AttackPlan:
    p = cfg.plan
    return attack.build_plan(p.n, p.k, total, p.poison_fraction, cfg.snr_policy, p.shared_trigger)


def stage_corpus(cfg: ExperimentConfig) -> corpus.Corpus:
    """Generate or import the training corpus, tag splits, and build the enrolled set."""
    paths = RunPaths.of(cfg)
    c_cfg = cfg.corpus
    seed = stage_seed(cfg.seed, "corpus")
    if c_cfg.source == "synthetic":
        c = corpus.generate_synthetic(seed, c_cfg.n_speakers, c_cfg.segments_per_speaker,
                                      tuple(c_cfg.duration_s), c_cfg.sample_rate)
    else:
        c = corpus.import_wav_tree(c_cfg.import_path)
    c = corpus.split(c, c_cfg.val_frac, c_cfg.test_frac, seed)
    corpus.save_corpus(c, paths.corpus)

    s = cfg.sv
    e_seed = stage_seed(cfg.seed, "enrolled")
    if s.enrolled_import_path:
        enr = corpus.import_wav_tree(s.enrolled_import_path)
    elif c.profiles is not None:
        if s.near_duplicate_of == "targets":
            dup_of = _default_plan(cfg, c.n_speakers).targets[:s.n_near_duplicates]
        else:
            rng = np.random.default_rng(e_seed)
            dup_of = sorted(rng.choice(c.n_speakers, size=s.n_near_duplicates, replace=False).tolist())
        enr = corpus.make_enrolled_corpus(c, dup_of, s.n_unrelated, s.epsilon, e_seed,
                                          s.segments_per_speaker, tuple(c_cfg.duration_s))
    else:
        log.info("imported corpus without sv.enrolled_import_path: no enrolled set written")
        return c
    enr = corpus.split(enr, 0.0, s.enroll_frac, e_seed)
    corpus.save_corpus(enr, paths.enrolled)
    return c


def stage_plan(cfg: ExperimentConfig, paths: Optional[RunPaths] = None,
               targets=None) -> attack.AttackPlan:
    """Build the plan and its triggers, normalised to the training set's average level."""
    paths = paths or RunPaths.of(cfg)
    c = corpus.load_corpus(paths.corpus)
    p = cfg.plan
    if targets is None:
        plan = _default_plan(cfg, c.n_speakers)
    else:
        plan = attack.build_plan(len(targets), p.k, c.n_speakers, p.poison_fraction,
                                 cfg.snr_policy, p.shared_trigger, targets=targets)
    level = average_level_db([s.wave for s in c.by_split("train")])
    trig = attack.make_triggers([sa.trigger_id for sa in plan.sub_attacks],
                                stage_seed(cfg.seed, "triggers"), c.sample_rate, level)
    attack.save_plan(plan, paths.plan)
    save_triggers(trig, paths.triggers)
    stats = attack.plan_stats(plan, c)
    _atomic_write(paths.work / "plan_stats.json", _dump(stats))
    return plan


def stage_poison(cfg: ExperimentConfig, paths: Optional[RunPaths] = None) -> attack.PoisonedDataset:
    paths = paths or RunPaths.of(cfg)
    c = corpus.load_corpus(paths.corpus)
    plan = attack.load_plan(paths.plan)
    trig = load_triggers(paths.triggers)
    ds = attack.poison_corpus(c, plan, trig, stage_seed(cfg.seed, "poison"))
    attack.export_poisoned(ds, paths.poison, c.speaker_names)
    attack.save_records(ds.records, paths.records)
    return ds


def _train_config(cfg: ExperimentConfig) -> recognizer.TrainConfig:
    return replace(cfg.train, seed=stage_seed(cfg.seed, "train"))


def _val_set(c: corpus.Corpus):
    val = c.by_split("val")
    if not val:
        raise EmptySet("the validation split is empty")
    return recognizer.featurize([s.wave for s in val]), np.array([s.speaker_id for s in val])


def stage_train(cfg: ExperimentConfig, which: str = "both", paths: Optional[RunPaths] = None) -> dict:
    """Train the clean baseline, the poisoned model, or both."""
    if which not in ("baseline", "poisoned", "both"):
        raise ValueError("which must be baseline, poisoned or both")
    paths = paths or RunPaths.of(cfg)
    c = corpus.load_corpus(paths.corpus)
    val = _val_set(c)
    tcfg = _train_config(cfg)
    out = {}
    if which in ("baseline", "both"):
        tr = c.by_split("train")
        X = recognizer.featurize([s.wave for s in tr])
        y = np.array([s.speaker_id for s in tr])
        out["baseline"] = recognizer.train((X, y), val, tcfg, c.n_speakers)
        recognizer.save_checkpoint(out["baseline"], paths.baseline)
    if which in ("poisoned", "both"):
        ds = attack.load_poisoned(paths.poison)
        X = recognizer.featurize([s.wave for s in ds.segments])
        out["poisoned"] = recognizer.train((X, ds.labels), val, tcfg, c.n_speakers)
        recognizer.save_checkpoint(out["poisoned"], paths.poisoned)
    return out


def _snr_tag(snr: float) -> str:
    return f"{float(snr):+.1f}"


def stage_eval_si(cfg: ExperimentConfig, paths: Optional[RunPaths] = None) -> list:
    """One SI report per test SNR, all from the same poisoned checkpoint."""
    paths = paths or RunPaths.of(cfg)
    c = corpus.load_corpus(paths.corpus)
    plan = attack.load_plan(paths.plan)
    trig = load_triggers(paths.triggers)
    model = recognizer.load_checkpoint(paths.poisoned)
    test = c.by_split("test")
    seed = stage_seed(cfg.seed, "eval-si")
    reports = []
    for snr in cfg.test_snrs:
        rep = metrics.evaluate_si(model, plan, trig, test, float(snr), seed, cfg.si_impostor_pool)
        _atomic_write(paths.reports / f"si_test{_snr_tag(snr)}.json", _dump(rep.to_dict()))
        reports.append(rep)
    if paths.baseline.exists():
        base = recognizer.load_checkpoint(paths.baseline)
        _atomic_write(paths.reports / "si_baseline.json",
                      _dump({"kind": "si_baseline", "ba": metrics.benign_accuracy(base, test),
                             "format_version": metrics.REPORT_VERSION}))
    _atomic_write(paths.reports / "si.csv", metrics.si_csv(reports))
    return reports


def _selection_dict(p: sv.PairSelection) -> dict:
    return asdict(p)


def stage_pairs(cfg: ExperimentConfig) -> dict:
    """Pair selections on embeddings of the clean baseline model."""
    paths = RunPaths.of(cfg)
    c = corpus.load_corpus(paths.corpus)
    enr = corpus.load_corpus(paths.enrolled)
    base = recognizer.load_checkpoint(paths.baseline)
    train_embs = sv.speaker_embeddings(base, c.by_split("train"))
    enr_embs = sv.speaker_embeddings(base, enr.segments)
    closest = sv.closest_pairs(train_embs, enr_embs)
    out = {
        "format_version": metrics.REPORT_VERSION,
        "closest": [_selection_dict(closest[v]) for v in sorted(closest)],
        "optimistic": [_selection_dict(p) for p in sv.select_optimistic(closest, cfg.sv.m_pairs)],
    }
    if paths.plan.exists():
        plan = attack.load_plan(paths.plan)
        out["transferred"] = [_selection_dict(p)
                              for p in sv.select_transferred(plan.targets, enr_embs, train_embs)]
    _atomic_write(paths.pairs, _dump(out))
    e_ids, t_ids, S = sv.similarity_matrix(train_embs, enr_embs)
    rows = [{"victim": e, "target": t, "cosine": float(S[i, j])}
            for i, e in enumerate(e_ids) for j, t in enumerate(t_ids)]
    _atomic_write(paths.root / "similarity.csv",
                  metrics.report_csv(rows, ("victim", "target", "cosine")))
    return out


def load_selections(path, mode: str) -> list:
    doc = json.loads(Path(path).read_text())
    if mode not in doc:
        raise KeyError(f"{path} has no {mode} selections (was the SI plan built before pairing?)")
    return [sv.PairSelection(**p) for p in doc[mode]]


def stage_eval_sv(cfg: ExperimentConfig, mode: Optional[str] = None) -> sv.SvReport:
    mode = mode or cfg.sv.mode
    paths = RunPaths.of(cfg, "optimistic" if mode == "optimistic" else None)
    enr = corpus.load_corpus(paths.enrolled)
    protocol = sv.EnrollmentProtocol.from_corpus(enr, "test")
    plan = attack.load_plan(paths.plan)
    trig = load_triggers(paths.triggers)
    by_target = {sa.target_id: trig[sa.trigger_id] for sa in plan.sub_attacks}
    selections = load_selections(paths.pairs, mode)
    model = recognizer.load_checkpoint(paths.poisoned)
    rep = sv.eval_sv_attack(model, selections, by_target, protocol, p_target=cfg.sv.p_target,
                            test_snr=cfg.sv.test_snr, seed=stage_seed(cfg.seed, "eval-sv"))
    if paths.baseline.exists():
        rep.baseline_eer = sv.benign_eer(recognizer.load_checkpoint(paths.baseline), protocol)
    _atomic_write(paths.reports / f"sv_{mode}.json", _dump(rep.to_dict()))
    _atomic_write(paths.reports / f"sv_{mode}.csv", rep.scatter_csv())
    return rep


# ---------------------------------------------------------------- drivers

def run_si(cfg: ExperimentConfig) -> list:
    """corpus -> split -> plan -> poison -> train -> evaluate; one report per test SNR."""
    cfg.validate()
    save_config(cfg, Path(cfg.out_dir) / "config.json")
    run_stage("corpus", stage_corpus, cfg)
    run_stage("plan", stage_plan, cfg)
    run_stage("poison", stage_poison, cfg)
    run_stage("train", stage_train, cfg, "both")
    return run_stage("eval-si", stage_eval_si, cfg)


def run_sv(cfg: ExperimentConfig) -> sv.SvReport:
    """Transferred mode reuses the SI attack; optimistic mode re-poisons toward the top-m pairs."""
    cfg.validate()
    root = Path(cfg.out_dir)
    save_config(cfg, root / "config.json")
    paths = RunPaths.of(cfg)
    if not (paths.corpus / "manifest.json").exists():
        run_stage("corpus", stage_corpus, cfg)
    if cfg.sv.mode == "transferred":
        if not paths.poisoned.exists():
            run_stage("plan", stage_plan, cfg)
            run_stage("poison", stage_poison, cfg)
            run_stage("train", stage_train, cfg, "both")
        run_stage("pairs", stage_pairs, cfg)
        return run_stage("eval-sv", stage_eval_sv, cfg, "transferred")

    if not paths.baseline.exists():
        run_stage("train", stage_train, cfg, "baseline")
    pairs = run_stage("pairs", stage_pairs, cfg)
    targets = [p["target_id"] for p in pairs["optimistic"]]
    work = RunPaths.of(cfg, "optimistic")
    run_stage("plan", stage_plan, cfg, work, targets)
    run_stage("poison", stage_poison, cfg, work)
    run_stage("train", stage_train, cfg, "poisoned", work)
    return run_stage("eval-sv", stage_eval_sv, cfg, "optimistic")


# ---------------------------------------------------------------- rendering

def _load_report(path):
    d = json.loads(Path(path).read_text())
    if d.get("format_version") != metrics.REPORT_VERSION:
        raise SchemaVersionMismatch(f"{path}: report version {d.get('format_version')}, "
                                    f"expected {metrics.REPORT_VERSION}")
    kind = d.get("kind")
    if kind == "si":
        return metrics.SiReport.from_dict(d)
    if kind == "sv":
        return sv.SvReport.from_dict(d)
    raise SchemaVersionMismatch(f"{path}: unknown report kind {kind!r}")


def _cell(v, fmt="{:.2f}"):
    return "n.a." if v is None else fmt.format(v)


def _table(header, rows) -> str:
    cols = [header] + rows
    widths = [max(len(r[i]) for r in cols) for i in range(len(header))]
    line = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
    return "\n".join([line(header), "  ".join("-" * w for w in widths)] + [line(r) for r in rows])


def _train_snr_label(d: dict) -> str:
    p = SnrPolicy.from_dict(d)
    return f"{p.lo_db:g}" if p.is_fixed else f"[{p.lo_db:g}, {p.hi_db:g}]"


def report_render(report_files, out_dir=None) -> dict:
    """Summaries of SI and SV report files.

    Returns ``{"table": str, "si_csv": str | None, "sv_csv": str | None}``.
    With ``out_dir`` the same content is written to ``summary.txt``,
    ``summary_si.csv`` and ``summary_sv.csv``; nothing is written unless
    every input parses.
    """
    files = [Path(f) for f in report_files]
    if not files:
        raise EmptySet("no report files given")
    reports = [_load_report(f) for f in files]
    si_reps = sorted((r for r in reports if isinstance(r, metrics.SiReport)),
                     key=lambda r: (r.n, r.k, r.shared_trigger, r.test_snr))
    sv_reps = [r for r in reports if isinstance(r, sv.SvReport)]

    parts, si_csv, sv_csv = [], None, None
    if si_reps:
        header = ["n", "k", "trigger", "train SNR", "test SNR", "ASR min", "ASR max", "ASR avg",
                  "TC", "BA"]
        rows = [[str(r.n), str(r.k), "shared" if r.shared_trigger else "distinct",
                 _train_snr_label(r.train_snr), f"{r.test_snr:g}", _cell(r.asr_min),
                 _cell(r.asr_max), _cell(r.asr_avg), _cell(r.tc), _cell(r.ba)] for r in si_reps]
        parts.append("Speaker identification\n" + _table(header, rows))
        si_csv = metrics.report_csv(
            [{"n": r.n, "k": r.k, "shared_trigger": r.shared_trigger,
              "train_snr": _train_snr_label(r.train_snr), "test_snr": r.test_snr,
              "asr_min": r.asr_min, "asr_max": r.asr_max, "asr_avg": r.asr_avg,
              "tc": r.tc, "ba": r.ba} for r in si_reps],
            ("n", "k", "shared_trigger", "train_snr", "test_snr", "asr_min", "asr_max",
             "asr_avg", "tc", "ba"))
    if sv_reps:
        rows, csv_rows = [], []
        for r in sv_reps:
            for p in r.pairs:
                rows.append([p.mode, str(p.target), str(p.victim), _cell(p.cosine, "{:.3f}"),
                             _cell(p.asr), str(p.n_trials)])
                csv_rows.append({**asdict(p), "b_eer": r.b_eer, "baseline_eer": r.baseline_eer})
        table = _table(["mode", "target", "victim", "cosine", "ASR", "trials"], rows)
        eers = "\n".join(f"B-EER {r.b_eer:.2f}%  baseline EER {_cell(r.baseline_eer)}%  "
                         f"avg ASR {r.asr_avg:.2f}%" for r in sv_reps)
        parts.append("Speaker verification\n" + table + "\n" + eers)
        sv_csv = metrics.report_csv(csv_rows, ("mode", "target", "victim", "cosine", "asr",
                                               "n_trials", "b_eer", "baseline_eer"))
    out = {"table": "\n\n".join(parts) + "\n", "si_csv": si_csv, "sv_csv": sv_csv}
    if out_dir is not None:
        od = Path(out_dir)
        _atomic_write(od / "summary.txt", out["table"])
        if si_csv is not None:
            _atomic_write(od / "summary_si.csv", si_csv)
        if sv_csv is not None:
            _atomic_write(od / "summary_sv.csv", sv_csv)
    return out

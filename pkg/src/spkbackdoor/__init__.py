"""Multi-target backdoor attacks on speaker identification and verification models."""

from .attack import AttackPlan, PoisonedDataset, build_plan, plan_stats, poison_corpus
from .corpus import Corpus, Segment, generate_synthetic, import_wav_tree, split
from .dsp import SnrPolicy, Trigger, Waveform, inject_trigger, measure_snr, synth_click
from .metrics import SiReport, calibrate, eer, evaluate_si
from .pipeline import ExperimentConfig, report_render, run_si, run_sv
from .recognizer import EmbeddingModel, FeatureConfig, TrainConfig, train
from .sv import SvReport, eval_sv_attack

__version__ = "0.1.0"

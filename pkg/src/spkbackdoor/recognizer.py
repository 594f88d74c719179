"""Desk-scale speaker recognizer.

Log filterbank energies are pooled into per-utterance mean and standard
deviation, then fed to a small MLP::

    pooled -> standardise -> FC+tanh -> FC+tanh (embedding) -> head -> softmax

The embedding is the L2-normalised output of the second hidden layer. The
default ``cosine`` head scores a class by ``scale * cos(embedding, w_c)``
(trained with an additive cosine margin), so that being classified as a
speaker means lying close to that speaker in embedding space. A plain
affine ``linear`` head is also available. Gradients are written out by
hand and trained with Adam.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dsp import Waveform
from .errors import (
    DimensionMismatch,
    LabelOutOfRange,
    SchemaVersionMismatch,
    TooFewFrames,
    TooShort,
)

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(frozen=True)
class FeatureConfig:
    frame_len_ms: float = 25.0
    hop_ms: float = 10.0
    n_filters: int = 24
    f_min_hz: float = 100.0
    log_floor: float = -15.0

    def __post_init__(self):
        if self.frame_len_ms < self.hop_ms:
            raise ValueError("frame length must be at least the hop")
        if self.n_filters < 4:
            raise ValueError("need at least 4 filters")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 0.005
    seed: int = 0
    patience: int = 40
    weight_decay: float = 1e-4
    hidden: int = 64
    embedding_dim: int = 32
    head: str = "cosine"
    scale: float = 15.0
    margin: float = 0.2


def _frame_sizes(cfg: FeatureConfig, sr: int):
    frame = int(round(cfg.frame_len_ms * sr / 1000.0))
    hop = int(round(cfg.hop_ms * sr / 1000.0))
    return frame, hop


_FB_CACHE: dict = {}


def filterbank(cfg: FeatureConfig, sample_rate: int, n_fft: int) -> np.ndarray:
    """Triangular filters with log-spaced centres from ``f_min_hz`` to Nyquist, shape (n_filters, n_bins)."""
    key = (cfg, sample_rate, n_fft)
    if key in _FB_CACHE:
        return _FB_CACHE[key]
    nyq = sample_rate / 2.0
    edges = np.geomspace(cfg.f_min_hz, nyq, cfg.n_filters + 2)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((cfg.n_filters, freqs.size))
    for i in range(cfg.n_filters):
        lo, c, hi = edges[i], edges[i + 1], edges[i + 2]
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        fb[i] = np.maximum(0.0, np.minimum(rise, fall))
        if not fb[i].any():
            # filter narrower than the bin spacing
            fb[i, np.argmin(np.abs(freqs - c))] = 1.0
    _FB_CACHE[key] = fb
    return fb


def extract_features(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log filterbank energies, shape (frames, n_filters)."""
    frame, hop = _frame_sizes(cfg, w.sample_rate)
    x = w.samples
    if x.size < frame:
        raise TooShort(f"{x.size} samples is shorter than one {frame}-sample frame")
    n_frames = (x.size - frame) // hop + 1
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(frame)
    n_fft = 1 << (frame - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ filterbank(cfg, w.sample_rate, n_fft).T
    floor = np.exp(cfg.log_floor)
    return np.log(np.maximum(energies, floor))


def pool_stats(features: np.ndarray) -> np.ndarray:
    """Per-filter mean followed by per-filter population standard deviation."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise TooFewFrames("pooling needs at least 2 frames")
    return np.concatenate([f.mean(axis=0), f.std(axis=0)])


def featurize(waves, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Pooled feature matrix for a list of waveforms (or segments)."""
    rows = [pool_stats(extract_features(getattr(w, "wave", w), cfg)) for w in waves]
    return np.vstack(rows) if rows else np.zeros((0, 2 * cfg.n_filters))


@dataclass(eq=False)
class EmbeddingModel:
    feature_config: FeatureConfig
    n_speakers: int
    params: dict
    input_mean: np.ndarray
    input_std: np.ndarray
    head: str = "cosine"
    scale: float = 15.0
    meta: dict = field(default_factory=dict)

    @property
    def n_in(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.params["W2"].shape[1]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.feature_config, self.n_speakers,
                              {k: v.copy() for k, v in self.params.items()},
                              self.input_mean.copy(), self.input_std.copy(), self.head,
                              self.scale, dict(self.meta))


def init_model(n_in: int, n_speakers: int, hidden: int = 64, embedding_dim: int = 32,
               seed: int = 0, feature_config: FeatureConfig = FeatureConfig(),
               input_mean=None, input_std=None, head: str = "cosine",
               scale: float = 15.0) -> EmbeddingModel:
    rng = np.random.default_rng(seed)

    def glorot(a, b):
        return rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=(a, b))

    params = {
        "W1": glorot(n_in, hidden), "b1": np.zeros(hidden),
        "W2": glorot(hidden, embedding_dim), "b2": np.zeros(embedding_dim),
        "W3": glorot(embedding_dim, n_speakers), "b3": np.zeros(n_speakers),
    }
    mean = np.zeros(n_in) if input_mean is None else np.asarray(input_mean, float)
    std = np.ones(n_in) if input_std is None else np.asarray(input_std, float)
    if head not in ("cosine", "linear"):
        raise ValueError(f"unknown head {head!r}")
    return EmbeddingModel(feature_config, n_speakers, params, mean, std, head, float(scale))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _safe_unit(a, axis):
    n = np.linalg.norm(a, axis=axis, keepdims=True)
    return np.divide(a, n, out=np.zeros_like(a), where=n > 0), n


def _forward_batch(model: EmbeddingModel, X: np.ndarray, margin: float = 0.0, y=None):
    p = model.params
    xs = (X - model.input_mean) / model.input_std
    h1 = np.tanh(xs @ p["W1"] + p["b1"])
    h2 = np.tanh(h1 @ p["W2"] + p["b2"])
    if model.head == "cosine":
        e, _ = _safe_unit(h2, 1)
        w, _ = _safe_unit(p["W3"], 0)
        logits = model.scale * (e @ w)
        if margin and y is not None:
            logits[np.arange(len(y)), y] -= model.scale * margin
    else:
        logits = h2 @ p["W3"] + p["b3"]
    return xs, h1, h2, _softmax(logits)


def forward(model: EmbeddingModel, pooled: np.ndarray):
    """Return ``(embedding, posteriors)`` for one pooled vector or a batch of them.

    A zero penultimate activation (e.g. an all-zero model) yields a zero embedding.
    """
    X = np.asarray(pooled, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_in:
        raise DimensionMismatch(f"model expects {model.n_in} inputs, got {X.shape[1]}")
    _, _, h2, post = _forward_batch(model, X)
    norms = np.linalg.norm(h2, axis=1, keepdims=True)
    emb = np.divide(h2, norms, out=np.zeros_like(h2), where=norms > 0)
    return (emb[0], post[0]) if single else (emb, post)


def loss_and_grad(model: EmbeddingModel, X: np.ndarray, y: np.ndarray, weight_decay: float = 0.0,
                  margin: float = 0.0):
    """Mean softmax cross-entropy (+ L2 on weight matrices) and its gradient.

    ``margin`` subtracts ``scale * margin`` from the true-class logit of the
    cosine head during training.
    """
    p = model.params
    y = np.asarray(y, dtype=np.int64)
    xs, h1, h2, post = _forward_batch(model, X, margin, y)
    B = X.shape[0]
    loss = -np.mean(np.log(post[np.arange(B), y] + 1e-300))
    loss += 0.5 * weight_decay * sum(np.sum(p[k] ** 2) for k in ("W1", "W2", "W3"))

    dz3 = post.copy()
    dz3[np.arange(B), y] -= 1.0
    dz3 /= B
    grads = {}
    if model.head == "cosine":
        e, he = _safe_unit(h2, 1)
        w, nw = _safe_unit(p["W3"], 0)
        de = model.scale * dz3 @ w.T
        dw = model.scale * e.T @ dz3
        # backprop through x / |x|
        dh2 = np.divide(de - e * np.sum(e * de, axis=1, keepdims=True), he,
                        out=np.zeros_like(de), where=he > 0)
        grads["W3"] = np.divide(dw - w * np.sum(w * dw, axis=0, keepdims=True), nw,
                                out=np.zeros_like(dw), where=nw > 0) + weight_decay * p["W3"]
        grads["b3"] = np.zeros_like(p["b3"])
    else:
        dh2 = dz3 @ p["W3"].T
        grads["W3"] = h2.T @ dz3 + weight_decay * p["W3"]
        grads["b3"] = dz3.sum(axis=0)
    dz2 = dh2 * (1.0 - h2 ** 2)
    dz1 = (dz2 @ p["W2"].T) * (1.0 - h1 ** 2)
    grads["W2"] = h1.T @ dz2 + weight_decay * p["W2"]
    grads["b2"] = dz2.sum(axis=0)
    grads["W1"] = xs.T @ dz1 + weight_decay * p["W1"]
    grads["b1"] = dz1.sum(axis=0)
    return float(loss), grads


def grad_check(model: EmbeddingModel, batch, h: float = 1e-4, n_params: int = 100,
               seed: int = 0, weight_decay: float = 0.0, abs_tol: float = 1e-8,
               margin: float = 0.0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Checks ``n_params`` randomly chosen scalar parameters (all of them if the
    model is smaller). A pair whose absolute difference is below ``abs_tol``
    counts as exact, so zero-gradient parameters do not blow up the ratio.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    X, y = batch
    _, grads = loss_and_grad(model, X, y, weight_decay, margin)
    probe = model.copy()
    names = [k for k in PARAM_NAMES if not (model.head == "cosine" and k == "b3")]
    sizes = np.array([probe.params[k].size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(n_params, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for fi in np.sort(flat_idx):
        k = int(np.searchsorted(bounds, fi, side="right"))
        name = names[k]
        local = fi - (bounds[k - 1] if k else 0)
        arr = probe.params[name].reshape(-1)
        orig = arr[local]
        arr[local] = orig + h
        lp, _ = loss_and_grad(probe, X, y, weight_decay, margin)
        arr[local] = orig - h
        lm, _ = loss_and_grad(probe, X, y, weight_decay, margin)
        arr[local] = orig
        numeric = (lp - lm) / (2 * h)
        analytic = grads[name].reshape(-1)[local]
        diff = abs(analytic - numeric)
        if diff < abs_tol:
            continue
        worst = max(worst, diff / max(abs(analytic), abs(numeric)))
    return worst


def accuracy(model: EmbeddingModel, X: np.ndarray, y: np.ndarray) -> float:
    _, post = forward(model, X)
    return float(np.mean(np.argmax(post, axis=1) == np.asarray(y)))


def train(train_set, val_set, cfg: TrainConfig = TrainConfig(), n_speakers: Optional[int] = None,
          feature_config: FeatureConfig = FeatureConfig()) -> EmbeddingModel:
    """Fit the classifier by mini-batch Adam on softmax cross-entropy.

    ``train_set`` and ``val_set`` are ``(pooled_features, labels)`` pairs.
    Returns the checkpoint with the best validation accuracy; ties go to
    the lower validation loss.
    """
    X, y = np.asarray(train_set[0], float), np.asarray(train_set[1], dtype=np.int64)
    Xv, yv = np.asarray(val_set[0], float), np.asarray(val_set[1], dtype=np.int64)
    if n_speakers is None:
        n_speakers = int(max(y.max(), yv.max())) + 1
    for lab in (y, yv):
        if lab.size and (lab.min() < 0 or lab.max() >= n_speakers):
            raise LabelOutOfRange(f"labels must lie in [0, {n_speakers})")

    std = X.std(axis=0)
    std[std < 1e-8] = 1.0
    model = init_model(X.shape[1], n_speakers, cfg.hidden, cfg.embedding_dim, cfg.seed,
                       feature_config, X.mean(axis=0), std, cfg.head, cfg.scale)
    rng = np.random.default_rng([cfg.seed, 1])
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    def score(mdl):
        loss, _ = loss_and_grad(mdl, Xv, yv)
        return accuracy(mdl, Xv, yv), -loss

    best, best_score, stale = model.copy(), score(model), 0
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = loss_and_grad(model, X[idx], y[idx], cfg.weight_decay, cfg.margin)
            step += 1
            for k, g in grads.items():
                m[k] = beta1 * m[k] + (1 - beta1) * g
                v[k] = beta2 * v[k] + (1 - beta2) * g * g
                mhat = m[k] / (1 - beta1 ** step)
                vhat = v[k] / (1 - beta2 ** step)
                model.params[k] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
        s = score(model)
        if s > best_score:
            best, best_score, stale, best_epoch = model.copy(), s, 0, epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    best.meta = {"best_epoch": best_epoch, "val_accuracy": best_score[0],
                 "train_config": asdict(cfg)}
    return best


def predict(model: EmbeddingModel, w) -> int:
    """Most probable speaker; exact ties go to the lowest id."""
    _, post = forward(model, pool_stats(extract_features(w, model.feature_config)))
    return int(np.argmax(post))


def predict_batch(model: EmbeddingModel, waves) -> np.ndarray:
    _, post = forward(model, featurize(waves, model.feature_config))
    return np.argmax(post, axis=1)


def embed(model: EmbeddingModel, w) -> np.ndarray:
    emb, _ = forward(model, pool_stats(extract_features(w, model.feature_config)))
    return emb


def embed_batch(model: EmbeddingModel, waves) -> np.ndarray:
    emb, _ = forward(model, featurize(waves, model.feature_config))
    return emb


def save_checkpoint(model: EmbeddingModel, path) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "feature_config": asdict(model.feature_config),
        "n_speakers": model.n_speakers,
        "layer_dims": [model.n_in, model.params["W1"].shape[1], model.embedding_dim, model.n_speakers],
        "input_mean": model.input_mean.tolist(),
        "input_std": model.input_std.tolist(),
        "head": model.head,
        "scale": model.scale,
        "params": {k: model.params[k].tolist() for k in PARAM_NAMES},
        "meta": model.meta,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> EmbeddingModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise SchemaVersionMismatch(f"{path}: checkpoint version {doc.get('format_version')}")
    return EmbeddingModel(
        FeatureConfig(**doc["feature_config"]),
        int(doc["n_speakers"]),
        {k: np.asarray(doc["params"][k], dtype=np.float64) for k in PARAM_NAMES},
        np.asarray(doc["input_mean"], dtype=np.float64),
        np.asarray(doc["input_std"], dtype=np.float64),
        doc["head"],
        float(doc["scale"]),
        doc.get("meta", {}),
    )

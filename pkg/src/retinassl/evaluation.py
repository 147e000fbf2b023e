"""Frozen-feature evaluation: linear probe, cosine k-NN, attention maps.

All three protocols read model parameters without mutating them. The probe
is the only trained object here and it is a plain (feature_dim x 5) linear
layer optimized with momentum SGD on softmax cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .crops import bicubic_resize
from .errors import ContractError, InputError, ParameterError
from .vit import EVAL, ViTConfig, encoder_forward, last_layer_attention, patch_embed

N_CLASSES = 5


@dataclass
class EmbeddingIndex:
    """L2-normalized feature rows with their grade labels."""
    features: np.ndarray  # (n, d), unit rows
    labels: np.ndarray    # (n,), each in 0..4

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ContractError("features and labels disagree in length")
        if len(self.features):
            norms = np.linalg.norm(self.features, axis=1)
            if not np.all(np.abs(norms - 1.0) <= 1e-6):
                raise ContractError("index rows must be unit-norm (zero rows forbidden)")
        if len(self.labels) and not np.all((self.labels >= 0) & (self.labels < N_CLASSES)):
            raise ContractError("labels outside the 5-grade range")


@dataclass
class LinearProbe:
    weight: np.ndarray  # (feature_dim, 5)
    bias: np.ndarray    # (5,)


@dataclass
class Metrics:
    accuracy: float
    precision: np.ndarray       # (5,)
    recall: np.ndarray          # (5,)
    confusion: np.ndarray       # (5, 5) counts, rows = true grade

    def report_text(self) -> str:
        lines = [f"accuracy = {self.accuracy:.6f}"]
        for c in range(N_CLASSES):
            lines.append(f"precision[{c}] = {self.precision[c]:.6f}")
            lines.append(f"recall[{c}] = {self.recall[c]:.6f}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        header = "true\\pred," + ",".join(str(c) for c in range(N_CLASSES))
        rows = [header]
        for c in range(N_CLASSES):
            rows.append(str(c) + "," + ",".join(str(int(v)) for v in self.confusion[c]))
        return "\n".join(rows) + "\n"


@dataclass
class ProbeConfig:
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 32
    flip_augment: bool = True
    seed: int = 0


@dataclass
class KnnConfig:
    k: int = 20
    temperature: float = 0.07
    majority: bool = False  # plain majority voting instead of weighted


def extract_features(backbone_params: dict[str, Tensor], images: np.ndarray,
                     config: ViTConfig, n_last_blocks: int = 1) -> np.ndarray:
    """Concatenated CLS outputs of the last n_last_blocks blocks, no pooling.

    Returns (n_images, n_last_blocks * n_cls_tokens * embed_dim).
    """
    if n_last_blocks < 1 or n_last_blocks > config.depth:
        raise ParameterError(f"n_last_blocks must be in 1..{config.depth}")
    tokens = patch_embed(images, config, backbone_params)
    out = encoder_forward(tokens, config, backbone_params, mode=EVAL,
                          collect_block_cls=n_last_blocks)
    feats = [blk.data for blk in out.block_cls]  # each (n, n_cls, d)
    stacked = np.concatenate(feats, axis=1)
    return stacked.reshape(len(images), -1)


def _resize_batch(images: np.ndarray, size: int) -> np.ndarray:
    return np.stack([bicubic_resize(img, size) for img in images])


def probe_eval_transform(images: np.ndarray, target_size: int) -> np.ndarray:
    """Test-time transform: resize to ceil(8/7 * s), center-crop to s."""
    big = int(np.ceil(target_size * 8.0 / 7.0))
    resized = _resize_batch(images, big)
    off = (big - target_size) // 2
    return resized[:, :, off:off + target_size, off:off + target_size]


def probe_train_transform(images: np.ndarray, target_size: int,
                          rng: np.random.Generator, flip: bool = True) -> np.ndarray:
    """Train-time transform: resize to the model size + random horizontal flip."""
    out = _resize_batch(images, target_size)
    if flip:
        do = rng.random(len(out)) < 0.5
        out[do] = out[do][:, :, :, ::-1]
    return out


def probe_lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine from base_lr to exactly 0 at the final step."""
    if total_steps <= 1:
        return base_lr
    t = step / (total_steps - 1)
    return base_lr * (1.0 + np.cos(np.pi * t)) / 2.0


def train_linear_probe(features: np.ndarray, labels: np.ndarray,
                       config: ProbeConfig | None = None) -> LinearProbe:
    """Momentum SGD on softmax cross-entropy over frozen features."""
    config = config or ProbeConfig()
    n, d = features.shape if features.ndim == 2 else (0, 0)
    if n == 0:
        raise InputError("empty probe training set")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9806E]))
    w = Tensor(np.zeros((d, N_CLASSES)), requires_grad=True)
    b = Tensor(np.zeros(N_CLASSES), requires_grad=True)
    vel = {id(w): np.zeros_like(w.data), id(b): np.zeros_like(b.data)}
    onehot = np.eye(N_CLASSES)[labels]
    bs = min(config.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total = config.epochs * steps_per_epoch
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * bs:(s + 1) * bs]
            x, y = features[idx], onehot[idx]
            with Tape() as tape:
                logits = ad.matmul(Tensor(x), w) + b
                logp = ad.log_softmax_rows(logits, 1.0)
                loss = ad.mean(ad.cross_entropy_rows(y, logp))
            w.grad = None
            b.grad = None
            backward(loss, tape, leaves=(w, b))
            lr = probe_lr_at(step, total, config.lr)
            for p in (w, b):
                v = vel[id(p)]
                v *= config.momentum
                v += p.grad
                p.data = p.data - lr * v
            step += 1
    return LinearProbe(weight=w.data.copy(), bias=b.data.copy())


def probe_predict(probe: LinearProbe, features: np.ndarray) -> np.ndarray:
    logits = features @ probe.weight + probe.bias
    return np.argmax(logits, axis=1)


def knn_classify(index: EmbeddingIndex, query: np.ndarray,
                 config: KnnConfig | None = None) -> np.ndarray:
    """Cosine k-NN with exp(sim/T)-weighted voting.

    query: (m, d) L2-normalized rows. Ties break toward the lowest grade,
    and among equal similarities toward the lowest index row, so results
    are deterministic.
    """
    config = config or KnnConfig()
    n = len(index.features)
    if n == 0:
        raise InputError("empty embedding index")
    if not 1 <= config.k <= n:
        raise InputError(f"k={config.k} outside 1..{n}")
    query = np.atleast_2d(query)
    sims = query @ index.features.T  # (m, n) cosine since rows are unit
    preds = np.zeros(len(query), dtype=np.int64)
    for i, row in enumerate(sims):
        # stable selection: sort by (-similarity, index)
        order = np.lexsort((np.arange(n), -row))[:config.k]
        votes = np.zeros(N_CLASSES)
        for j in order:
            weight = 1.0 if config.majority else np.exp(row[j] / config.temperature)
            votes[index.labels[j]] += weight
        preds[i] = int(np.argmax(votes))  # argmax takes the lowest grade on ties
    return preds


def attention_heatmaps(backbone_params: dict[str, Tensor], image: np.ndarray,
                       config: ViTConfig) -> np.ndarray:
    """Per-(head, CLS) last-layer attention maps upsampled to image size.

    Returns (n_heads, n_cls_tokens, H, W) with each map min-max normalized
    to [0, 1]; a constant map normalizes to all zeros.
    """
    rows = last_layer_attention(image, config, backbone_params)  # (h, c, patches)
    g = config.grid
    h, w = image.shape[-2:]
    maps = np.zeros((config.n_heads, config.n_cls_tokens, h, w))
    for hi in range(config.n_heads):
        for ci in range(config.n_cls_tokens):
            coarse = rows[hi, ci].reshape(g, g)
            big = bicubic_resize(coarse[None], (h, w))[0]
            lo, hi_v = big.min(), big.max()
            if hi_v - lo > 0:
                maps[hi, ci] = (big - lo) / (hi_v - lo)
    return maps


def compute_metrics(predictions: np.ndarray, labels: np.ndarray) -> Metrics:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise InputError("predictions and labels differ in length")
    if len(labels) and not (np.all((predictions >= 0) & (predictions < N_CLASSES))
                            and np.all((labels >= 0) & (labels < N_CLASSES))):
        raise InputError("grades must lie in 0..4")
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for p, t in zip(predictions, labels):
        confusion[t, p] += 1
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    tp = np.diag(confusion).astype(np.float64)
    pred_tot = confusion.sum(axis=0).astype(np.float64)
    true_tot = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
    return Metrics(accuracy, precision, recall, confusion)


def build_index(backbone_params: dict[str, Tensor], images: np.ndarray,
                labels: np.ndarray, config: ViTConfig,
                n_last_blocks: int = 1) -> EmbeddingIndex:
    """Extract features and L2-normalize them into an EmbeddingIndex."""
    feats = extract_features(backbone_params, images, config, n_last_blocks)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    norms = np.where(norms < 1e-12, 1.0, norms)
    return EmbeddingIndex(feats / norms, np.asarray(labels))

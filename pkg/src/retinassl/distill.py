"""Student/teacher self-distillation training loop.

One training step: teacher forward on the global views (tape-free), student
forward on all views, summed multi-view cross-entropy between sharpened
teacher targets and student log-probabilities, backward into the student
only, global-norm gradient clipping, a decoupled-weight-decay adaptive
update under warmup+cosine schedules, an EMA update of the teacher, and a
momentum update of the output center.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .crops import MultiCropConfig, build_multicrop
from .errors import ContractError, ParameterError, TrainingError
from .vit import (
    EVAL,
    TRAIN,
    ProjectionHeadConfig,
    ViTConfig,
    backbone_forward,
    init_backbone_params,
    init_head_params,
    projection_head_forward,
)

METRICS_HEADER = "step\tepoch\tloss\tlr\twd\tlambda\tteacher_entropy"


@dataclass
class DistillConfig:
    tau_s: float = 0.1            # student sharpening temperature
    tau_t: float = 0.04           # teacher sharpening temperature
    center_momentum: float = 0.9  # m in the center EMA
    ema_start: float = 0.99       # lambda schedule endpoints
    ema_end: float = 1.0
    clip_threshold: float = 3.0
    wd_start: float = 0.04
    wd_end: float = 0.4
    base_lr: float = 0.0005       # peak lr = base_lr * batch_size / 256
    lr_floor: float = 1e-6
    warmup_epochs: int = 10
    total_epochs: int = 100
    batch_size: int = 8
    center_sign: float = -1.0     # -1: subtract the center from teacher logits
    freeze_last_steps: int = 0    # steps with the prototype layer held fixed

    def __post_init__(self):
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ParameterError("temperatures must be positive")
        if not (0.0 <= self.center_momentum < 1.0):
            raise ParameterError(f"center momentum must be in [0, 1), got {self.center_momentum}")
        if not (0.99 <= self.ema_start <= self.ema_end <= 1.0):
            raise ParameterError(
                f"ema schedule must satisfy 0.99 <= start <= end <= 1, "
                f"got {self.ema_start}..{self.ema_end}")
        if self.clip_threshold <= 0:
            raise ParameterError("clip_threshold must be positive")
        if self.batch_size < 1 or self.total_epochs < 1 or self.warmup_epochs < 0:
            raise ParameterError("invalid epoch/batch configuration")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0


@dataclass
class TrainState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    center: np.ndarray
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def init_train_state(vit_config: ViTConfig, head_config: ProjectionHeadConfig,
                     seed: int, init_std: float = 0.02) -> TrainState:
    """Fresh state: teacher starts as an exact copy of the student, center
    starts at zero, optimizer moments at zero."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD150]))
    student = init_backbone_params(vit_config, rng, requires_grad=True, std=init_std)
    student.update(init_head_params(
        head_config, vit_config.n_cls_tokens * vit_config.embed_dim,
        rng, requires_grad=True, std=init_std))
    teacher = {k: Tensor(v.data.copy(), requires_grad=False) for k, v in student.items()}
    return TrainState(
        student=student,
        teacher=teacher,
        center=np.zeros(head_config.output_dim),
        opt_m={k: np.zeros_like(v.data) for k, v in student.items()},
        opt_v={k: np.zeros_like(v.data) for k, v in student.items()},
        step=0,
        rng=np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED])),
    )


# ---------------------------------------------------------------------------
# the individual update rules
# ---------------------------------------------------------------------------

def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], lam: float) -> None:
    """w_t <- lam * w_t + (1 - lam) * w_s, elementwise, in place."""
    if not (0.0 <= lam <= 1.0):
        raise ParameterError(f"lambda must be in [0, 1], got {lam}")
    if teacher.keys() != student.keys():
        raise ContractError("teacher/student parameter sets differ")
    for name, wt in teacher.items():
        ws = student[name]
        if wt.shape != ws.shape:
            raise ContractError(f"shape mismatch for {name}: {wt.shape} vs {ws.shape}")
        wt.data = lam * wt.data + (1.0 - lam) * ws.data


def center_update(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """C <- m*C + (1-m) * batch mean of the teacher output vectors."""
    if teacher_logits.ndim != 2 or teacher_logits.shape[0] == 0:
        raise ContractError("center_update needs a nonempty (n, K) logit batch")
    if not (0.0 <= momentum < 1.0):
        raise ParameterError(f"momentum must be in [0, 1), got {momentum}")
    return momentum * center + (1.0 - momentum) * teacher_logits.mean(axis=0)


def teacher_probs(teacher_logits: np.ndarray, center: np.ndarray, tau_t: float,
                  center_sign: float = -1.0) -> np.ndarray:
    """Centered, sharpened teacher targets: softmax((O_t + sign*C) / tau_t).

    Plain numpy; no gradient ever flows through the teacher path.
    """
    if tau_t <= 0:
        raise ParameterError(f"tau_t must be positive, got {tau_t}")
    z = (teacher_logits + center_sign * center) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def student_log_probs(student_logits: Tensor, tau_s: float) -> Tensor:
    """Numerically stable log-softmax of O_s / tau_s; differentiable."""
    return ad.log_softmax_rows(student_logits, tau_s)


def distillation_loss(teacher_probs_by_crop: dict[int, np.ndarray],
                      student_logprobs_by_crop: dict[int, Tensor]) -> Tensor:
    """Summed multi-view cross entropy.

    Keys are crop indices (provenance tags). Every (teacher crop x, student
    crop x') pair with x' != x contributes one cross-entropy term; terms are
    summed over pairs and averaged over the image batch. With 2 teacher
    globals and 8 student views that is 2 * 7 = 14 terms.
    """
    if not teacher_probs_by_crop or not student_logprobs_by_crop:
        raise ContractError("distillation_loss needs tagged teacher and student views")
    missing = set(teacher_probs_by_crop) - set(student_logprobs_by_crop)
    if missing:
        raise ContractError(f"student views missing for teacher crops {sorted(missing)}")

    terms = []
    for t_crop, p_t in teacher_probs_by_crop.items():
        batch = p_t.shape[0]
        for s_crop, log_p in student_logprobs_by_crop.items():
            if s_crop == t_crop:
                continue
            ce = ad.cross_entropy_rows(p_t, log_p)  # (batch,)
            terms.append(ad.tensor_sum(ce) * (1.0 / batch))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def clip_gradients(grads: dict[str, np.ndarray], threshold: float,
                   ) -> tuple[dict[str, np.ndarray], float]:
    """Global L2-norm clipping: if the joint norm exceeds the threshold, all
    gradients are scaled by threshold / norm. Returns (grads, pre-clip norm)."""
    if threshold <= 0:
        raise ParameterError(f"threshold must be positive, got {threshold}")
    sq = sum(float((g * g).sum()) for g in grads.values())
    norm = np.sqrt(sq)
    if norm > threshold:
        factor = threshold / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def schedule_value(kind: str, step: int, steps_per_epoch: int, config: DistillConfig) -> float:
    """Scheduled lr / weight_decay / ema_lambda at a global step.

    lr: linear 0 -> peak over the warmup epochs, then half-cosine to the
    floor. weight_decay and ema_lambda: half-cosine between their endpoints
    over the whole run.
    """
    total = config.total_epochs * steps_per_epoch
    if not (0 <= step <= total):
        raise ContractError(f"step {step} outside [0, {total}]")

    def half_cosine(start, end, t):
        # Written start-first so t=0 returns the start value exactly.
        return start + (end - start) * (1.0 - np.cos(np.pi * t)) / 2.0

    if kind == "lr":
        warmup = config.warmup_epochs * steps_per_epoch
        if warmup > 0 and step < warmup:
            return config.peak_lr * step / warmup
        span = max(total - warmup, 1)
        t = (step - warmup) / span
        return float(half_cosine(config.peak_lr, config.lr_floor, t))
    if kind == "weight_decay":
        return float(half_cosine(config.wd_start, config.wd_end, step / max(total, 1)))
    if kind == "ema_lambda":
        return float(half_cosine(config.ema_start, config.ema_end, step / max(total, 1)))
    raise ParameterError(f"unknown schedule kind {kind!r}")


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   opt_m: dict[str, np.ndarray], opt_v: dict[str, np.ndarray],
                   t: int, lr: float, weight_decay: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected adaptive-moment update with decoupled weight decay.

    Decay applies to weight matrices only (ndim >= 2), not to biases,
    normalization affine parameters, or the weight-norm magnitudes.
    """
    if lr < 0 or weight_decay < 0:
        raise ParameterError("lr and weight_decay must be nonnegative")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = opt_m[name] = beta1 * opt_m[name] + (1.0 - beta1) * g
        v = opt_v[name] = beta2 * opt_v[name] + (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        wd = weight_decay if p.data.ndim >= 2 else 0.0
        p.data = p.data - lr * (update + wd * p.data)


# ---------------------------------------------------------------------------
# forward helpers
# ---------------------------------------------------------------------------

def _stack_views(view_lists, selector):
    """Group equally-sized views by crop index into (crop -> (B, 3, s, s))."""
    by_crop: dict[int, list[np.ndarray]] = {}
    for views in view_lists:
        for v in views:
            if selector(v):
                by_crop.setdefault(v.crop_index, []).append(v.pixels)
    return {c: np.stack(vs) for c, vs in by_crop.items()}


def _forward_logits(images: np.ndarray, vit_config: ViTConfig,
                    head_config: ProjectionHeadConfig, params: dict[str, Tensor],
                    mode: str, rng) -> Tensor:
    out = backbone_forward(images, vit_config, params, mode=mode, rng=rng)
    return projection_head_forward(out.cls_features, head_config, params)


def mean_entropy(probs: np.ndarray) -> float:
    """Batch-mean Shannon entropy of probability rows (natural log)."""
    p = np.clip(probs, 1e-300, 1.0)
    return float(-(p * np.log(p)).sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# one full training step
# ---------------------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    epoch: int
    loss: float
    lr: float
    wd: float
    ema_lambda: float
    teacher_entropy: float

    def format_line(self) -> str:
        return (f"{self.step}\t{self.epoch}\t{self.loss:.10g}\t{self.lr:.10g}"
                f"\t{self.wd:.10g}\t{self.ema_lambda:.10g}\t{self.teacher_entropy:.10g}")


def train_step(images: np.ndarray, state: TrainState, vit_config: ViTConfig,
               head_config: ProjectionHeadConfig, crop_config: MultiCropConfig,
               distill_config: DistillConfig, steps_per_epoch: int,
               update_center: bool = True) -> StepMetrics:
    """Run one optimization step on a batch of source images (B, 3, H, W).

    Order of effects: teacher forward (tape-free), student forward, loss,
    backward (student only), clip, optimizer step, EMA teacher update,
    center update from this step's teacher logits.
    """
    cfg = distill_config
    b = images.shape[0]
    rng = state.rng

    batches = [build_multicrop(img, crop_config, rng) for img in images]

    # Teacher path: tape-free, eval mode, current center.
    teacher_by_crop = _stack_views((bt.teacher_views for bt in batches), lambda v: True)
    teacher_logits: dict[int, np.ndarray] = {}
    for crop, stack in sorted(teacher_by_crop.items()):
        logits = _forward_logits(stack, vit_config, head_config, state.teacher,
                                 EVAL, None)
        teacher_logits[crop] = logits.data
    p_t = {c: teacher_probs(o, state.center, cfg.tau_t, cfg.center_sign)
           for c, o in teacher_logits.items()}

    # Student path: taped, train mode (stochastic depth active).
    student_global = _stack_views((bt.student_views for bt in batches), lambda v: v.is_global)
    student_local = _stack_views((bt.student_views for bt in batches), lambda v: not v.is_global)

    leaves = list(state.student.values())
    with Tape() as tape:
        log_p_s: dict[int, Tensor] = {}
        for group in (student_global, student_local):
            if not group:
                continue
            crops_sorted = sorted(group)
            stacked = np.concatenate([group[c] for c in crops_sorted])
            logits = _forward_logits(stacked, vit_config, head_config, state.student,
                                     TRAIN, rng)
            for i, c in enumerate(crops_sorted):
                log_p_s[c] = student_log_probs(logits[i * b:(i + 1) * b], cfg.tau_s)
        loss = distillation_loss(p_t, log_p_s)

    loss_val = loss.item()
    if not np.isfinite(loss_val):
        raise TrainingError(f"non-finite loss {loss_val} at step {state.step}",
                            step=state.step, loss=loss_val)

    for p in leaves:
        p.zero_grad()
    backward(loss, tape, leaves=leaves)
    grads = {k: p.grad for k, p in state.student.items()}
    if state.step < cfg.freeze_last_steps:
        # keep the prototype layer fixed early on; with few images and an
        # aggressive lr the prototypes otherwise align into one direction
        # and the centered teacher goes uniform
        for key in ("head.last.dir", "head.last.mag"):
            grads[key] = np.zeros_like(grads[key])
    grads, _ = clip_gradients(grads, cfg.clip_threshold)

    lr = schedule_value("lr", state.step, steps_per_epoch, cfg)
    wd = schedule_value("weight_decay", state.step, steps_per_epoch, cfg)
    lam = schedule_value("ema_lambda", state.step, steps_per_epoch, cfg)

    optimizer_step(state.student, grads, state.opt_m, state.opt_v,
                   t=state.step + 1, lr=lr, weight_decay=wd)
    ema_update(state.teacher, state.student, lam)

    all_teacher = np.concatenate(list(teacher_logits.values()))
    if update_center:
        state.center = center_update(state.center, all_teacher, cfg.center_momentum)

    entropy = mean_entropy(np.concatenate(list(p_t.values())))
    state.step += 1
    return StepMetrics(
        step=state.step, epoch=(state.step - 1) // steps_per_epoch, loss=loss_val,
        lr=lr, wd=wd, ema_lambda=lam, teacher_entropy=entropy)


def train_loop(images: np.ndarray, state: TrainState, vit_config: ViTConfig,
               head_config: ProjectionHeadConfig, crop_config: MultiCropConfig,
               distill_config: DistillConfig, n_steps: int,
               log_lines: list | None = None,
               step_callback=None, update_center: bool = True) -> None:
    """Run n_steps of training over a fixed image array (N, 3, H, W).

    Batches are drawn by sampling indices from the state rng, so a resumed
    run (with the restored rng) continues the exact same batch sequence.
    """
    n = images.shape[0]
    b = min(distill_config.batch_size, n)
    steps_per_epoch = max(1, int(np.ceil(n / b)))
    for _ in range(n_steps):
        idx = state.rng.choice(n, size=b, replace=False)
        metrics = train_step(images[idx], state, vit_config, head_config,
                             crop_config, distill_config, steps_per_epoch,
                             update_center=update_center)
        if log_lines is not None:
            log_lines.append(metrics.format_line())
        if step_callback is not None:
            step_callback(metrics, state)

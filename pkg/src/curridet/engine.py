"""Student-teacher self-training loop with the five-policy curriculum.

One epoch: labelled minibatches are weak-augmented and scored against
ground truth; a same-sized unlabelled minibatch is thinned by the sampling
rate pi_t, pseudo-labelled by the EMA teacher (confidence filter sigma_t),
strong-augmented, and scored as the unsupervised term. The combined
gradient grad(L) + alpha_t * grad(L') drives one optimizer step per
minibatch; the teacher is updated once per epoch (or per step, see
config) as an exponential moving average of the student with momentum
m_t. The teacher is the deployed/evaluated model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detector as det
from .augment import strong_augment, weak_augment
from .datagen import Scene, Split, split_pld
from .detector import (
    DetectorConfig,
    ModelParams,
    OptimizerConfig,
    OptState,
)
from .geometry import apply_transforms
from .metrics import LabelSet, MetricsRecord, average_precision, coco_metrics
from .schedules import (
    PolicyBundle,
    PolicySnapshot,
    covariance_diagnostic,
    sample_unlabelled,
    snapshot,
)

DIAG_PROBE_SIZE = 32  # unlabelled scenes probed for confidence statistics


@dataclass
class StepLog:
    epoch: int
    loss_sup: float
    loss_unsup: float
    loss_all: float
    pi: float
    alpha: float
    sigma: float
    momentum: float
    n_pseudo_09: float
    n_pseudo_05: float
    ap50: Optional[float] = None
    cov: float = 0.0
    unsup_active: bool = False

    def to_json(self) -> str:
        d = {
            "epoch": self.epoch,
            "loss_sup": self.loss_sup,
            "loss_unsup": self.loss_unsup,
            "loss_all": self.loss_all,
            "pi": self.pi,
            "alpha": self.alpha,
            "sigma": self.sigma,
            "momentum": self.momentum,
            "n_pseudo_09": self.n_pseudo_09,
            "n_pseudo_05": self.n_pseudo_05,
            "ap50": self.ap50,
            "cov": self.cov,
            "unsup_active": self.unsup_active,
        }
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "StepLog":
        d = json.loads(line)
        return StepLog(**d)


@dataclass
class TrainerState:
    student: ModelParams
    teacher: ModelParams
    opt_state: OptState
    epoch: int
    total_epochs: int
    history: List[StepLog] = field(default_factory=list)


@dataclass(frozen=True)
class RunConfig:
    bundle: PolicyBundle
    detector: DetectorConfig = DetectorConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 60
    batch_size: int = 16
    labelled_ratio: float = 0.1
    fold_seed: int = 0
    seed: int = 0
    init: str = "warmstart"  # or "random"
    warmup_frac: float = 0.25  # supervised-only span under warmstart init
    val_every: int = 5
    checkpoint_every: int = 0
    lr_decay_frac: float = 0.8
    lr_decay_factor: float = 0.1
    ema_per_step: bool = True
    init_scale: float = 0.1
    val_model: str = "teacher"  # or "student"

    def __post_init__(self):
        if self.init not in ("warmstart", "random"):
            raise ValueError("init must be 'warmstart' or 'random'")
        if self.val_model not in ("teacher", "student"):
            raise ValueError("val_model must be 'teacher' or 'student'")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size positive")


@dataclass
class RunArtifacts:
    state: TrainerState
    history: List[StepLog]
    checkpoints: Dict[int, ModelParams]
    split: Split


def ema_update(teacher: ModelParams, student: ModelParams, m_t: float) -> ModelParams:
    """Elementwise convex combination m*teacher + (1-m)*student."""
    if not (0.0 < m_t < 1.0):
        raise ValueError("momentum must lie in (0, 1)")
    if teacher.vector.shape != student.vector.shape:
        raise ValueError("teacher and student shapes differ")
    return ModelParams(
        m_t * teacher.vector + (1.0 - m_t) * student.vector, teacher.config
    )


def generate_pseudo_labels(
    teacher: ModelParams,
    image: np.ndarray,
    snap: PolicySnapshot,
    rng: np.random.Generator,
    predict_fn: Optional[Callable] = None,
) -> Tuple[np.ndarray, LabelSet]:
    """Weak-augment, predict with the teacher, filter by confidence
    zeta > sigma_t, then strong-augment with the surviving boxes mapped
    into the strong frame. Returns the strong image and its pseudo
    labels."""
    predict_fn = predict_fn or det.predict
    weak = weak_augment(image, snap.aug, rng)
    dets = predict_fn(teacher, weak.image, 0.0)
    kept = [d for d in dets if d.score > snap.sigma_t]
    labels = LabelSet([d.box for d in kept], [d.class_id for d in kept])
    strong, mapped = strong_augment(weak.image, labels, snap.aug, rng)
    return strong.image, mapped


def pseudo_label_stats(
    teacher: ModelParams, scenes: Sequence[Scene]
) -> Tuple[float, float]:
    """Average number of teacher detections per scene with confidence
    above 0.9 and above 0.5 (no threshold applied)."""
    if not scenes:
        return 0.0, 0.0
    images = np.stack([s.image for s in scenes])
    out, _, _ = det.forward_raw(teacher, images)
    n09 = n05 = 0
    for b in range(len(scenes)):
        for d in det.decode_detections(out[b], teacher.config, 0.0):
            if d.score > 0.9:
                n09 += 1
            if d.score > 0.5:
                n05 += 1
    return n09 / len(scenes), n05 / len(scenes)


def _augment_labelled(
    scene: Scene, snap: PolicySnapshot, rng: np.random.Generator
) -> Tuple[np.ndarray, LabelSet]:
    out = weak_augment(scene.image, snap.aug, rng)
    boxes, classes = [], []
    for b, c in zip(scene.labels.boxes, scene.labels.classes):
        mapped = apply_transforms(out.transforms, b)
        if mapped is not None:
            boxes.append(mapped)
            classes.append(c)
    return out.image, LabelSet(boxes, classes)


def _batch_loss_and_grad(
    params: ModelParams, images: List[np.ndarray], labels: List[LabelSet]
) -> Tuple[float, np.ndarray]:
    """Mean loss over a batch and the mean parameter gradient."""
    stack = np.stack(images)
    out, _, _ = det.forward_raw(params, stack)
    cfg = params.config
    grads = np.zeros_like(out)
    losses = np.zeros(len(images))
    for i in range(len(images)):
        losses[i], grads[i] = det.loss_grad_at_raw(out[i], labels[i], cfg)
    grad_vec = det.backward_batch(params, stack, grads) / len(images)
    return float(losses.mean()), grad_vec


def evaluate_detector(
    params: ModelParams, scenes: Sequence[Scene], floor: float = 0.0
) -> MetricsRecord:
    preds, gts = _predictions_for(params, scenes, floor)
    return coco_metrics(preds, gts)


def _predictions_for(params: ModelParams, scenes: Sequence[Scene], floor: float = 0.0):
    images = np.stack([s.image for s in scenes])
    out, _, _ = det.forward_raw(params, images)
    preds = [
        det.decode_detections(out[i], params.config, floor)
        for i in range(len(scenes))
    ]
    gts = [s.labels for s in scenes]
    return preds, gts


def train_epoch(
    state: TrainerState,
    labelled: Sequence[Scene],
    unlabelled: Sequence[Scene],
    snap: PolicySnapshot,
    cfg: RunConfig,
    rng_label: np.random.Generator,
    rng_unlabel: np.random.Generator,
    lr: float,
) -> StepLog:
    """One pass over the labelled pool with the given policy snapshot."""
    if not labelled:
        raise ValueError("labelled pool must be nonempty")
    order = rng_label.permutation(len(labelled))
    n_batches = 0
    sup_sum = unsup_sum = all_sum = 0.0
    any_unsup = False
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        images, labels = [], []
        for i in idx:
            img, lab = _augment_labelled(labelled[i], snap, rng_label)
            images.append(img)
            labels.append(lab)
        loss_sup, grad = _batch_loss_and_grad(state.student, images, labels)

        loss_unsup = 0.0
        if unlabelled and snap.pi_t > 0.0:
            pick = rng_unlabel.integers(0, len(unlabelled), size=len(idx))
            admitted = sample_unlabelled([int(j) for j in pick], snap.pi_t, rng_unlabel)
            if admitted and snap.alpha_t != 0.0:
                u_images, u_labels = [], []
                for j in admitted:
                    img, lab = generate_pseudo_labels(
                        state.teacher, unlabelled[j].image, snap, rng_unlabel
                    )
                    u_images.append(img)
                    u_labels.append(lab)
                loss_unsup, u_grad = _batch_loss_and_grad(
                    state.student, u_images, u_labels
                )
                grad = grad + snap.alpha_t * u_grad
                any_unsup = True

        state.student, state.opt_state = det.optimizer_step(
            state.student, grad, state.opt_state, cfg.optimizer, lr=lr
        )
        if cfg.ema_per_step:
            state.teacher = ema_update(state.teacher, state.student, snap.m_t)
        sup_sum += loss_sup
        unsup_sum += loss_unsup
        all_sum += loss_sup + snap.alpha_t * loss_unsup
        n_batches += 1

    if not cfg.ema_per_step:
        state.teacher = ema_update(state.teacher, state.student, snap.m_t)

    probe = unlabelled[:DIAG_PROBE_SIZE] if unlabelled else []
    n09, n05 = pseudo_label_stats(state.teacher, probe)
    return StepLog(
        epoch=state.epoch,
        loss_sup=sup_sum / n_batches,
        loss_unsup=unsup_sum / n_batches,
        loss_all=all_sum / n_batches,
        pi=snap.pi_t,
        alpha=snap.alpha_t,
        sigma=snap.sigma_t,
        momentum=snap.m_t,
        n_pseudo_09=n09,
        n_pseudo_05=n05,
        unsup_active=any_unsup,
    )


def _history_covariance(history: Sequence[StepLog]) -> float:
    pairs = [(h.loss_unsup, h.pi) for h in history if h.unsup_active]
    if len(pairs) < 2:
        return 0.0
    return covariance_diagnostic([p[0] for p in pairs], [p[1] for p in pairs])


def run_training(
    cfg: RunConfig,
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    split: Optional[Split] = None,
) -> RunArtifacts:
    """Execute the full loop for cfg.epochs epochs; deterministic per
    seed. Under warmstart init the first warmup_frac span trains
    supervised-only regardless of the sampling schedule."""
    if split is None:
        split = split_pld(train_scenes, cfg.labelled_ratio, cfg.fold_seed)
    labelled = [train_scenes[i] for i in split.labelled]
    unlabelled = [train_scenes[i] for i in split.unlabelled]

    ss = np.random.SeedSequence(cfg.seed)
    s_init, s_label, s_unlabel = ss.spawn(3)
    rng_init = np.random.Generator(np.random.PCG64(s_init))
    rng_label = np.random.Generator(np.random.PCG64(s_label))
    rng_unlabel = np.random.Generator(np.random.PCG64(s_unlabel))

    student = det.init_params(cfg.detector, rng_init, scale=cfg.init_scale)
    state = TrainerState(
        student=student,
        teacher=student.copy(),
        opt_state=OptState.zeros(cfg.detector.n_params),
        epoch=0,
        total_epochs=cfg.epochs,
    )
    checkpoints: Dict[int, ModelParams] = {}
    warm_epochs = int(round(cfg.warmup_frac * cfg.epochs)) if cfg.init == "warmstart" else 0

    for t in range(cfg.epochs):
        state.epoch = t
        snap = snapshot(cfg.bundle, t, cfg.epochs)
        if t < warm_epochs:
            snap = PolicySnapshot(0.0, snap.alpha_t, snap.sigma_t, snap.m_t, snap.aug)
        lr = cfg.optimizer.lr
        if t >= cfg.lr_decay_frac * cfg.epochs:
            lr *= cfg.lr_decay_factor
        log = train_epoch(
            state, labelled, unlabelled, snap, cfg, rng_label, rng_unlabel, lr
        )
        if val_scenes and (
            (t + 1) % cfg.val_every == 0 or t == cfg.epochs - 1
        ):
            watched = state.teacher if cfg.val_model == "teacher" else state.student
            log.ap50 = float(
                average_precision(*_predictions_for(watched, val_scenes), 0.5)
            )
        state.history.append(log)
        log.cov = _history_covariance(state.history)
        if cfg.checkpoint_every > 0 and (
            (t + 1) % cfg.checkpoint_every == 0 or t == cfg.epochs - 1
        ):
            checkpoints[t] = state.teacher.copy()

    return RunArtifacts(state, state.history, checkpoints, split)


def detect_cycle_regime(
    history: Sequence[StepLog],
    window: int = 6,
    ap_slope_thresh: float = 0.001,
    count_slope_thresh: float = 0.0,
) -> str:
    """Classify the trailing trend: 'virtuous' when validation AP50 rises
    with rising confident pseudo-label counts, 'vicious' when AP50 falls
    while counts rise, else 'indeterminate'. `window` counts validation
    points."""
    if window < 2:
        raise ValueError("window must be >= 2")
    ap_points = [(h.epoch, h.ap50) for h in history if h.ap50 is not None]
    if len(ap_points) < window:
        return "indeterminate"
    tail = ap_points[-window:]
    epochs = np.array([p[0] for p in tail], dtype=float)
    aps = np.array([p[1] for p in tail], dtype=float)
    ap_slope = float(np.polyfit(epochs, aps, 1)[0])
    span = [h for h in history if epochs[0] <= h.epoch <= epochs[-1]]
    count_epochs = np.array([h.epoch for h in span], dtype=float)
    counts = np.array([h.n_pseudo_09 for h in span], dtype=float)
    count_slope = float(np.polyfit(count_epochs, counts, 1)[0])
    if count_slope > count_slope_thresh:
        if ap_slope > ap_slope_thresh:
            return "virtuous"
        if ap_slope < -ap_slope_thresh:
            return "vicious"
    return "indeterminate"


def write_history(path, history: Sequence[StepLog]) -> None:
    with open(path, "w") as fh:
        for h in history:
            fh.write(h.to_json() + "\n")


def read_history(path) -> List[StepLog]:
    with open(path) as fh:
        return [StepLog.from_json(line) for line in fh if line.strip()]

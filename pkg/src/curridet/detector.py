"""A minimal trainable set-prediction detector.

The image is average-pooled over a fixed grid per channel and fed to a
two-layer perceptron that emits, for each of Q query slots, C+1 class
logits (last class = no-object) and 4 box parameters squashed to center
form (cx, cy, w, h) via a sigmoid. Queries are matched one-to-one to
targets by minimum-cost assignment; unmatched queries are pushed to the
no-object class with a down-weighted penalty. All gradients are analytic.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BBox
from .metrics import Detection, LabelSet

CHECKPOINT_MAGIC = "curridet-params v1"


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 32
    pool_grid: int = 4
    hidden: int = 32
    queries: int = 8
    num_classes: int = 2
    reg_weight: float = 5.0
    noobj_weight: float = 0.1

    def __post_init__(self):
        if self.image_size % self.pool_grid != 0:
            raise ValueError("image_size must be divisible by pool_grid")

    @property
    def feature_dim(self) -> int:
        return 3 * self.pool_grid * self.pool_grid

    @property
    def out_per_query(self) -> int:
        return self.num_classes + 1 + 4

    @property
    def out_dim(self) -> int:
        return self.queries * self.out_per_query

    @property
    def n_params(self) -> int:
        return (
            self.feature_dim * self.hidden
            + self.hidden
            + self.hidden * self.out_dim
            + self.out_dim
        )


@dataclass
class ModelParams:
    vector: np.ndarray
    config: DetectorConfig

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if self.vector.shape != (self.config.n_params,):
            raise ValueError(
                f"parameter vector length {self.vector.shape} does not match "
                f"config ({self.config.n_params})"
            )
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("parameters must be finite")

    def unpack(self):
        """Views (W1, b1, W2, b2) into the flat vector."""
        c = self.config
        f, hd, o = c.feature_dim, c.hidden, c.out_dim
        v = self.vector
        i = 0
        w1 = v[i : i + f * hd].reshape(hd, f)
        i += f * hd
        b1 = v[i : i + hd]
        i += hd
        w2 = v[i : i + hd * o].reshape(o, hd)
        i += hd * o
        b2 = v[i : i + o]
        return w1, b1, w2, b2

    def copy(self) -> "ModelParams":
        return ModelParams(self.vector.copy(), self.config)


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray  # (C+1,), sums to 1
    box: np.ndarray  # (4,) center form in (0,1)


def init_params(
    config: DetectorConfig, rng: Optional[np.random.Generator] = None, scale: float = 0.1
) -> ModelParams:
    if rng is None:
        return ModelParams(np.zeros(config.n_params), config)
    return ModelParams(rng.normal(0.0, scale, config.n_params), config)


def pooled_features(images: np.ndarray, config: DetectorConfig) -> np.ndarray:
    """Average-pool a batch of images over a PxP grid; centered at 0."""
    if images.ndim == 3:
        images = images[None]
    b, h, w, _ = images.shape
    if h != config.image_size or w != config.image_size:
        raise ValueError(
            f"image size {h}x{w} does not match config {config.image_size}"
        )
    p = config.pool_grid
    cell = h // p
    pooled = images.reshape(b, p, cell, p, cell, 3).mean(axis=(2, 4))
    return pooled.reshape(b, -1) - 0.5


def forward_raw(params: ModelParams, images: np.ndarray):
    """Batch forward; returns raw outputs (B, Q, C+5) and the hidden
    activations used by the backward pass."""
    w1, b1, w2, b2 = params.unpack()
    feats = pooled_features(images, params.config)
    hidden = np.tanh(feats @ w1.T + b1)
    out = hidden @ w2.T + b2
    c = params.config
    return out.reshape(-1, c.queries, c.out_per_query), feats, hidden


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def decode(out: np.ndarray, config: DetectorConfig):
    """Raw per-query outputs to (probs, center boxes)."""
    nc = config.num_classes + 1
    probs = _softmax(out[..., :nc])
    boxes = _sigmoid(out[..., nc:])
    return probs, boxes


def forward(params: ModelParams, image: np.ndarray) -> List[Prediction]:
    out, _, _ = forward_raw(params, image)
    probs, boxes = decode(out[0], params.config)
    return [Prediction(probs[q], boxes[q]) for q in range(params.config.queries)]


def _center_to_corner(boxes: np.ndarray) -> np.ndarray:
    """Unclipped corner form; keeps the loss differentiable at the frame
    boundary."""
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def _target_arrays(targets: LabelSet):
    corners = np.array(
        [[b.xmin, b.ymin, b.xmax, b.ymax] for b in targets.boxes], dtype=float
    ).reshape(len(targets), 4)
    classes = np.asarray(targets.classes, dtype=int)
    return corners, classes


def detection_loss(
    preds: Sequence[Prediction],
    targets: LabelSet,
    reg_weight: float,
    noobj_weight: float,
):
    """Set-prediction loss and its gradient at the raw outputs.

    Matching cost per (query, target) pair is the negative log-probability
    of the target class plus reg_weight times the corner-form L1 distance.
    Matched queries pay cross-entropy plus the weighted L1 box loss;
    unmatched queries pay the no-object cross-entropy scaled by
    noobj_weight. The total is averaged over queries.

    Returns (loss, grad) with grad of shape (Q, C+5): columns [:C+1] are
    gradients w.r.t. the class logits, columns [C+1:] w.r.t. the
    pre-sigmoid box parameters.
    """
    q = len(preds)
    nc = preds[0].probs.shape[0]  # C+1
    noobj = nc - 1
    if len(targets) > q:
        raise ValueError(f"{len(targets)} targets exceed {q} queries")
    probs = np.stack([p.probs for p in preds])  # (Q, C+1)
    boxes = np.stack([p.box for p in preds])  # (Q, 4) center form
    corners = _center_to_corner(boxes)
    grad = np.zeros((q, nc + 4))
    loss = 0.0

    matched_q = {}
    if len(targets) > 0:
        tgt_corners, tgt_classes = _target_arrays(targets)
        logp = np.log(np.maximum(probs, 1e-300))
        l1 = np.abs(corners[:, None, :] - tgt_corners[None, :, :]).sum(axis=2)
        cost = -logp[:, tgt_classes] + reg_weight * l1
        rows, cols = linear_sum_assignment(cost)
        matched_q = dict(zip(rows.tolist(), cols.tolist()))

    for i in range(q):
        if i in matched_q:
            k = matched_q[i]
            c = int(targets.classes[k])
            loss += -np.log(max(probs[i, c], 1e-300))
            onehot = np.zeros(nc)
            onehot[c] = 1.0
            grad[i, :nc] = probs[i] - onehot
            tgt = np.array(
                [
                    targets.boxes[k].xmin,
                    targets.boxes[k].ymin,
                    targets.boxes[k].xmax,
                    targets.boxes[k].ymax,
                ]
            )
            diff = corners[i] - tgt
            loss += reg_weight * np.abs(diff).sum()
            s = np.sign(diff)
            # corner = M @ center; chain through M^T then the sigmoid
            d_center = np.array(
                [
                    s[0] + s[2],
                    s[1] + s[3],
                    0.5 * (s[2] - s[0]),
                    0.5 * (s[3] - s[1]),
                ]
            )
            grad[i, nc:] = reg_weight * d_center * boxes[i] * (1.0 - boxes[i])
        else:
            loss += noobj_weight * -np.log(max(probs[i, noobj], 1e-300))
            onehot = np.zeros(nc)
            onehot[noobj] = 1.0
            grad[i, :nc] = noobj_weight * (probs[i] - onehot)

    return loss / q, grad / q


def loss_grad_at_raw(out_q: np.ndarray, targets: LabelSet, config: DetectorConfig):
    """Convenience: decode one sample's raw outputs and get loss + raw
    gradient."""
    probs, boxes = decode(out_q, config)
    preds = [Prediction(probs[i], boxes[i]) for i in range(config.queries)]
    return detection_loss(preds, targets, config.reg_weight, config.noobj_weight)


def backward(params: ModelParams, image: np.ndarray, out_grad: np.ndarray) -> np.ndarray:
    """Chain an output gradient (Q, C+5) back to a flat parameter
    gradient."""
    return backward_batch(params, image[None], out_grad[None])


def backward_batch(
    params: ModelParams, images: np.ndarray, out_grads: np.ndarray
) -> np.ndarray:
    """Summed parameter gradient over a batch of per-sample output
    gradients (B, Q, C+5)."""
    w1, b1, w2, b2 = params.unpack()
    feats = pooled_features(images, params.config)
    hidden = np.tanh(feats @ w1.T + b1)
    g = out_grads.reshape(out_grads.shape[0], -1)  # (B, O)
    if g.shape[1] != params.config.out_dim:
        raise ValueError("output gradient shape does not match config")
    g_b2 = g.sum(axis=0)
    g_w2 = g.T @ hidden
    g_hidden = g @ w2
    g_pre = g_hidden * (1.0 - hidden**2)
    g_b1 = g_pre.sum(axis=0)
    g_w1 = g_pre.T @ feats
    return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def zeros(n: int) -> "OptState":
        return OptState(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


def optimizer_step(
    params: ModelParams,
    grad: np.ndarray,
    state: OptState,
    cfg: OptimizerConfig,
    lr: Optional[float] = None,
) -> Tuple[ModelParams, OptState]:
    """Decoupled-weight-decay adaptive-moment update with bias
    correction."""
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient must be finite")
    lr = cfg.lr if lr is None else lr
    t = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new_vec = params.vector - lr * (
        m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * params.vector
    )
    return ModelParams(new_vec, params.config), OptState(m, v, t)


def predict(params: ModelParams, image: np.ndarray, floor: float = 0.0) -> List[Detection]:
    """Teacher/student inference: one detection per query whose argmax
    class is a foreground class with confidence at least `floor`."""
    if not (0.0 <= floor < 1.0):
        raise ValueError("floor must lie in [0, 1)")
    out, _, _ = forward_raw(params, image)
    return decode_detections(out[0], params.config, floor)


def decode_detections(
    out_q: np.ndarray, config: DetectorConfig, floor: float
) -> List[Detection]:
    probs, boxes = decode(out_q, config)
    noobj = config.num_classes
    dets: List[Detection] = []
    for i in range(config.queries):
        cls = int(np.argmax(probs[i]))
        if cls == noobj:
            continue
        zeta = float(probs[i, :noobj].max())
        if zeta < floor:
            continue
        dets.append(Detection(BBox.from_center(*boxes[i]), cls, zeta))
    return dets


# --- checkpoint format: text, shape header + row-major values -------------


def params_to_text(params: ModelParams) -> str:
    c = params.config
    buf = io.StringIO()
    buf.write(CHECKPOINT_MAGIC + "\n")
    buf.write(
        f"{c.image_size} {c.pool_grid} {c.hidden} {c.queries} {c.num_classes} "
        f"{c.reg_weight!r} {c.noobj_weight!r}\n"
    )
    for v in params.vector:
        buf.write(repr(float(v)) + "\n")
    return buf.getvalue()


def params_from_text(text: str) -> ModelParams:
    lines = text.splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError("not a parameter checkpoint")
    f = lines[1].split()
    cfg = DetectorConfig(
        image_size=int(f[0]),
        pool_grid=int(f[1]),
        hidden=int(f[2]),
        queries=int(f[3]),
        num_classes=int(f[4]),
        reg_weight=float(f[5]),
        noobj_weight=float(f[6]),
    )
    vec = np.array([float(x) for x in lines[2:] if x.strip()], dtype=float)
    return ModelParams(vec, cfg)


def save_params(path, params: ModelParams) -> None:
    with open(path, "w") as fh:
        fh.write(params_to_text(params))


def load_params(path) -> ModelParams:
    with open(path) as fh:
        return params_from_text(fh.read())

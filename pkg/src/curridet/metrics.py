"""Detection matching, precision/recall, F-beta, and average precision.

Evaluation uses greedy score-ordered matching (COCO practice); the
min-cost bipartite assignment here is the contract surface used by the
set-prediction loss. Also hosts the line-delimited record format used to
exchange ground truth and detections with the CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BBox, iou

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score outside [0, 1]: {self.score}")
        if self.class_id < 0:
            raise ValueError("class_id must be nonnegative")


@dataclass(frozen=True)
class LabelSet:
    boxes: Tuple[BBox, ...]
    classes: Tuple[int, ...]

    def __init__(self, boxes: Sequence[BBox] = (), classes: Sequence[int] = ()):
        if len(boxes) != len(classes):
            raise ValueError("boxes and classes must be parallel")
        object.__setattr__(self, "boxes", tuple(boxes))
        object.__setattr__(self, "classes", tuple(classes))

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class Assignment:
    pairs: Tuple[Tuple[int, int], ...]
    total_cost: float


@dataclass(frozen=True)
class PRPoint:
    precision: float
    recall: float


@dataclass(frozen=True)
class MatchResult:
    """TP/FP flag per prediction (original order) and matched flag per GT."""

    tp: Tuple[bool, ...]
    gt_matched: Tuple[bool, ...]

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.tp) - self.n_tp

    @property
    def n_gt(self) -> int:
        return len(self.gt_matched)


@dataclass(frozen=True)
class MetricsRecord:
    map: float
    ap50: float
    ap75: float


def _min_cost(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian_match(cost) -> Assignment:
    """Minimum-cost one-to-one assignment over a rectangular cost matrix.

    Among all optimal assignments, returns the lexicographically smallest
    pair list (lowest row index first, then lowest column index).
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    if cost.size == 0:
        return Assignment((), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")

    n_rows, _ = cost.shape
    best = _min_cost(cost)
    tol = 1e-9 * (1.0 + abs(best))

    pairs: List[Tuple[int, int]] = []
    avail = list(range(cost.shape[1]))
    need = min(cost.shape)
    remaining = best
    for i in range(n_rows):
        if need == 0:
            break
        rows_after = n_rows - i - 1
        chosen = None
        for j in avail:
            rest = [c for c in avail if c != j]
            sub = cost[np.ix_(range(i + 1, n_rows), rest)]
            if cost[i, j] + _min_cost(sub) <= remaining + tol:
                chosen = j
                break
        if chosen is None:
            if rows_after < need:
                raise AssertionError("assignment search lost the optimum")
            continue  # row i stays unmatched
        pairs.append((i, chosen))
        avail.remove(chosen)
        remaining -= cost[i, chosen]
        need -= 1
    return Assignment(tuple(pairs), best)


def match_at_iou(
    preds: Sequence[Detection], gt: LabelSet, iou_thresh: float
) -> MatchResult:
    """Greedy score-ordered one-to-one matching against same-class GT."""
    if not (0.0 < iou_thresh < 1.0):
        raise ValueError("iou_thresh must lie in (0, 1)")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    gt_used = [False] * len(gt)
    tp = [False] * len(preds)
    for i in order:
        p = preds[i]
        best_iou = 0.0
        best_j = -1
        for j, (b, c) in enumerate(zip(gt.boxes, gt.classes)):
            if gt_used[j] or c != p.class_id:
                continue
            v = iou(p.box, b)
            if v >= iou_thresh and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            gt_used[best_j] = True
            tp[i] = True
    return MatchResult(tuple(tp), tuple(gt_used))


def precision_recall(match: MatchResult) -> PRPoint:
    """P = TP/(TP+FP), 1.0 with no predictions; R = TP/#GT, 1.0 with no GT."""
    n_pred = len(match.tp)
    p = match.n_tp / n_pred if n_pred else 1.0
    r = match.n_tp / match.n_gt if match.n_gt else 1.0
    return PRPoint(p, r)


def f_beta(pr: PRPoint, beta: float) -> float:
    """Weighted harmonic mean of precision and recall; 0 on a zero
    denominator."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    denom = b2 * pr.precision + pr.recall
    if denom == 0:
        return 0.0
    return (1.0 + b2) * pr.precision * pr.recall / denom


def _as_scene_lists(preds, gt):
    if isinstance(gt, LabelSet):
        return [list(preds)], [gt]
    return [list(p) for p in preds], list(gt)


def _class_pr_curve(
    preds_per_scene: List[List[Detection]],
    gt_per_scene: List[LabelSet],
    class_id: int,
    iou_thresh: float,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Cumulative precision/recall points for one class, detections pooled
    over scenes and ranked globally by score."""
    entries = []  # (score, scene idx, pred idx within scene)
    for s, preds in enumerate(preds_per_scene):
        for k, p in enumerate(preds):
            if p.class_id == class_id:
                entries.append((p.score, s, k))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    n_gt = sum(
        sum(1 for c in gt.classes if c == class_id) for gt in gt_per_scene
    )
    gt_used = [
        [False] * len(gt) for gt in gt_per_scene
    ]
    tp = np.zeros(len(entries))
    for idx, (_, s, k) in enumerate(entries):
        p = preds_per_scene[s][k]
        gt = gt_per_scene[s]
        best_iou = 0.0
        best_j = -1
        for j, (b, c) in enumerate(zip(gt.boxes, gt.classes)):
            if gt_used[s][j] or c != class_id:
                continue
            v = iou(p.box, b)
            if v >= iou_thresh and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            gt_used[s][best_j] = True
            tp[idx] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    recall = cum_tp / n_gt if n_gt else np.zeros(len(entries))
    return precision, recall, n_gt


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """101-point recall interpolation with a monotone precision envelope."""
    if len(precision) == 0:
        return 0.0
    # envelope: best precision achievable at or beyond each point
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def average_precision(preds, gt, iou_thresh: float) -> float:
    """Class-mean AP at one IoU threshold.

    Accepts a single scene (list of detections + one LabelSet) or parallel
    per-scene lists. Classes with no ground truth are skipped.
    """
    preds_per_scene, gt_per_scene = _as_scene_lists(preds, gt)
    if len(preds_per_scene) != len(gt_per_scene):
        raise ValueError("prediction and ground-truth scene lists differ in length")
    classes = sorted({c for g in gt_per_scene for c in g.classes})
    if not classes:
        return 0.0
    aps = []
    for c in classes:
        precision, recall, n_gt = _class_pr_curve(
            preds_per_scene, gt_per_scene, c, iou_thresh
        )
        if n_gt == 0:
            continue
        aps.append(_interpolated_ap(precision, recall))
    return float(np.mean(aps)) if aps else 0.0


def coco_metrics(preds_per_scene, gt_per_scene) -> MetricsRecord:
    """mAP over IoU 0.50:0.05:0.95 plus AP50 and AP75, class-averaged."""
    if len(preds_per_scene) != len(gt_per_scene):
        raise ValueError("prediction and ground-truth scene lists differ in length")
    aps = {
        thr: average_precision(preds_per_scene, gt_per_scene, thr)
        for thr in COCO_IOU_THRESHOLDS
    }
    return MetricsRecord(
        map=float(np.mean([aps[t] for t in COCO_IOU_THRESHOLDS])),
        ap50=aps[0.5],
        ap75=aps[0.75],
    )


def best_threshold(
    preds_per_scene,
    gt_per_scene,
    beta: float,
    grid: Sequence[float] = DEFAULT_THRESHOLD_GRID,
    iou_thresh: float = 0.5,
) -> Tuple[float, float]:
    """Exhaustive grid search for the score threshold maximizing F-beta.

    Micro-averaged over scenes; ties break toward the larger threshold.
    Returns (threshold, F-beta value).
    """
    if len(grid) == 0:
        raise ValueError("threshold grid must be nonempty")
    if list(grid) != sorted(grid):
        raise ValueError("threshold grid must be sorted ascending")
    preds_per_scene, gt_per_scene = _as_scene_lists(preds_per_scene, gt_per_scene)
    best_s, best_f = grid[0], -1.0
    for s in grid:
        tp = fp = n_gt = 0
        for preds, gt in zip(preds_per_scene, gt_per_scene):
            kept = [p for p in preds if p.score >= s]
            m = match_at_iou(kept, gt, iou_thresh) if len(gt) or kept else None
            if m is None:
                n_gt += 0
                continue
            tp += m.n_tp
            fp += m.n_fp
            n_gt += m.n_gt
        total_pred = tp + fp
        p = tp / total_pred if total_pred else 1.0
        r = tp / n_gt if n_gt else 1.0
        f = f_beta(PRPoint(p, r), beta)
        if f >= best_f:
            best_s, best_f = s, f
    return float(best_s), float(best_f)


ARCTAN_STEEPNESS_GRID = tuple(np.round(np.arange(0.25, 20.0001, 0.25), 2))


def fit_arctan_schedule(
    points: Sequence[Tuple[float, float]],
    steepness_grid: Sequence[float] = ARCTAN_STEEPNESS_GRID,
) -> Tuple[float, float, float]:
    """Least-squares fit of (t/T, value) points to the arctan schedule
    family. Endpoints are solved in closed form per steepness candidate;
    the steepness comes from a coarse grid. Returns (v_start, v_end,
    steepness)."""
    if len(points) < 3:
        raise ValueError("need at least 3 points to fit")
    x = np.asarray([p[0] for p in points], dtype=float)
    y = np.asarray([p[1] for p in points], dtype=float)
    best = None
    for k in steepness_grid:
        u = np.arctan(k * x) / math.atan(k)
        basis = np.stack([1.0 - u, u], axis=1)
        coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
        resid = float(np.sum((basis @ coef - y) ** 2))
        if best is None or resid < best[0] - 1e-15:
            best = (resid, float(coef[0]), float(coef[1]), float(k))
    _, a, b, k = best
    return a, b, k


# ---------------------------------------------------------------------------
# line-delimited record format:
#   scene_id class_id xmin ymin xmax ymax [score]
# one box per line, whitespace-separated, '#' starts a comment line.
# ---------------------------------------------------------------------------


def format_ground_truth(records: Iterable[Tuple[str, LabelSet]]) -> str:
    lines = []
    for scene_id, labels in records:
        for b, c in zip(labels.boxes, labels.classes):
            lines.append(
                f"{scene_id} {int(c)} {b.xmin!r} {b.ymin!r} {b.xmax!r} {b.ymax!r}"
            )
    return "\n".join(lines) + ("\n" if lines else "")


def format_detections(records: Iterable[Tuple[str, Sequence[Detection]]]) -> str:
    lines = []
    for scene_id, dets in records:
        for d in dets:
            b = d.box
            lines.append(
                f"{scene_id} {int(d.class_id)} {b.xmin!r} {b.ymin!r} "
                f"{b.xmax!r} {b.ymax!r} {float(d.score)!r}"
            )
    return "\n".join(lines) + ("\n" if lines else "")


def _parse_lines(text: str):
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (6, 7):
            raise ValueError(f"line {ln}: expected 6 or 7 fields, got {len(parts)}")
        yield parts


def parse_ground_truth(text: str) -> Dict[str, LabelSet]:
    boxes: Dict[str, list] = {}
    classes: Dict[str, list] = {}
    for parts in _parse_lines(text):
        sid = parts[0]
        boxes.setdefault(sid, []).append(
            BBox(float(parts[2]), float(parts[3]), float(parts[4]), float(parts[5]))
        )
        classes.setdefault(sid, []).append(int(parts[1]))
    return {sid: LabelSet(boxes[sid], classes[sid]) for sid in boxes}


def parse_detections(text: str) -> Dict[str, List[Detection]]:
    out: Dict[str, List[Detection]] = {}
    for parts in _parse_lines(text):
        if len(parts) != 7:
            raise ValueError("detection records need a score field")
        sid = parts[0]
        out.setdefault(sid, []).append(
            Detection(
                BBox(float(parts[2]), float(parts[3]), float(parts[4]), float(parts[5])),
                int(parts[1]),
                float(parts[6]),
            )
        )
    return out

"""Frame, clip and dataset scores for binary video segmentation.

Six scores per frame: Dice (max over thresholds), sensitivity, F-beta and
E-measure (means over thresholds), weighted F-beta and S-measure (on the
continuous map). Frame scores average into clip scores, clip scores
average into the dataset score.

Thresholds are the 8-bit levels: pixel ``p`` is positive at ``t`` iff
``round(255 p) >= t``. Dice takes its max over ``t = 0..255``; the averaged
scores use ``t = 1..255`` because ``t = 0`` marks every pixel positive
regardless of the prediction.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

METRICS = ("dice", "sen", "fbeta", "wfbeta", "s_alpha", "e_phi")
LEVELS = 256
_EPS = np.finfo(np.float64).eps


class MissingPredictionsError(KeyError):
    def __init__(self, missing: list[tuple[str, int]]):
        self.missing = missing
        shown = ", ".join(f"{c}/{i}" for c, i in missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        super().__init__(f"{len(missing)} missing predictions: {shown}{more}")


def _as_prob(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    if p.dtype == np.uint8:
        return p.astype(np.float64) / 255.0
    p = p.astype(np.float64)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("prediction values must lie in [0, 1]")
    return p


def _as_gt(g: np.ndarray) -> np.ndarray:
    return np.asarray(g) > 0


def _levels(p: np.ndarray) -> np.ndarray:
    # round half up, so 0.5 -> 128
    return np.floor(_as_prob(p) * 255.0 + 0.5).astype(np.int64)


def _check(p: np.ndarray, g: np.ndarray) -> None:
    if np.shape(p) != np.shape(g):
        raise ValueError(f"prediction {np.shape(p)} and ground truth {np.shape(g)} differ in size")


def binarize(p: np.ndarray, t: int) -> np.ndarray:
    """Positive iff ``round(255 p) >= t``; ``t = 0`` is all-positive."""
    return _levels(p) >= t


def _confusion_curves(p, g):
    """True/false positive counts for every threshold ``t = 0..255``."""
    lv = _levels(p)
    gt = _as_gt(g)
    fg_hist = np.bincount(lv[gt], minlength=LEVELS).astype(np.float64)
    bg_hist = np.bincount(lv[~gt], minlength=LEVELS).astype(np.float64)
    tp = np.cumsum(fg_hist[::-1])[::-1]
    fp = np.cumsum(bg_hist[::-1])[::-1]
    return tp, fp, float(gt.sum()), float(gt.size)


def dice_curve(p, g) -> np.ndarray:
    tp, fp, ng, _ = _confusion_curves(p, g)
    denom = tp + fp + ng
    return np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1.0), 1.0)


def sensitivity_curve(p, g) -> np.ndarray:
    tp, _, ng, _ = _confusion_curves(p, g)
    if ng == 0:
        return np.full(LEVELS, np.nan)
    return tp / ng


def fbeta_curve(p, g, beta2: float = 0.3) -> np.ndarray:
    tp, fp, ng, _ = _confusion_curves(p, g)
    if ng == 0:
        return np.full(LEVELS, np.nan)  # recall is undefined, like sensitivity
    pos = tp + fp
    prc = np.divide(tp, pos, out=np.zeros(LEVELS), where=pos > 0)
    rcl = tp / ng
    num = (1.0 + beta2) * prc * rcl
    den = beta2 * prc + rcl
    return np.divide(num, den, out=np.zeros(LEVELS), where=den > 0)


def _enhanced(a, b):
    den = a * a + b * b
    xi = np.divide(2.0 * a * b, den, out=np.zeros(np.broadcast(a, b).shape), where=den > 0)
    return (1.0 + xi) ** 2 / 4.0


def e_measure_curve(p, g) -> np.ndarray:
    """E-measure of each binarised map, computed from confusion counts."""
    tp, fp, ng, n = _confusion_curves(p, g)
    pos = tp + fp
    if ng == 0:
        return (n - pos) / n
    if ng == n:
        return pos / n
    fn = ng - tp
    tn = n - ng - fp
    mp = pos / n
    mg = ng / n
    total = (
        tp * _enhanced(1.0 - mp, 1.0 - mg)
        + fp * _enhanced(1.0 - mp, -mg)
        + fn * _enhanced(-mp, 1.0 - mg)
        + tn * _enhanced(-mp, -mg)
    )
    return total / n


def e_measure_binary(pt: np.ndarray, g: np.ndarray) -> float:
    """E-measure of one already-binary map, evaluated pixel by pixel."""
    _check(pt, g)
    x = np.asarray(pt, dtype=np.float64) > 0
    gt = _as_gt(g)
    if not gt.any():
        return float(np.mean(~x))
    if gt.all():
        return float(np.mean(x))
    fp_ = x - x.mean()
    fg_ = gt - gt.mean()
    return float(np.mean(_enhanced(fg_, fp_)))


def dice_max(p, g) -> float:
    _check(p, g)
    return float(dice_curve(p, g).max())


def sensitivity_mean(p, g) -> float:
    """Mean recall over thresholds; NaN when the ground truth is empty."""
    _check(p, g)
    return float(sensitivity_curve(p, g)[1:].mean())


def fbeta_mean(p, g, beta2: float = 0.3) -> float:
    _check(p, g)
    return float(fbeta_curve(p, g, beta2)[1:].mean())


def e_measure_mean(p, g) -> float:
    _check(p, g)
    return float(e_measure_curve(p, g)[1:].mean())


def _gauss_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return k / k.sum()


def weighted_fbeta(p, g, beta2: float = 1.0) -> float:
    """Weighted F-measure on the continuous map; NaN for an empty ground truth."""
    _check(p, g)
    pred = _as_prob(p)
    gt = _as_gt(g)
    if not gt.any():
        return float("nan")
    err = np.abs(pred - gt)
    # distance to, and index of, the nearest foreground pixel
    dist, idx = ndimage.distance_transform_edt(~gt, return_indices=True)
    et = err.copy()
    bg = ~gt
    et[bg] = err[idx[0][bg], idx[1][bg]]
    ea = ndimage.convolve(et, _gauss_kernel(), mode="constant", cval=0.0)
    min_e = np.where(gt & (ea < err), ea, err)
    weight = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * weight
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[bg].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (tpw + fpw + _EPS)
    q = (1.0 + beta2) * recall * precision / (recall + beta2 * precision + _EPS)
    return float(np.clip(q, 0.0, 1.0))


# ------------------------------------------------------------------ S-measure


def _s_object(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sd)


def _object_score(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    return u * _s_object(pred[gt]) + (1.0 - u) * _s_object(1.0 - pred[~gt])


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    h, w = gt.shape
    area = gt.sum()
    if area == 0:
        return int(round(w / 2)), int(round(h / 2))
    cols = np.arange(w)
    rows = np.arange(h)
    x = int(np.round((gt.sum(axis=0) * cols).sum() / area))
    y = int(np.round((gt.sum(axis=1) * rows).sum() / area))
    return x + 1, y + 1


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    dof = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / dof
    sy = ((gt - y) ** 2).sum() / dof
    sxy = ((pred - x) * (gt - y)).sum() / dof
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    # |alpha| <= beta, so beta > 0 whenever alpha != 0
    if alpha != 0:
        return alpha / beta
    return 1.0 if beta == 0 else 0.0


def _region_score(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    g = gt.astype(np.float64)
    area = float(h * w)
    quads = [
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    ]
    score = 0.0
    for rs, cs in quads:
        pq, gq = pred[rs, cs], g[rs, cs]
        if pq.size == 0:
            continue
        score += pq.size / area * _ssim(pq, gq)
    return score


def s_measure(p, g, alpha: float = 0.5) -> float:
    _check(p, g)
    pred = _as_prob(p)
    gt = _as_gt(g)
    y = gt.mean()
    if y == 0:
        s = 1.0 - pred.mean()
    elif y == 1:
        s = pred.mean()
    else:
        s = alpha * _object_score(pred, gt) + (1.0 - alpha) * _region_score(pred, gt)
    return float(np.clip(s, 0.0, 1.0))


# --------------------------------------------------------------- aggregation


def frame_scores(p, g) -> dict[str, float]:
    _check(p, g)
    return {
        "dice": dice_max(p, g),
        "sen": sensitivity_mean(p, g),
        "fbeta": fbeta_mean(p, g),
        "wfbeta": weighted_fbeta(p, g),
        "s_alpha": s_measure(p, g),
        "e_phi": e_measure_mean(p, g),
    }


def _nanmean(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(sum(vals) / len(vals)) if vals else float("nan")


@dataclass
class ClipScore:
    clip_id: str
    attributes: list[str]
    n_frames: int
    scores: dict[str, float]
    empty_gt_frames: list[int] = field(default_factory=list)


@dataclass
class MetricReport:
    clips: list[ClipScore]
    dataset: dict[str, float]
    by_attribute: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def flagged(self) -> list[tuple[str, int]]:
        return [(c.clip_id, i) for c in self.clips for i in c.empty_gt_frames]

    def rows(self) -> list[list[str]]:
        def fmt(v: float) -> str:
            return "nan" if math.isnan(v) else repr(float(v))

        out = [["clip_id", "attributes", "n_frames", *METRICS, "empty_gt_frames"]]
        for c in self.clips:
            out.append(
                [c.clip_id, ";".join(c.attributes), str(c.n_frames), *(fmt(c.scores[m]) for m in METRICS),
                 ";".join(str(i) for i in c.empty_gt_frames)]
            )
        for tag in sorted(self.by_attribute):
            n = sum(1 for c in self.clips if tag in c.attributes)
            out.append([f"attr:{tag}", tag, str(n), *(fmt(self.by_attribute[tag][m]) for m in METRICS), ""])
        total = sum(c.n_frames for c in self.clips)
        out.append(["__dataset__", "", str(total), *(fmt(self.dataset[m]) for m in METRICS),
                    str(len(self.flagged))])
        return out

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.rows())


def clip_score(clip_id: str, preds: Sequence[np.ndarray], masks: Sequence[np.ndarray],
               attributes=(), frame_ids=None, threads: int = 1) -> ClipScore:
    """Mean frame scores; frames with empty ground truth drop out of Sen, F-beta and weighted F."""
    frame_ids = list(range(len(masks))) if frame_ids is None else list(frame_ids)
    pairs = list(zip(preds, masks))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per = list(pool.map(lambda pg: frame_scores(*pg), pairs))
    else:
        per = [frame_scores(p, g) for p, g in pairs]
    empty = [fid for fid, (_, g) in zip(frame_ids, pairs) if not _as_gt(g).any()]
    scores = {m: _nanmean([s[m] for s in per]) for m in METRICS}
    return ClipScore(clip_id, list(attributes), len(pairs), scores, empty)


def aggregate(clips: Sequence[ClipScore], with_attributes: bool = True) -> MetricReport:
    dataset = {m: _nanmean([c.scores[m] for c in clips]) for m in METRICS}
    by_attr: dict[str, dict[str, float]] = {}
    if with_attributes:
        tags = sorted({t for c in clips for t in c.attributes})
        for tag in tags:
            members = [c for c in clips if tag in c.attributes]
            by_attr[tag] = {m: _nanmean([c.scores[m] for c in members]) for m in METRICS}
    return MetricReport(list(clips), dataset, by_attr)


def evaluate_dataset(
    predictions: Mapping[str, Mapping[int, np.ndarray]],
    clips: Sequence,
    attribute_filter: str | None = None,
    with_attributes: bool = True,
    skip_anchor: bool = True,
    threads: int = 1,
) -> MetricReport:
    """Score every clip against its predictions.

    ``clips`` are objects with ``clip_id``, ``masks`` and ``attributes``.
    Frame 0 is the anchor and is not scored when ``skip_anchor`` is set.
    Any missing prediction aborts with :class:`MissingPredictionsError`.
    """
    selected = [c for c in clips if attribute_filter is None or attribute_filter in c.attributes]
    first = 1 if skip_anchor else 0
    missing = [
        (c.clip_id, i)
        for c in selected
        for i in range(first, len(c.masks))
        if i not in predictions.get(c.clip_id, {})
    ]
    if missing:
        raise MissingPredictionsError(missing)
    scored = []
    for c in selected:
        ids = list(range(first, len(c.masks)))
        preds = [predictions[c.clip_id][i] for i in ids]
        scored.append(clip_score(c.clip_id, preds, [c.masks[i] for i in ids], c.attributes, ids, threads))
    return aggregate(scored, with_attributes)


def dataset_curves(predictions, clips, skip_anchor: bool = True) -> dict[str, np.ndarray]:
    """Dataset-mean per-threshold curves (frame -> clip -> dataset)."""
    first = 1 if skip_anchor else 0
    fns = {"dice": dice_curve, "sen": sensitivity_curve, "fbeta": fbeta_curve, "e_phi": e_measure_curve}
    out = {}
    for name, fn in fns.items():
        per_clip = []
        for c in clips:
            curves = [fn(predictions[c.clip_id][i], c.masks[i]) for i in range(first, len(c.masks))]
            per_clip.append(np.nanmean(np.stack(curves), axis=0) if curves else np.full(LEVELS, np.nan))
        out[name] = np.nanmean(np.stack(per_clip), axis=0)
    return out

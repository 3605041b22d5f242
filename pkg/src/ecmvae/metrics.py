"""Segmentation metrics: mean IoU and fixed-threshold F-score."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

THRESHOLD = 0.5
BETA_SQ = 0.3


def _frames(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape((-1,) + x.shape[-2:])


def _check(pred, gt) -> None:
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"prediction {np.shape(pred)} and ground truth {np.shape(gt)} differ")


def iou_per_frame(pred, gt) -> np.ndarray:
    """|pred & gt| / |pred | gt| per frame; frames with an empty union score 1."""
    _check(pred, gt)
    p = _frames(pred).astype(bool)
    g = _frames(gt).astype(bool)
    inter = (p & g).sum(axis=(1, 2))
    union = (p | g).sum(axis=(1, 2))
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def miou(pred, gt) -> float:
    """Mean IoU over frames of already-binarised masks."""
    return float(iou_per_frame(pred, gt).mean())


def fscore_per_frame(pred, gt, beta_sq: float = BETA_SQ, threshold: float = THRESHOLD) -> np.ndarray:
    _check(pred, gt)
    p = _frames(pred) >= threshold
    g = _frames(gt).astype(bool)
    tp = (p & g).sum(axis=(1, 2)).astype(np.float64)
    n_pred = p.sum(axis=(1, 2))
    n_gt = g.sum(axis=(1, 2))
    prec = np.divide(tp, n_pred, out=np.zeros_like(tp), where=n_pred > 0)
    rec = np.divide(tp, n_gt, out=np.zeros_like(tp), where=n_gt > 0)
    denom = beta_sq * prec + rec
    num = (1.0 + beta_sq) * prec * rec
    return np.divide(num, denom, out=np.zeros_like(tp), where=denom > 0)


def fscore(pred, gt, beta_sq: float = BETA_SQ, threshold: float = THRESHOLD) -> float:
    """Mean over frames of (1 + b2) P R / (b2 P + R) at a fixed threshold."""
    return float(fscore_per_frame(pred, gt, beta_sq, threshold).mean())


@dataclass
class EvalResult:
    miou: float
    fscore: float
    per_clip: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"miou": self.miou, "fscore": self.fscore, "n_clips": len(self.per_clip),
                "per_clip": self.per_clip}


def evaluate(probs: np.ndarray, gt: np.ndarray, clip_ids, threshold: float = THRESHOLD,
             beta_sq: float = BETA_SQ) -> EvalResult:
    """probs, gt: (N, T, 1, H, W). Aggregates are means over every evaluated frame."""
    _check(probs, gt)
    per_clip = []
    ious, fs = [], []
    for cid, p, g in zip(clip_ids, probs, gt):
        i = iou_per_frame(p >= threshold, g)
        f = fscore_per_frame(p, g, beta_sq, threshold)
        ious.append(i)
        fs.append(f)
        per_clip.append({"clip_id": cid, "miou": float(i.mean()), "fscore": float(f.mean()),
                         "frame_iou": [float(x) for x in i]})
    all_i = np.concatenate(ious) if ious else np.zeros(0)
    all_f = np.concatenate(fs) if fs else np.zeros(0)
    return EvalResult(float(all_i.mean()), float(all_f.mean()), per_clip)

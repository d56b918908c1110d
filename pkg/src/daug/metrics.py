"""Retrieval and classification metrics plus heatmap localization scores.

Tie handling is fixed and documented per function so results are
reproducible given input order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetricError


@dataclass
class MetricReport:
    task: str
    per_class: list  # length 14, None where the class is absent
    avg: float | None
    wavg: float | None
    counts: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task": self.task, "per_class": self.per_class, "avg": self.avg, "wavg": self.wavg,
                "counts": self.counts, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def aggregate(values, counts) -> tuple[float | None, float | None]:
    """Plain and count-weighted mean over the classes that are present."""
    pairs = [(v, n) for v, n in zip(values, counts) if v is not None and n > 0]
    if not pairs:
        return None, None
    v = np.array([p[0] for p in pairs], dtype=np.float64)
    n = np.array([p[1] for p in pairs], dtype=np.float64)
    return float(v.mean()), float((v * n).sum() / n.sum())


# ---------------------------------------------------------------- classification

def auc_roc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied pairs count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Non-interpolated AP over the full ranking (ties broken by input order)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(prec[hits].mean())


def classification_report(scores: np.ndarray, labels: np.ndarray, class_names, task="classification",
                          metadata=None) -> MetricReport:
    per_class, counts = [], []
    for c in range(labels.shape[1]):
        y = labels[:, c]
        counts.append(int(y.sum()))
        try:
            per_class.append(auc_roc(scores[:, c], y))
        except UndefinedMetricError:
            per_class.append(None)
    avg, wavg = aggregate(per_class, counts)
    md = {"classes": list(class_names)}
    md.update(metadata or {})
    return MetricReport(task, per_class, avg, wavg, counts, md)


# ---------------------------------------------------------------- retrieval

def ap_at_k(relevant_in_rank_order, k: int) -> float:
    """AP over the top-k cut: mean of precision@i at each relevant rank i <= k.

    Zero when nothing relevant is retrieved in the top k.
    """
    rel = np.asarray(relevant_in_rank_order[:k], dtype=bool)
    if len(rel) < k:
        raise ValueError(f"ranked list shorter than k={k}")
    if not rel.any():
        return 0.0
    prec = np.cumsum(rel) / np.arange(1, k + 1)
    return float(prec[rel].mean())


def map_at_k(ranked_ids, query_labels: np.ndarray, gallery_labels: dict | np.ndarray, k: int = 5,
             class_names=None, task="retrieval", metadata=None) -> MetricReport:
    """Per-class mAP@k.

    ``ranked_ids[q]`` is the ranked gallery list for query q (indices into
    ``gallery_labels`` or keys of it when it is a dict). For class c, the
    queries positive for c are averaged, and a retrieved item is relevant iff it
    is positive for c. wAvg weights each class by its positive count in the
    gallery; classes without positive queries are absent.
    """
    query_labels = np.asarray(query_labels)
    if isinstance(gallery_labels, dict):
        lookup = gallery_labels
        gal = np.stack(list(gallery_labels.values()))
    else:
        gal = np.asarray(gallery_labels)
        lookup = gal
    n_classes = query_labels.shape[1]
    per_class, counts = [], []
    for c in range(n_classes):
        queries = np.flatnonzero(query_labels[:, c])
        counts.append(int(gal[:, c].sum()))
        if len(queries) == 0:
            per_class.append(None)
            continue
        aps = [ap_at_k([lookup[i][c] > 0 for i in ranked_ids[q][:k]], k) for q in queries]
        per_class.append(float(np.mean(aps)))
    avg, wavg = aggregate(per_class, counts)
    md = {"k": k}
    if class_names is not None:
        md["classes"] = list(class_names)
    md.update(metadata or {})
    return MetricReport(task, per_class, avg, wavg, counts, md)


# ---------------------------------------------------------------- localization

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2))
_DILATE = np.ones((5, 5), dtype=bool)  # 2-pixel Chebyshev dilation


def dilate(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    st = _DILATE if radius == 2 else np.ones((2 * radius + 1,) * 2, dtype=bool)
    return ndimage.binary_dilation(mask, structure=st)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def heatmap_localization(heatmap: np.ndarray, mask: np.ndarray, thresholds=DEFAULT_THRESHOLDS) -> dict:
    """Pointing-game hit and best IoU over a threshold grid.

    The argmax is the first maximal pixel in row-major order; it is a hit when
    it lies inside the mask dilated by 2 pixels.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if heatmap.shape != mask.shape:
        raise ValueError(f"shape mismatch {heatmap.shape} vs {mask.shape}")
    if not mask.any():
        raise UndefinedMetricError("localization undefined for an empty mask")
    r, c = np.unravel_index(int(np.argmax(heatmap)), heatmap.shape)
    hit = bool(dilate(mask)[r, c])
    best = max(iou(heatmap >= tau, mask) for tau in thresholds)
    return {"pointing_hit": hit, "best_iou": float(best)}

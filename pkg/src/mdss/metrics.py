"""Image-level AUROC and pixel-level PRO / AUPRO.

AUPRO follows the usual benchmark convention: ground-truth regions are
8-connected components, false-positive rates are pooled over every
anomaly-free pixel of the set, and the PRO curve is integrated up to
``fpr_max`` and divided by it.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# column order of the MVTec 3D-AD result tables
MVTEC3D_CATEGORIES = ("bagel", "cable_gland", "carrot", "cookie", "dowel",
                      "foam", "peach", "potato", "rope", "tire")


class MetricError(ValueError):
    pass


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class ProCurve:
    fpr: np.ndarray
    pro: np.ndarray
    fpr_max: float
    aupro: float


def _tie_group_ends(sorted_scores):
    # index of the last element of each run of equal values
    return np.r_[np.flatnonzero(np.diff(sorted_scores)), sorted_scores.size - 1]


def roc_curve(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    ends = _tie_group_ends(s)
    tpr = np.r_[0.0, np.cumsum(y)[ends] / n_pos]
    fpr = np.r_[0.0, np.cumsum(~y)[ends] / n_neg]
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=s[ends], fpr=fpr, tpr=tpr, auc=auc)


def auroc(scores, labels) -> float:
    return roc_curve(scores, labels).auc


def connected_components(gt):
    """8-connected labelling of a boolean grid.

    Returns ``(labels, count)``; labels are numbered 1..count in raster order
    of each component's first pixel, 0 is background.
    """
    lab, n = ndimage.label(np.asarray(gt, dtype=bool), structure=np.ones((3, 3), dtype=int))
    return lab, int(n)


def _trapezoid_clipped(x, y, x_max):
    """Area under the polyline (x, y) for x in [0, x_max], interpolating at x_max."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = x <= x_max
    xs, ys = x[keep], y[keep]
    if xs[-1] < x_max and keep.sum() < x.size:
        j = int(np.argmax(~keep))
        t = (x_max - x[j - 1]) / (x[j] - x[j - 1])
        xs = np.r_[xs, x_max]
        ys = np.r_[ys, y[j - 1] + t * (y[j] - y[j - 1])]
    return float(np.trapezoid(ys, xs))


def pro_curve(maps, gts, fpr_max=0.3) -> ProCurve:
    """Exact PRO curve over every distinct score value of the set."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    if len(maps) != len(gts) or any(m.shape != g.shape for m, g in zip(maps, gts)):
        raise MetricError("score maps and ground truths differ in number or shape")
    if not 0 < fpr_max <= 1:
        raise MetricError(f"fpr_max must lie in (0, 1], got {fpr_max}")
    # each anomalous pixel carries weight 1 / (|component| * n_components)
    weights, n_comp = [], 0
    for g in gts:
        lab, n = connected_components(g)
        sizes = np.bincount(lab.ravel())
        w = np.zeros(lab.shape)
        w[lab > 0] = 1.0 / sizes[lab[lab > 0]]
        weights.append(w)
        n_comp += n
    if n_comp == 0:
        raise MetricError("PRO needs at least one anomalous region")
    scores = np.concatenate([m.ravel() for m in maps])
    neg = ~np.concatenate([g.ravel() for g in gts])
    w = np.concatenate([x.ravel() for x in weights]) / n_comp
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise MetricError("PRO needs at least one anomaly-free pixel")
    order = np.argsort(-scores, kind="mergesort")
    ends = _tie_group_ends(scores[order])
    fpr = np.r_[0.0, np.cumsum(neg[order])[ends] / n_neg]
    pro = np.r_[0.0, np.clip(np.cumsum(w[order])[ends], 0.0, 1.0)]
    area = _trapezoid_clipped(fpr, pro, fpr_max)
    return ProCurve(fpr=fpr, pro=pro, fpr_max=fpr_max, aupro=area / fpr_max)


def aupro(maps, gts, fpr_max=0.3):
    curve = pro_curve(maps, gts, fpr_max)
    return curve.aupro, curve


def ordered_categories(categories):
    known = [c for c in MVTEC3D_CATEGORIES if c in categories]
    return known + sorted(c for c in categories if c not in MVTEC3D_CATEGORIES)


@dataclass
class EvalReport:
    """Per-category I-AUROC / AUPRO with a mean row."""

    rows: dict = field(default_factory=dict)  # category -> {"i_auroc": x, "aupro": y}
    errors: dict = field(default_factory=dict)  # category -> message

    def add(self, category, i_auroc, aupro_value):
        self.rows[category] = {"i_auroc": float(i_auroc), "aupro": float(aupro_value)}

    def categories(self):
        return ordered_categories(list(self.rows))

    def mean(self, key):
        vals = [self.rows[c][key] for c in self.rows if self.rows[c][key] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self):
        return {
            "categories": [{"category": c, **self.rows[c]} for c in self.categories()],
            "mean": {"i_auroc": self.mean("i_auroc"), "aupro": self.mean("aupro")},
            "errors": dict(self.errors),
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def format_table(self):
        cats = self.categories()
        width = max([len(c) for c in cats] + [6])
        lines = [f"{'metric':<8} | " + " | ".join(f"{c:>{width}}" for c in cats)
                 + f" | {'mean':>{width}}"]
        for key, name in (("i_auroc", "I-AUROC"), ("aupro", "AUPRO")):
            vals = " | ".join(f"{self.rows[c][key]:>{width}.3f}" for c in cats)
            lines.append(f"{name:<8} | {vals} | {self.mean(key):>{width}.3f}")
        for c, msg in self.errors.items():
            lines.append(f"error[{c}]: {msg}")
        return "\n".join(lines)

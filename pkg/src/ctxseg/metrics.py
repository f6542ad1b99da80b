"""Confusion-matrix accounting, segmentation metrics, feature diversity.

Seen/unseen quality is summarized by the harmonic mean of the two mIoU
values; categories absent from both ground truth and prediction are
skipped by the averaged metrics.
"""

from dataclasses import dataclass

import numpy as np


class ConfusionMatrix:
    def __init__(self, num_categories, ignore_id):
        self.counts = np.zeros((num_categories, num_categories), dtype=np.int64)
        self.ignored = 0
        self.ignore_id = ignore_id

    def accumulate(self, pred_ids, gt_ids):
        pred_ids, gt_ids = np.asarray(pred_ids), np.asarray(gt_ids)
        if pred_ids.shape != gt_ids.shape:
            raise ValueError(f"shape mismatch {pred_ids.shape} vs {gt_ids.shape}")
        pred, gt = pred_ids.reshape(-1), gt_ids.reshape(-1)
        keep = gt != self.ignore_id
        self.ignored += int((~keep).sum())
        k = self.counts.shape[0]
        np.add.at(self.counts, (gt[keep], pred[keep]), 1)
        return self

    def merge(self, other):
        self.counts += other.counts
        self.ignored += other.ignored
        return self


def pixel_accuracy(cm, subset):
    sub = np.asarray(subset)
    hits = cm.counts[sub, sub].sum()
    total = cm.counts[sub, :].sum()
    return float(hits) / total if total else 0.0


def mean_accuracy(cm, subset):
    accs = []
    for c in subset:
        row = cm.counts[c, :].sum()
        if row:
            accs.append(cm.counts[c, c] / row)
    return float(np.mean(accs)) if accs else 0.0


def mean_iou(cm, subset):
    ious = []
    for c in subset:
        union = cm.counts[c, :].sum() + cm.counts[:, c].sum() - cm.counts[c, c]
        if union:
            ious.append(cm.counts[c, c] / union)
        elif cm.counts[c, :].sum() or cm.counts[:, c].sum():
            ious.append(0.0)
    return float(np.mean(ious)) if ious else 0.0


def harmonic_iou(seen_miou, unseen_miou):
    s, u = float(seen_miou), float(unseen_miou)
    return 2.0 * s * u / (s + u) if s + u else 0.0


@dataclass(frozen=True)
class SplitMetrics:
    pixel_acc: float
    mean_acc: float
    miou: float


@dataclass(frozen=True)
class MetricReport:
    overall: SplitMetrics
    seen: SplitMetrics
    unseen: SplitMetrics
    hiou: float

    def as_kv(self):
        lines = []
        for split in ("overall", "seen", "unseen"):
            m = getattr(self, split)
            for name in ("pixel_acc", "mean_acc", "miou"):
                lines.append(f"{split}.{name}={getattr(m, name):.6f}")
        lines.append(f"hiou={self.hiou:.6f}")
        return "\n".join(lines)

    def as_csv(self):
        rows = ["split,metric,value"]
        for split in ("overall", "seen", "unseen"):
            m = getattr(self, split)
            for name in ("pixel_acc", "mean_acc", "miou"):
                rows.append(f"{split},{name},{getattr(m, name):.6f}")
        rows.append(f"all,hiou,{self.hiou:.6f}")
        return "\n".join(rows)


def report(cm, split):
    """Summarize a confusion matrix for a seen/unseen category split."""
    def over(subset):
        return SplitMetrics(pixel_acc=pixel_accuracy(cm, subset),
                            mean_acc=mean_accuracy(cm, subset),
                            miou=mean_iou(cm, subset))

    seen, unseen = over(split.seen), over(split.unseen)
    return MetricReport(
        overall=over(tuple(split.seen) + tuple(split.unseen)),
        seen=seen, unseen=unseen,
        hiou=harmonic_iou(seen.miou, unseen.miou))


def feature_diversity(features):
    """Mean pairwise Euclidean distance over all unordered pairs."""
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    if n < 2:
        raise ValueError("diversity needs at least 2 vectors")
    sq = (f * f).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
    np.fill_diagonal(d2, 0.0)
    d = np.sqrt(np.maximum(d2, 0.0))
    return float(d.sum() / (n * (n - 1)))

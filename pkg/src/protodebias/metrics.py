"""Evaluation metrics and the cross-seed significance test.

Conventions are pinned here once and relied on elsewhere:

- balanced accuracy averages per-class recall over the classes actually
  present in the labels (small splits can miss a class entirely);
- per-class F1 treats 0/0 as 0, and macro-F1 is the unweighted mean over
  all C classes;
- prototype purity is the mean over prototypes of the fraction of the n
  nearest training latents sharing the prototype's class, distance ties
  broken by sample index;
- spurious diversity is the Shannon entropy (nats) of the hard assignment
  histogram, with ceiling ln M;
- the paired t-test reports degenerate cases deterministically: identical
  series give p=1, nonzero constant differences give p=0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sp_stats

from .errors import ContractViolation
from .prototypes import CausalLibrary, SpuriousLibrary


@dataclass
class MetricsReport:
    acc: float
    bacc: float
    macro_f1: float
    nmi_bound: float | None
    purity: float | None
    div: float | None
    seed: int

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "bacc": self.bacc,
            "macro_f1": self.macro_f1,
            "nmi_bound": self.nmi_bound,
            "purity": self.purity,
            "div": self.div,
            "seed": self.seed,
        }


def classification_metrics(preds, labels, num_classes: int) -> tuple[float, float, float]:
    """(accuracy, balanced accuracy, macro-F1)."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size < 1:
        raise ContractViolation("preds and labels must be equal-length nonempty vectors")
    acc = float(np.mean(preds == labels))

    recalls = []
    for c in range(num_classes):
        mask = labels == c
        if not mask.any():
            continue  # absent classes are excluded from the balanced mean
        recalls.append(float(np.mean(preds[mask] == c)))
    bacc = float(np.mean(recalls))

    f1s = []
    for c in range(num_classes):
        tp = float(np.sum((preds == c) & (labels == c)))
        fp = float(np.sum((preds == c) & (labels != c)))
        fn = float(np.sum((preds != c) & (labels == c)))
        denom = 2.0 * tp + fp + fn
        f1s.append(0.0 if denom == 0.0 else 2.0 * tp / denom)
    return acc, bacc, float(np.mean(f1s))


def prototype_purity(lib: CausalLibrary, train_latents: np.ndarray,
                     train_labels: np.ndarray, n_neighbors: int = 20) -> float:
    """Mean over prototypes of the fraction of the n nearest training latents
    sharing the prototype's class."""
    latents = np.asarray(train_latents, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.int64)
    if latents.ndim != 2 or latents.shape[0] != labels.shape[0]:
        raise ContractViolation("latents and labels must align")
    if not 1 <= n_neighbors <= latents.shape[0]:
        raise ContractViolation("n_neighbors must be in [1, dataset size]")
    fracs = []
    for k in range(lib.total):
        d2 = np.sum((latents - lib.prototypes.data[k]) ** 2, axis=1)
        near = np.argsort(d2, kind="stable")[:n_neighbors]  # ties -> lowest index
        fracs.append(float(np.mean(labels[near] == lib.class_of[k])))
    return float(np.mean(fracs))


def spurious_diversity(z_s: np.ndarray, lib: SpuriousLibrary) -> float:
    """Shannon entropy (nats) of hard assignments of codes to their nearest
    spurious prototype."""
    z = np.asarray(z_s, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ContractViolation("spurious_diversity needs a nonempty (N, D) array")
    diff = z[:, None, :] - lib.prototypes.data[None, :, :]
    assign = np.argmin(np.sum(diff * diff, axis=2), axis=1)
    counts = np.bincount(assign, minlength=lib.m).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def paired_ttest(series_a, series_b) -> float:
    """Two-sided paired t-test p-value on the per-seed differences."""
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ContractViolation("paired_ttest needs two equal-length series of length >= 2")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        return 1.0 if np.all(d == 0.0) else 0.0
    t = float(d.mean()) / (sd / np.sqrt(d.size))
    return float(2.0 * sp_stats.t.sf(abs(t), df=d.size - 1))

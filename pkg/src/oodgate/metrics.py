"""Evaluation metrics with brute-force-verifiable definitions.

Conventions (documented because they matter for exact oracle agreement):
  - scores are "ID-ness": higher means more in-distribution
  - AUROC uses the Mann-Whitney formulation; ties count half
  - average precision uses the step-sum over the score-descending ranking,
    ties broken by stable input order
  - fpr_at_tpr picks the smallest threshold achieving TPR >= target over the
    ID positives; tpr_at_fpr picks the smallest threshold with FPR <= target
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from oodgate.errors import UserError

OOD_INDEX_SENTINEL = -1  # callers map the OOD prediction slot to index K


@dataclass
class ScoredSample:
    id: str
    score: float  # higher = more in-distribution
    is_id: bool
    predicted: int = 0  # family index, or K for the OOD slot
    true_family: str = ""

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise UserError(f"sample {self.id}: non-finite score")


@dataclass
class MetricsReport:
    auroc: float
    ap_id: float
    ap_ood: float
    fpr_at_tpr95: float
    tpr_at_fpr05: float
    ar_ood: float
    acc: float
    confusion: np.ndarray
    per_family_auc: dict[str, float] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)


def _split_scores(samples: list[ScoredSample]):
    id_scores = np.array([s.score for s in samples if s.is_id])
    ood_scores = np.array([s.score for s in samples if not s.is_id])
    if len(id_scores) == 0 or len(ood_scores) == 0:
        raise UserError("need both ID and OOD samples")
    return id_scores, ood_scores


def _auroc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    """P(random positive outscores random negative), ties half-credit."""
    allscores = np.concatenate([pos, neg])
    order = np.argsort(allscores, kind="stable")
    ranks = np.empty(len(allscores))
    sorted_scores = allscores[order]
    # average ranks over tied runs (1-based)
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auroc(samples: list[ScoredSample]) -> float:
    id_scores, ood_scores = _split_scores(samples)
    return _auroc_from_scores(id_scores, ood_scores)


def average_precision(samples: list[ScoredSample], positive: str = "id") -> float:
    if positive not in ("id", "ood"):
        raise UserError(f"positive must be 'id' or 'ood', got {positive!r}")
    flags = np.array([s.is_id if positive == "id" else not s.is_id for s in samples])
    if not flags.any():
        raise UserError(f"no {positive} positives present")
    scores = np.array([s.score if positive == "id" else -s.score for s in samples])
    order = np.argsort(-scores, kind="stable")
    hits = flags[order]
    cum_hits = np.cumsum(hits)
    precision = cum_hits / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / flags.sum())


def fpr_at_tpr(samples: list[ScoredSample], tpr_target: float = 0.95) -> float:
    """FPR at the smallest score threshold giving TPR >= target (ID positive)."""
    if not 0 < tpr_target <= 1:
        raise UserError(f"tpr_target must be in (0, 1], got {tpr_target}")
    id_scores, ood_scores = _split_scores(samples)
    k = int(np.ceil(tpr_target * len(id_scores)))
    threshold = np.sort(id_scores)[::-1][k - 1]
    return float(np.mean(ood_scores >= threshold))


def tpr_at_fpr(samples: list[ScoredSample], fpr_target: float = 0.05) -> float:
    """TPR at the smallest score threshold keeping FPR <= target."""
    if not 0 < fpr_target <= 1:
        raise UserError(f"fpr_target must be in (0, 1], got {fpr_target}")
    id_scores, ood_scores = _split_scores(samples)
    candidates = np.unique(np.concatenate([id_scores, ood_scores]))
    for thr in candidates:  # ascending; first feasible threshold maximizes TPR
        if np.mean(ood_scores >= thr) <= fpr_target:
            return float(np.mean(id_scores >= thr))
    return 0.0  # threshold above every score


def confusion_matrix(pairs: list[tuple[int, int]], n_classes: int) -> np.ndarray:
    """(K+1)x(K+1) counts; rows = true class, columns = predicted."""
    mat = np.zeros((n_classes + 1, n_classes + 1), dtype=int)
    for predicted, true in pairs:
        if not (0 <= predicted <= n_classes and 0 <= true <= n_classes):
            raise UserError(f"class index out of range: pred={predicted}, true={true}")
        mat[true, predicted] += 1
    return mat


def accuracy(confusion: np.ndarray) -> float:
    total = confusion.sum()
    if total == 0:
        raise UserError("empty confusion matrix")
    return float(np.trace(confusion) / total)


def ar_ood(samples: list[ScoredSample], n_classes: int) -> float:
    """Macro-average over OOD families of the fraction flagged OOD (pred == K)."""
    by_family: dict[str, list[ScoredSample]] = {}
    for s in samples:
        if not s.is_id:
            by_family.setdefault(s.true_family, []).append(s)
    if not by_family:
        raise UserError("no OOD samples present")
    recalls = [np.mean([s.predicted == n_classes for s in group])
               for group in by_family.values()]
    return float(np.mean(recalls))


def per_family_auc(samples: list[ScoredSample], family: str,
                   family_scores: np.ndarray) -> float:
    """AUROC of one family vs the rest, scored by that family's probability."""
    mask = np.array([s.true_family == family for s in samples])
    if not mask.any():
        raise UserError(f"family {family!r} absent from test set")
    if mask.all():
        raise UserError(f"family {family!r} is the entire test set")
    return _auroc_from_scores(family_scores[mask], family_scores[~mask])


def compute_report(samples: list[ScoredSample], n_classes: int,
                   true_indices: list[int],
                   family_prob_matrix: np.ndarray | None = None,
                   family_names: list[str] | None = None) -> MetricsReport:
    """Assemble the full report from scored samples.

    true_indices gives each sample's true class index (K for OOD families).
    family_prob_matrix (n x (K+1)), when provided, feeds per-family AUC.
    """
    confusion = confusion_matrix(
        [(s.predicted, t) for s, t in zip(samples, true_indices)], n_classes)
    pf: dict[str, float] = {}
    if family_prob_matrix is not None and family_names is not None:
        families = sorted({s.true_family for s in samples})
        for fam in families:
            col = n_classes if fam not in family_names else family_names.index(fam)
            pf[fam] = per_family_auc(samples, fam, family_prob_matrix[:, col])
    return MetricsReport(
        auroc=auroc(samples),
        ap_id=average_precision(samples, "id"),
        ap_ood=average_precision(samples, "ood"),
        fpr_at_tpr95=fpr_at_tpr(samples, 0.95),
        tpr_at_fpr05=tpr_at_fpr(samples, 0.05),
        ar_ood=ar_ood(samples, n_classes),
        acc=accuracy(confusion),
        confusion=confusion,
        per_family_auc=pf,
        notes={"ar_ood": "macro-averaged per-family OOD recall (interpreted)",
               "operating_points": "fpr_at_tpr95 and tpr_at_fpr05 both reported"})


def format_report(report: MetricsReport, class_labels: list[str]) -> str:
    """Flat key-value document plus a labeled confusion grid."""
    lines = [f"auroc = {report.auroc!r}",
             f"ap_id = {report.ap_id!r}",
             f"ap_ood = {report.ap_ood!r}",
             f"fpr_at_tpr95 = {report.fpr_at_tpr95!r}",
             f"tpr_at_fpr05 = {report.tpr_at_fpr05!r}",
             f"ar_ood = {report.ar_ood!r}",
             f"acc = {report.acc!r}"]
    for fam in sorted(report.per_family_auc):
        lines.append(f"per_family_auc.{fam} = {report.per_family_auc[fam]!r}")
    for key in sorted(report.notes):
        lines.append(f"note.{key} = {report.notes[key]}")
    lines.append("")
    width = max(len(lbl) for lbl in class_labels) + 2
    header = " " * width + " ".join(f"{lbl:>{width}}" for lbl in class_labels)
    lines.append("confusion (rows=true, cols=predicted):")
    lines.append(header)
    for lbl, row in zip(class_labels, report.confusion):
        lines.append(f"{lbl:>{width}}" + " ".join(f"{int(c):>{width}}" for c in row))
    return "\n".join(lines) + "\n"


def roc_points(samples: list[ScoredSample]) -> np.ndarray:
    """(FPR, TPR) pairs over all thresholds, for external plotting."""
    id_scores, ood_scores = _split_scores(samples)
    thresholds = np.concatenate([[np.inf], np.unique(
        np.concatenate([id_scores, ood_scores]))[::-1]])
    pts = [(float(np.mean(ood_scores >= t)), float(np.mean(id_scores >= t)))
           for t in thresholds]
    return np.array(pts)


def pr_points(samples: list[ScoredSample], positive: str = "id") -> np.ndarray:
    """(recall, precision) pairs along the ranking, for external plotting."""
    flags = np.array([s.is_id if positive == "id" else not s.is_id for s in samples])
    scores = np.array([s.score if positive == "id" else -s.score for s in samples])
    order = np.argsort(-scores, kind="stable")
    hits = flags[order]
    cum = np.cumsum(hits)
    recall = cum / flags.sum()
    precision = cum / np.arange(1, len(hits) + 1)
    return np.column_stack([recall, precision])

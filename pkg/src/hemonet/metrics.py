"""Study-level aggregation and statistical evaluation.

ROC-AUC uses the rank (Mann-Whitney) formulation with midranks, so ties
earn half credit.  Bootstrap confidence intervals are percentile intervals
over resamples drawn with replacement; each resample owns an independent
random stream derived from (seed, resample index), which makes the result
independent of evaluation order and safe to parallelize.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import Model
from .phantom import DEFAULT_WINDOW_LEVEL, DEFAULT_WINDOW_WIDTH, Study
from .windows import make_slice_windows

DEFAULT_BOOTSTRAP_N = 10_000
VARIANT_TABLE_ORDER = ("single_task", "multi_task", "task_dependent")
# Clinical-scale reference AUC levels for the three variants; shown in
# comparison tables for context only, not reproducible from synthetic data.
REFERENCE_AUC = {"single_task": 0.9453, "multi_task": 0.9411, "task_dependent": 0.9658}


def _check_binary(labels: np.ndarray) -> None:
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise ValueError(
            "AUC needs at least one positive and one negative label; got a single class"
        )


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based); tied values share the mean of their ranks."""
    n = values.size
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    np.not_equal(sorted_vals[1:], sorted_vals[:-1], out=new_group[1:])
    group = np.cumsum(new_group) - 1
    counts = np.bincount(group)
    ends = np.cumsum(counts)
    mids = ends - (counts - 1) / 2.0  # mean of ranks end-count+1 .. end
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = mids[group]
    return ranks


def roc_auc(labels, scores) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via the rank method."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError(f"labels shape {labels.shape} != scores shape {scores.shape}")
    _check_binary(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = _midranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(labels, scores) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) at every distinct score, descending thresholds."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    _check_binary(labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    for i in range(labels.size):
        tp += int(sorted_labels[i] == 1)
        fp += int(sorted_labels[i] == 0)
        if i + 1 == labels.size or sorted_scores[i + 1] != sorted_scores[i]:
            points.append((fp / n_neg, tp / n_pos, float(sorted_scores[i])))
    return points


def bootstrap_ci(
    labels,
    scores,
    n: int = DEFAULT_BOOTSTRAP_N,
    seed: int = 0,
) -> tuple[float, float, float]:
    """(mean AUC, 2.5th, 97.5th percentile) over ``n`` resamples.

    Resamples are the dataset's size, drawn with replacement; a resample
    that comes up single-class is redrawn from the same stream, keeping
    exactly ``n`` values.
    """
    if n < 1:
        raise ValueError(f"bootstrap needs n >= 1, got {n}")
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    _check_binary(labels)
    size = labels.size
    aucs = np.empty(n, dtype=np.float64)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        while True:
            idx = rng.integers(0, size, size)
            picked = labels[idx]
            if 0 < picked.sum() < size:
                break
        aucs[i] = roc_auc(picked, scores[idx])
    lo, hi = np.percentile(aucs, [2.5, 97.5])
    return float(aucs.mean()), float(lo), float(hi)


@dataclass
class EvalReport:
    """Scores for one model on one item set, with AUC and bootstrap CI.

    ``auc`` is the point estimate over the full set; ``bootstrap_mean`` is
    the mean of the resampled AUC distribution whose percentiles give the
    interval.
    """

    level: str  # "slice" or "study"
    ids: list[str]
    labels: np.ndarray
    scores: np.ndarray
    auc: float
    ci_low: float
    ci_high: float
    bootstrap_mean: float
    n_bootstrap: int
    seed: int
    roc: list[tuple[float, float, float]] = field(default_factory=list)

    @staticmethod
    def from_scores(level, ids, labels, scores, n_bootstrap=DEFAULT_BOOTSTRAP_N,
                    seed: int = 0) -> "EvalReport":
        labels = np.asarray(labels)
        scores = np.asarray(scores, dtype=np.float64)
        auc = roc_auc(labels, scores)
        mean_auc, lo, hi = bootstrap_ci(labels, scores, n=n_bootstrap, seed=seed)
        return EvalReport(
            level=level,
            ids=list(ids),
            labels=labels,
            scores=scores,
            auc=auc,
            ci_low=lo,
            ci_high=hi,
            bootstrap_mean=mean_auc,
            n_bootstrap=n_bootstrap,
            seed=seed,
            roc=roc_points(labels, scores),
        )

    def write_csv(self, path) -> Path:
        """Columns: id,label,score then one summary footer row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label", "score"])
            for i, item in enumerate(self.ids):
                w.writerow([item, int(self.labels[i]), repr(float(self.scores[i]))])
            w.writerow([])
            w.writerow(["level", "auc", "ci_low", "ci_high", "bootstrap_mean",
                        "n_bootstrap", "seed"])
            w.writerow([self.level, repr(float(self.auc)), repr(float(self.ci_low)),
                        repr(float(self.ci_high)), repr(float(self.bootstrap_mean)),
                        self.n_bootstrap, self.seed])
        return path

    def write_roc_csv(self, path) -> Path:
        """Columns: fpr,tpr,threshold (monotone non-decreasing fpr)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr", "threshold"])
            for fpr, tpr, thr in self.roc:
                w.writerow([repr(fpr), repr(tpr), repr(thr)])
        return path


def read_report_csv(path) -> EvalReport:
    path = Path(path)
    rows = list(csv.reader(path.open()))
    if not rows or rows[0] != ["id", "label", "score"]:
        raise ValueError(f"{path} is not an evaluation report CSV")
    ids, labels, scores = [], [], []
    i = 1
    while i < len(rows) and rows[i] and rows[i][0]:
        ids.append(rows[i][0])
        labels.append(int(rows[i][1]))
        scores.append(float(rows[i][2]))
        i += 1
    footer = rows[i + 2]
    return EvalReport(
        level=footer[0],
        ids=ids,
        labels=np.array(labels),
        scores=np.array(scores),
        auc=float(footer[1]),
        ci_low=float(footer[2]),
        ci_high=float(footer[3]),
        bootstrap_mean=float(footer[4]),
        n_bootstrap=int(footer[5]),
        seed=int(footer[6]),
    )


# ---------------------------------------------------------------------------
# model-driven scoring
# ---------------------------------------------------------------------------

def _window_batches(windows, batch_size):
    for i in range(0, len(windows), batch_size):
        yield windows[i : i + batch_size]


@dataclass
class StudyPrediction:
    study_id: str
    label: int
    window_probs: np.ndarray  # one per slice-centered window
    study_prob: float  # max over windows
    volume_mm3: Optional[float]  # summed over slices; None without a decoder


def predict_study(
    model: Model,
    study: Study,
    window_level: float = DEFAULT_WINDOW_LEVEL,
    window_width: float = DEFAULT_WINDOW_WIDTH,
    batch_size: int = 16,
) -> StudyPrediction:
    windows = make_slice_windows(study, model.arch.input_slices, window_level, window_width)
    probs = []
    volume = 0.0 if model.arch.has_decoder else None
    for chunk in _window_batches(windows, batch_size):
        batch = np.stack([w.context for w in chunk]).astype(model.dtype)
        preds = model.forward(batch, voxel_volume=study.voxel_volume)
        probs.append(preds.cls_prob.data)
        if model.arch.has_decoder:
            volume += float(preds.seg_probs.data.sum()) * study.voxel_volume
    window_probs = np.concatenate(probs)
    return StudyPrediction(
        study_id=study.study_id,
        label=study.study_label,
        window_probs=window_probs,
        study_prob=float(window_probs.max()),
        volume_mm3=volume,
    )


def study_probability(model: Model, study: Study, **kw) -> float:
    """Max window probability: the study-level positivity score."""
    return predict_study(model, study, **kw).study_prob


def evaluate_studies(
    model: Model,
    studies: Sequence[Study],
    level: str = "slice",
    n_bootstrap: int = DEFAULT_BOOTSTRAP_N,
    seed: int = 0,
    window_level: float = DEFAULT_WINDOW_LEVEL,
    window_width: float = DEFAULT_WINDOW_WIDTH,
) -> EvalReport:
    """Score every study and build a labeled report at slice or study level."""
    if level not in ("slice", "study"):
        raise ValueError(f"evaluation level must be 'slice' or 'study', got {level!r}")
    ids, labels, scores = [], [], []
    for study in studies:
        pred = predict_study(model, study, window_level, window_width)
        if level == "study":
            ids.append(study.study_id)
            labels.append(study.study_label)
            scores.append(pred.study_prob)
        else:
            for i, p in enumerate(pred.window_probs):
                ids.append(f"{study.study_id}/{i:03d}")
                labels.append(int(study.slice_labels[i]))
                scores.append(float(p))
    return EvalReport.from_scores(level, ids, labels, scores, n_bootstrap, seed)


# ---------------------------------------------------------------------------
# variant comparison
# ---------------------------------------------------------------------------

def compare_variants(reports: dict[str, EvalReport]) -> tuple[list[dict], str]:
    """Rows (variant, auc, ci) over a shared item set, plus an aligned text table."""
    if not reports:
        raise ValueError("no reports to compare")
    items = None
    for name, rep in reports.items():
        ids = sorted(rep.ids)
        if items is None:
            items = ids
        elif ids != items:
            raise ValueError(f"report {name!r} covers a different item set")
    ordered = [v for v in VARIANT_TABLE_ORDER if v in reports]
    ordered += sorted(set(reports) - set(ordered))
    rows = []
    for name in ordered:
        rep = reports[name]
        rows.append(
            {
                "variant": name,
                "auc": rep.auc,
                "ci_low": rep.ci_low,
                "ci_high": rep.ci_high,
                "reference_auc": REFERENCE_AUC.get(name, ""),
            }
        )
    width = max(len(r["variant"]) for r in rows)
    lines = [f"{'variant':<{width}}  {'auc':>8}  {'95% ci':>18}  {'reference':>9}"]
    for r in rows:
        ref = f"{r['reference_auc']:.4f}" if r["reference_auc"] != "" else "-"
        lines.append(
            f"{r['variant']:<{width}}  {r['auc']:>8.4f}  "
            f"[{r['ci_low']:.4f}, {r['ci_high']:.4f}]  {ref:>9}"
        )
    return rows, "\n".join(lines)


def write_comparison_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "auc", "ci_low", "ci_high", "reference_auc"])
        for r in rows:
            w.writerow([r["variant"], repr(r["auc"]), repr(r["ci_low"]), repr(r["ci_high"]),
                        r["reference_auc"]])
    return path

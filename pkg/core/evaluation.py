"""
Classification metrics, precision-recall curves, GTA and the k-fold harness.

Multiclass precision/recall are macro averages of one-vs-rest counts. Zero
denominators give 0 and are listed in MetricSet.degenerate instead of producing NaN.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.federation import FLConfig, make_client, run_federation
from core.models import ModelSpec, class_probabilities
from core.synthdata import CenterDataset, kfold_split
from core.tensor import ParamSet
from core.types import ContractError, StructuralError
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


# =============================================================================
# CONFUSION COUNTS AND METRICS
# =============================================================================

@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest TP/FP/FN/TN per class (row k = class k)."""
    tp: Tuple[int, ...]
    fp: Tuple[int, ...]
    fn: Tuple[int, ...]
    tn: Tuple[int, ...]

    def __post_init__(self):
        rows = {len(self.tp), len(self.fp), len(self.fn), len(self.tn)}
        if len(rows) != 1 or 0 in rows:
            raise StructuralError("confusion counts need the same non-zero number of rows in every column")
        for k in range(self.n_classes):
            counts = (self.tp[k], self.fp[k], self.fn[k], self.tn[k])
            if min(counts) < 0:
                raise ContractError(f"negative count in class {k}: {counts}")
            if sum(counts) != self.total:
                raise ContractError(f"class {k} counts sum to {sum(counts)}, expected {self.total}")

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> int:
        return self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]


@dataclass(frozen=True)
class MetricSet:
    """
    Macro metrics of one evaluation.

    Attributes:
        accuracy, precision, recall, f1: Values in [0, 1]
        degenerate: Names of quantities whose denominator was zero
        per_class: Optional per-class precision/recall/f1 lists
    """
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: Tuple[str, ...] = ()
    per_class: Optional[Dict[str, Tuple[float, ...]]] = None

    def value(self, name: str) -> float:
        return getattr(self, name)

    def to_json(self) -> Dict:
        data = {name: self.value(name) for name in METRIC_NAMES}
        data["degenerate"] = list(self.degenerate)
        if self.per_class is not None:
            data["per_class"] = {k: list(v) for k, v in self.per_class.items()}
        return data


def confusion(preds: Sequence[int], truth: Sequence[int], n_classes: int) -> ConfusionCounts:
    """
    Raises:
        StructuralError: Lengths differ
        ContractError: A label lies outside [0, n_classes)
    """
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if preds.shape != truth.shape:
        raise StructuralError(f"{preds.size} predictions for {truth.size} labels")
    for name, labels in (("prediction", preds), ("label", truth)):
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ContractError(f"{name} outside [0, {n_classes})")
    total = int(truth.size)
    tp, fp, fn, tn = [], [], [], []
    for k in range(n_classes):
        p, t = preds == k, truth == k
        tp.append(int(np.sum(p & t)))
        fp.append(int(np.sum(p & ~t)))
        fn.append(int(np.sum(~p & t)))
        tn.append(total - tp[-1] - fp[-1] - fn[-1])
    return ConfusionCounts(tuple(tp), tuple(fp), tuple(fn), tuple(tn))


def _ratio(num: float, den: float, flag: str, flags: List[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def metrics(counts: ConfusionCounts) -> MetricSet:
    """
    Precision, recall and F1 per class, macro-averaged; F1 of the macro pair.

    A single row is a binary table, accuracy (TP + TN) / total. With several rows
    accuracy is sum(TP) / total.
    """
    flags: List[str] = []
    precision, recall, f1 = [], [], []
    for k in range(counts.n_classes):
        p = _ratio(counts.tp[k], counts.tp[k] + counts.fp[k], f"precision[{k}]", flags)
        r = _ratio(counts.tp[k], counts.tp[k] + counts.fn[k], f"recall[{k}]", flags)
        precision.append(p)
        recall.append(r)
        f1.append(_ratio(2.0 * p * r, p + r, f"f1[{k}]", flags))

    macro_p = float(np.mean(precision))
    macro_r = float(np.mean(recall))
    macro_f1 = _ratio(2.0 * macro_p * macro_r, macro_p + macro_r, "f1", flags)
    if counts.n_classes == 1:
        accuracy = _ratio(counts.tp[0] + counts.tn[0], counts.total, "accuracy", flags)
    else:
        accuracy = _ratio(sum(counts.tp), counts.total, "accuracy", flags)
    return MetricSet(accuracy, macro_p, macro_r, macro_f1, tuple(flags),
                     {"precision": tuple(precision), "recall": tuple(recall), "f1": tuple(f1)})


# =============================================================================
# PRECISION-RECALL
# =============================================================================

@dataclass(frozen=True)
class ClassPR:
    """Step curve of one class: (recall, precision) at every distinct threshold, descending."""
    points: Tuple[Tuple[float, float], ...]
    ap: Optional[float]


@dataclass(frozen=True)
class PRResult:
    per_class: Tuple[ClassPR, ...]
    macro_ap: Optional[float]
    degenerate: Tuple[str, ...] = ()


def _class_curve(scores: np.ndarray, positive: np.ndarray) -> ClassPR:
    n_pos = int(positive.sum())
    if n_pos == 0:
        return ClassPR((), None)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positive[order]
    # last index of every tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    recall = tp / n_pos
    precision = tp / seen
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return ClassPR(tuple(zip(recall.tolist(), precision.tolist())), ap)


def pr_curve_ap(scores: np.ndarray, truth: Sequence[int]) -> PRResult:
    """
    One-vs-rest PR curves and AP = sum_k (R_k - R_{k-1}) P_k per class.

    Classes absent from truth have no AP, are flagged, and are left out of the macro AP.

    Raises:
        StructuralError: scores is not (n, n_classes) for n labels
        ContractError: Non-finite scores
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != truth.size:
        raise StructuralError(f"scores {scores.shape} do not match {truth.size} labels")
    if not np.isfinite(scores).all():
        raise ContractError("PR curves need finite scores")
    curves, flags = [], []
    for k in range(scores.shape[1]):
        curve = _class_curve(scores[:, k], truth == k)
        if curve.ap is None:
            flags.append(f"ap[{k}]")
        curves.append(curve)
    defined = [c.ap for c in curves if c.ap is not None]
    macro = float(np.mean(defined)) if defined else None
    return PRResult(tuple(curves), macro, tuple(flags))


# =============================================================================
# AGGREGATES
# =============================================================================

def gta(per_center: Sequence[MetricSet]) -> MetricSet:
    """Unweighted mean of every metric over centers."""
    if not per_center:
        raise ContractError("GTA needs at least one center")
    values = {name: float(np.mean([m.value(name) for m in per_center])) for name in METRIC_NAMES}
    flags = tuple(sorted({f"center{i}:{flag}" for i, m in enumerate(per_center) for flag in m.degenerate}))
    return MetricSet(values["accuracy"], values["precision"], values["recall"], values["f1"], flags)


def mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; a single value has SD 0."""
    values = [float(v) for v in values]
    if not values:
        raise ContractError("mean_sd of an empty list")
    if all(v == values[0] for v in values):
        return values[0], 0.0
    mean = sum(values) / len(values)
    mean = min(max(mean, min(values)), max(values))
    sd = (sum((v - mean) ** 2 for v in values) / (len(values) - 1)) ** 0.5
    return mean, sd


def evaluate_model(weights: ParamSet, dataset: CenterDataset, spec: ModelSpec) -> Tuple[MetricSet, PRResult]:
    """Macro metrics (argmax, lowest index wins ties) and PR curves of one model on one dataset."""
    probs = class_probabilities(dataset.images, weights, spec)
    preds = np.argmax(probs, axis=1)
    return metrics(confusion(preds, dataset.labels, spec.n_classes)), pr_curve_ap(probs, dataset.labels)


# =============================================================================
# CROSS-VALIDATION
# =============================================================================

@dataclass
class FoldResult:
    fold: int
    per_center: Dict[int, MetricSet]
    gta: MetricSet
    pr: Dict[int, PRResult] = field(default_factory=dict)


@dataclass
class FoldReport:
    """
    k-fold results with mean and sample SD per metric, per center and for GTA.

    Attributes:
        folds: One FoldResult per fold, in fold order
        summary: {"gta" or center id: {metric: (mean, sd)}}
    """
    folds: List[FoldResult]
    summary: Dict[str, Dict[str, Tuple[float, float]]] = field(default_factory=dict)

    def to_records(self) -> List[Dict]:
        out = []
        for f in self.folds:
            out.append({
                "kind": "fold",
                "fold": f.fold,
                "gta": f.gta.to_json(),
                "centers": {str(cid): m.to_json() for cid, m in sorted(f.per_center.items())},
                "macro_ap": {str(cid): pr.macro_ap for cid, pr in sorted(f.pr.items())},
            })
        out.append({
            "kind": "summary",
            "averaging": "macro",
            "summary": {scope: {name: {"mean": m, "sd": s} for name, (m, s) in stats.items()}
                        for scope, stats in self.summary.items()},
        })
        return out


def summarize(folds: Sequence[FoldResult]) -> Dict[str, Dict[str, Tuple[float, float]]]:
    summary = {"gta": {name: mean_sd([f.gta.value(name) for f in folds]) for name in METRIC_NAMES}}
    for cid in sorted(folds[0].per_center):
        summary[str(cid)] = {name: mean_sd([f.per_center[cid].value(name) for f in folds])
                             for name in METRIC_NAMES}
    return summary


def cross_validate(datasets: Sequence[CenterDataset], spec: ModelSpec, cfg: FLConfig, k: int = 5,
                   seed: int = 0, ssl_weights: Optional[ParamSet] = None) -> FoldReport:
    """
    Stratified k-fold evaluation of one federation setup.

    For every fold, each center trains on its (augmented) training part, the
    federation runs, and each center's deployed model is scored on that center's
    test part; GTA averages the per-center metrics. Fold f runs with the seed
    derive_seed(cfg.seed, "fold", f).

    Raises:
        ContractError: A center violates the k-fold preconditions
    """
    if not datasets:
        raise ContractError("cross-validation needs at least one center")
    splits = {ds.center_id: kfold_split(ds, k, derive_seed(seed, "kfold", ds.center_id)) for ds in datasets}
    folds = []
    for f in range(k):
        tests = {ds.center_id: ds.subset(splits[ds.center_id][f].test) for ds in datasets}
        clients = [make_client(ds.subset(splits[ds.center_id][f].train), tests[ds.center_id]) for ds in datasets]

        def score(center_id: int, weights: ParamSet) -> Dict:
            return evaluate_model(weights, tests[center_id], spec)[0].to_json()

        fold_cfg = replace(cfg, seed=derive_seed(cfg.seed, "fold", f))
        result = run_federation(spec, clients, fold_cfg, ssl_weights, evaluator=score)
        per_center, pr = {}, {}
        for cid, test in tests.items():
            per_center[cid], pr[cid] = evaluate_model(result.client_weights[cid], test, spec)
        fold = FoldResult(f, per_center, gta(list(per_center.values())), pr)
        logger.info("fold %d/%d: GTA accuracy %.4f", f + 1, k, fold.gta.accuracy)
        folds.append(fold)
    return FoldReport(folds, summarize(folds))

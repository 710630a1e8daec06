"""Precision/recall/F1 from confusion counts.

Single-label tasks count one-vs-rest per class; multilabel tasks count every
(example, label) decision.  Zero-denominator cases score 0 and are tallied so
reports can flag classes that never appeared.  Macro is the headline average
(it drives early stopping and the report tables); micro and per-class values
are always emitted alongside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ShapeError

Prediction = int | set[int] | frozenset[int]


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0


@dataclass
class ConfusionCounts:
    """Per-class decision counts over a batch of predictions."""

    labels: list[str]
    per_class: list[ClassCounts]
    n_examples: int
    exact_matches: int

    def __post_init__(self) -> None:
        for c in self.per_class:
            total = c.tp + c.fp + c.fn + c.tn
            if total != self.n_examples:
                raise ShapeError(
                    f"confusion counts for a class sum to {total}, "
                    f"expected {self.n_examples}")


@dataclass
class Scores:
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsBundle:
    per_class: dict[str, Scores]
    macro: Scores
    micro: Scores
    accuracy: float
    n_examples: int
    zero_division_count: int = 0

    def to_dict(self, ndigits: int = 6) -> dict:
        def s(sc: Scores) -> dict:
            return {"precision": round(sc.precision, ndigits),
                    "recall": round(sc.recall, ndigits),
                    "f1": round(sc.f1, ndigits)}
        return {
            "per_class": {k: s(v) for k, v in self.per_class.items()},
            "macro": s(self.macro),
            "micro": s(self.micro),
            "accuracy": round(self.accuracy, ndigits),
            "n_examples": self.n_examples,
            "zero_division_count": self.zero_division_count,
        }


def _as_set(p: Prediction) -> frozenset[int]:
    if isinstance(p, (set, frozenset)):
        return frozenset(p)
    return frozenset((int(p),))


def confusion(predictions: list[Prediction], targets: list[Prediction],
              labels: list[str]) -> ConfusionCounts:
    """Count TP/FP/FN/TN per class.

    Accepts class indices (single-label) or sets of indices (multilabel);
    a bare index is treated as a singleton set, so both task kinds share one
    counting rule: each (example, class) pair contributes to exactly one
    cell.
    """
    if len(predictions) != len(targets):
        raise ShapeError(f"{len(predictions)} predictions vs "
                         f"{len(targets)} targets")
    k = len(labels)
    per_class = [ClassCounts() for _ in range(k)]
    exact = 0
    for pred, gold in zip(predictions, targets):
        p, g = _as_set(pred), _as_set(gold)
        if p == g:
            exact += 1
        for c in range(k):
            in_p, in_g = c in p, c in g
            counts = per_class[c]
            if in_p and in_g:
                counts.tp += 1
            elif in_p:
                counts.fp += 1
            elif in_g:
                counts.fn += 1
            else:
                counts.tn += 1
    return ConfusionCounts(labels=list(labels), per_class=per_class,
                           n_examples=len(predictions), exact_matches=exact)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float, int]:
    """P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2PR/(P+R); zero denominators
    score 0.  Returns (p, r, f1, zero_division_events)."""
    zero_div = 0
    if tp + fp > 0:
        p = tp / (tp + fp)
    else:
        p, zero_div = 0.0, zero_div + 1
    if tp + fn > 0:
        r = tp / (tp + fn)
    else:
        r, zero_div = 0.0, zero_div + 1
    if p + r > 0:
        f1 = 2.0 * p * r / (p + r)
    else:
        f1, zero_div = 0.0, zero_div + 1
    return p, r, f1, zero_div


def summarize(counts: ConfusionCounts) -> MetricsBundle:
    """Per-class, macro (unweighted mean), and micro (pooled counts) scores.

    Accuracy is the exact-match rate: fraction correct for single-label,
    subset accuracy for multilabel.  For single-label tasks the pooled FP
    and FN counts coincide, which makes micro P = R = F1 = accuracy.
    """
    per_class: dict[str, Scores] = {}
    zero_divisions = 0
    macro_p = macro_r = macro_f1 = 0.0
    pooled_tp = pooled_fp = pooled_fn = 0
    for label, c in zip(counts.labels, counts.per_class):
        p, r, f1, zd = prf(c.tp, c.fp, c.fn)
        per_class[label] = Scores(p, r, f1)
        zero_divisions += zd
        macro_p += p
        macro_r += r
        macro_f1 += f1
        pooled_tp += c.tp
        pooled_fp += c.fp
        pooled_fn += c.fn
    k = len(counts.labels)
    macro = Scores(macro_p / k, macro_r / k, macro_f1 / k)
    mp, mr, mf1, zd = prf(pooled_tp, pooled_fp, pooled_fn)
    zero_divisions += zd
    micro = Scores(mp, mr, mf1)
    accuracy = counts.exact_matches / counts.n_examples if counts.n_examples else 0.0
    return MetricsBundle(per_class=per_class, macro=macro, micro=micro,
                         accuracy=accuracy, n_examples=counts.n_examples,
                         zero_division_count=zero_divisions)


def evaluate_predictions(predictions: list[Prediction],
                         targets: list[Prediction],
                         labels: list[str]) -> MetricsBundle:
    return summarize(confusion(predictions, targets, labels))

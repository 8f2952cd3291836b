"""Evaluation metrics: retrieval recall, filter recall/precision/F1 against
adjudicated gold restricted to the retrieval space, manual recall, macro
classification reports, set similarity, and inter-annotator agreement.

A metric with an empty denominator is explicitly undefined (None), never
silently zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

from .errors import UndefinedMetricError
from .rrf import Cui

CLASS_LABELS = ("definitive", "context_dependent")


@dataclass
class MetricReport:
    recall: float | None = None
    precision: float | None = None
    f1: float | None = None
    support: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
            "support": self.support,
        }


@dataclass
class SetAgreement:
    jaccard: float
    overlap: float
    union_size: int
    intersection_size: int


@dataclass
class AgreementReport:
    n: int
    percent_agreement: float
    kappa: float | None
    disagreements: int
    marginals: dict[str, dict[str, int]]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "percent_agreement": self.percent_agreement,
            "kappa": self.kappa,
            "disagreements": self.disagreements,
            "marginals": self.marginals,
        }


def _f1(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def retrieval_recall(manual: set[Cui], retrieved: set[Cui]) -> MetricReport:
    """Recall of the manual set M within the retrieved set R; precision and
    F1 against the same sets are reported alongside."""
    if not manual:
        raise UndefinedMetricError("manual set M is empty")
    hits = len(manual & retrieved)
    recall = hits / len(manual)
    precision = hits / len(retrieved) if retrieved else None
    return MetricReport(
        recall=recall,
        precision=precision,
        f1=_f1(precision, recall),
        support={"manual": len(manual), "retrieved": len(retrieved), "hits": hits},
    )


def llm_filter_metrics(
    predicted: set[Cui], gold: set[Cui], retrieved: set[Cui]
) -> MetricReport:
    """Filter-stage metrics against the positively adjudicated gold set,
    restricted to what retrieval could surface (gold ∩ retrieved)."""
    reachable_gold = gold & retrieved
    hits = len(gold & predicted)
    recall = hits / len(reachable_gold) if reachable_gold else None
    precision = hits / len(predicted) if predicted else None
    return MetricReport(
        recall=recall,
        precision=precision,
        f1=_f1(precision, recall),
        support={
            "gold": len(gold),
            "reachable_gold": len(reachable_gold),
            "predicted": len(predicted),
            "hits": hits,
        },
    )


def manual_recall(manual_predictions: set[Cui], gold: set[Cui]) -> MetricReport:
    """Recall of the adjudicated gold achieved by manual collection.

    Precision is deliberately not computed: manually proposed CUIs outside
    the retrieval space are condition-positive by construction and counting
    them as false positives would misstate manual performance.
    """
    if not gold:
        raise UndefinedMetricError("gold set is empty")
    hits = len(gold & manual_predictions)
    return MetricReport(
        recall=hits / len(gold),
        precision=None,
        f1=None,
        support={"gold": len(gold), "manual": len(manual_predictions), "hits": hits},
    )


@dataclass
class ClassificationReport:
    per_class: dict[str, MetricReport]
    macro: MetricReport
    distribution: dict[str, float]
    n: int

    def to_dict(self) -> dict:
        return {
            "per_class": {c: r.to_dict() for c, r in self.per_class.items()},
            "macro": self.macro.to_dict(),
            "distribution": self.distribution,
            "n": self.n,
        }


def classification_report(
    predicted: Mapping[Cui, str], gold: Mapping[Cui, str]
) -> ClassificationReport:
    """Per-class and macro-averaged metrics over jointly covered CUIs.

    Evaluation is restricted to keys present in both maps (a CUI must have
    survived the preceding inclusion stage to be classifiable).  Macro
    values are unweighted means and become undefined when any per-class
    component is undefined.
    """
    common = sorted(set(predicted) & set(gold))
    if not common:
        raise UndefinedMetricError("no CUIs are covered by both maps")
    labels = sorted({predicted[c] for c in common} | {gold[c] for c in common})

    per_class: dict[str, MetricReport] = {}
    for label in labels:
        tp = sum(1 for c in common if predicted[c] == label and gold[c] == label)
        n_pred = sum(1 for c in common if predicted[c] == label)
        n_gold = sum(1 for c in common if gold[c] == label)
        precision = tp / n_pred if n_pred else None
        recall = tp / n_gold if n_gold else None
        per_class[label] = MetricReport(
            recall=recall,
            precision=precision,
            f1=_f1(precision, recall),
            support={"gold": n_gold, "predicted": n_pred, "hits": tp},
        )

    def macro_of(attr: str) -> float | None:
        values = [getattr(per_class[label], attr) for label in labels]
        if any(v is None for v in values):
            return None
        return sum(values) / len(values)

    macro = MetricReport(
        recall=macro_of("recall"),
        precision=macro_of("precision"),
        f1=macro_of("f1"),
        support={"n": len(common), "classes": len(labels)},
    )
    distribution = {
        label: sum(1 for c in common if predicted[c] == label) / len(common)
        for label in labels
    }
    return ClassificationReport(
        per_class=per_class, macro=macro, distribution=distribution, n=len(common)
    )


def set_agreement(a: set[Cui], b: set[Cui]) -> SetAgreement:
    """Jaccard and overlap coefficients between two concept sets."""
    if not a or not b:
        raise UndefinedMetricError("both sets must be non-empty")
    intersection = len(a & b)
    union = len(a | b)
    return SetAgreement(
        jaccard=intersection / union,
        overlap=intersection / min(len(a), len(b)),
        union_size=union,
        intersection_size=intersection,
    )


def annotator_agreement(
    d1: Mapping[Hashable, Hashable], d2: Mapping[Hashable, Hashable]
) -> AgreementReport:
    """Percent agreement and Cohen's kappa over two labelings.

    kappa = (p_o - p_e) / (1 - p_e), with p_e the product of per-annotator
    marginal label fractions summed over labels; undefined when p_e = 1.
    """
    if set(d1) != set(d2):
        raise ValueError("annotators must label the identical item set")
    if not d1:
        raise ValueError("at least one item is required")
    items = list(d1)
    n = len(items)
    agreements = sum(1 for i in items if d1[i] == d2[i])
    p_o = agreements / n

    labels = sorted({d1[i] for i in items} | {d2[i] for i in items}, key=str)
    marg1 = {label: sum(1 for i in items if d1[i] == label) for label in labels}
    marg2 = {label: sum(1 for i in items if d2[i] == label) for label in labels}
    p_e = sum((marg1[label] / n) * (marg2[label] / n) for label in labels)

    kappa = None if abs(1 - p_e) < 1e-12 else (p_o - p_e) / (1 - p_e)
    return AgreementReport(
        n=n,
        percent_agreement=100.0 * p_o,
        kappa=kappa,
        disagreements=n - agreements,
        marginals={
            "annotator1": {str(k): v for k, v in marg1.items()},
            "annotator2": {str(k): v for k, v in marg2.items()},
        },
    )


def run_variability(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1 denominator; 0 for n=1)."""
    if not values:
        raise ValueError("at least one value is required")
    n = len(values)
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, var**0.5


def load_concept_set_csv(path: str | Path) -> tuple[set[Cui], dict[Cui, str]]:
    """Read a labelled concept set (members plus optional class map).

    Accepts both the generic (cui, label, class) layout and the review
    service's gold export (cui, name, include, class).  A row counts as a
    member when its label/include column is truthy or absent.
    """
    members: set[Cui] = set()
    classes: dict[Cui, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            cui = (row.get("cui") or "").strip()
            if not cui:
                continue
            flag = row.get("label", row.get("include"))
            included = True
            if flag is not None and flag.strip() != "":
                included = flag.strip().lower() in ("include", "true", "1", "yes")
            if not included:
                continue
            members.add(cui)
            label = (row.get("class") or "").strip()
            if label:
                classes[cui] = label
    return members, classes


def round_for_display(value: float | None, places: int = 2) -> float | None:
    """Table-style rounding for human reports; raw values stay machine-side."""
    return None if value is None else round(value, places)

"""Metrics, agreement-regime breakdown, and report emission.

Reports carry a per-method metric table (accuracy, macro F1, balanced
accuracy over the binary downstream classes), a balanced-accuracy breakdown
by agent agreement regime for the voting rule and the trained aggregator,
and the list of disclosures where the aggregator corrects the vote.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .baselines import (
    confidence_vote_predict,
    majority_vote_predict,
    single_agent_predict,
)
from .domain import LENS_ORDER, AgentOutput, DisclosureRecord, Lens
from .features import build_features, confidence_gap
from .meta import MetaModel

METHOD_NAMES: tuple[str, ...] = (
    "performance_agent",
    "guidance_agent",
    "risk_agent",
    "majority_vote",
    "confidence_vote",
    "aggregator",
)

DEFAULT_REGIME_DELTA = 0.1
DEFAULT_SENSITIVITY_DELTAS: tuple[float, ...] = (0.05, 0.1, 0.2)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion matrix cells must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_pairs(cls, y_true: Sequence[int], y_pred: Sequence[int]) -> "ConfusionMatrix":
        if len(y_true) != len(y_pred):
            raise ValueError("prediction and target lengths disagree")
        tp = fp = tn = fn = 0
        for t, p in zip(y_true, y_pred):
            if t == 1 and p == 1:
                tp += 1
            elif t == 0 and p == 1:
                fp += 1
            elif t == 0 and p == 0:
                tn += 1
            else:
                fn += 1
        return cls(tp=tp, fp=fp, tn=tn, fn=fn)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    balanced_accuracy: float
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "balanced_accuracy": self.balanced_accuracy,
        }
        if self.flags:
            d["flags"] = list(self.flags)
        return d


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy, macro F1, and balanced accuracy from a confusion matrix.

    Per-class F1 with an empty denominator is defined as 0; a recall whose
    denominator is zero (a class absent from the targets) is defined as 0
    and flagged.
    """
    n = cm.total
    if n == 0:
        raise ValueError("cannot compute metrics over zero examples")
    flags: list[str] = []

    if cm.tp + cm.fn > 0:
        recall_pos = cm.tp / (cm.tp + cm.fn)
    else:
        recall_pos = 0.0
        flags.append("no positive examples: positive recall defined as 0")
    if cm.tn + cm.fp > 0:
        recall_neg = cm.tn / (cm.tn + cm.fp)
    else:
        recall_neg = 0.0
        flags.append("no negative examples: negative recall defined as 0")

    f1_pos_den = 2 * cm.tp + cm.fp + cm.fn
    f1_neg_den = 2 * cm.tn + cm.fn + cm.fp
    f1_pos = 2 * cm.tp / f1_pos_den if f1_pos_den > 0 else 0.0
    f1_neg = 2 * cm.tn / f1_neg_den if f1_neg_den > 0 else 0.0

    return Metrics(
        accuracy=(cm.tp + cm.tn) / n,
        macro_f1=0.5 * (f1_pos + f1_neg),
        balanced_accuracy=0.5 * (recall_pos + recall_neg),
        flags=tuple(flags),
    )


class Regime(str, Enum):
    UNANIMOUS = "unanimous"
    SPLIT_DOMINANT = "split_dominant"
    HIGH_CONFLICT = "high_conflict"


def regime_of(outputs: Sequence[AgentOutput], delta: float = DEFAULT_REGIME_DELTA) -> Regime:
    """Classify one disclosure's agent pattern.

    Unanimous: all three labels equal. Split-dominant: a 2-1 split where the
    top confidence sits on the majority side and the top-two confidence gap
    is at least ``delta``. Everything else (all-distinct labels, or a 2-1
    split without a dominant majority voice) is high conflict. The rule only
    compares confidence maxima across sides, so it is invariant under
    permutation of the outputs.
    """
    if len(outputs) != 3:
        raise ValueError("expected exactly three agent outputs")
    labels = [o.label for o in outputs]
    confidences = [o.confidence for o in outputs]
    if labels[0] == labels[1] == labels[2]:
        return Regime.UNANIMOUS
    modal = None
    for label in labels:
        if labels.count(label) == 2:
            modal = label
            break
    if modal is None:
        return Regime.HIGH_CONFLICT
    majority_conf = max(c for c, l in zip(confidences, labels) if l == modal)
    minority_conf = max(c for c, l in zip(confidences, labels) if l != modal)
    if majority_conf >= minority_conf and confidence_gap(confidences) >= delta:
        return Regime.SPLIT_DOMINANT
    return Regime.HIGH_CONFLICT


@dataclass(frozen=True)
class EvalReport:
    test_size: int
    method_metrics: dict[str, Metrics]
    regime_counts: dict[str, int]
    regime_balanced_accuracy: dict[str, dict[str, float]]
    delta: float
    delta_sensitivity: dict[str, dict] = field(default_factory=dict)
    corrections: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "test_size": self.test_size,
            "methods": {name: m.to_dict() for name, m in self.method_metrics.items()},
            "regime_delta": self.delta,
            "regimes": {
                regime: {
                    "count": self.regime_counts[regime],
                    **self.regime_balanced_accuracy[regime],
                }
                for regime in self.regime_counts
            },
            "delta_sensitivity": self.delta_sensitivity,
            "aggregator_corrects_majority": list(self.corrections),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def render_text(self) -> str:
        lines = [f"Out-of-sample classification, test split (n={self.test_size})", ""]
        header = f"{'method':<20}{'accuracy':>10}{'macro_f1':>10}{'bal_acc':>10}"
        lines.append(header)
        lines.append("-" * len(header))
        for name in METHOD_NAMES:
            m = self.method_metrics[name]
            lines.append(
                f"{name:<20}{m.accuracy:>10.4f}{m.macro_f1:>10.4f}{m.balanced_accuracy:>10.4f}"
            )
        flagged = [
            f"  [{name}] {flag}"
            for name in METHOD_NAMES
            for flag in self.method_metrics[name].flags
        ]
        if flagged:
            lines.append("")
            lines.extend(flagged)
        lines.append("")
        lines.append(f"Balanced accuracy by agreement regime (delta={self.delta:g})")
        lines.append("")
        header = f"{'regime':<16}{'n':>8}{'majority_vote':>16}{'aggregator':>12}"
        lines.append(header)
        lines.append("-" * len(header))
        for regime in (Regime.UNANIMOUS, Regime.SPLIT_DOMINANT, Regime.HIGH_CONFLICT):
            count = self.regime_counts[regime.value]
            accs = self.regime_balanced_accuracy[regime.value]
            maj = f"{accs['majority_vote']:.4f}" if count else "-"
            agg = f"{accs['aggregator']:.4f}" if count else "-"
            lines.append(f"{regime.value:<16}{count:>8}{maj:>16}{agg:>12}")
        lines.append("")
        k = len(self.corrections)
        lines.append(f"Aggregator corrects the majority vote on {k} test disclosures.")
        if k:
            shown = ", ".join(self.corrections[:20])
            more = f" (+{k - 20} more)" if k > 20 else ""
            lines.append(f"  {shown}{more}")
        return "\n".join(lines) + "\n"


def _regime_breakdown(
    regimes: Sequence[Regime],
    targets: Sequence[int],
    predictions: Mapping[str, Sequence[int]],
) -> tuple[dict[str, int], dict[str, dict[str, float]]]:
    counts: dict[str, int] = {}
    breakdown: dict[str, dict[str, float]] = {}
    for regime in Regime:
        idx = [i for i, r in enumerate(regimes) if r is regime]
        counts[regime.value] = len(idx)
        accs: dict[str, float] = {}
        for method in ("majority_vote", "aggregator"):
            if idx:
                cm = ConfusionMatrix.from_pairs(
                    [targets[i] for i in idx], [predictions[method][i] for i in idx]
                )
                accs[method] = metrics(cm).balanced_accuracy
            else:
                accs[method] = 0.0
        breakdown[regime.value] = accs
    return counts, breakdown


def evaluate_split(
    records: Sequence[DisclosureRecord],
    outputs_by_id: Mapping[str, Mapping[Lens, AgentOutput]],
    model: MetaModel,
    delta: float = DEFAULT_REGIME_DELTA,
    sensitivity_deltas: Sequence[float] = DEFAULT_SENSITIVITY_DELTAS,
) -> EvalReport:
    """Score all six methods on one split and build the report.

    ``records`` fixes the evaluation order; every record must have its three
    agent outputs present in ``outputs_by_id``.
    """
    if not records:
        raise ValueError("cannot evaluate an empty split")
    targets: list[int] = []
    predictions: dict[str, list[int]] = {name: [] for name in METHOD_NAMES}
    triples: list[list[AgentOutput]] = []
    feature_rows: list[list[float]] = []

    for record in records:
        per_lens = outputs_by_id.get(record.id)
        if per_lens is None or set(per_lens) != set(LENS_ORDER):
            raise KeyError(f"missing agent outputs for disclosure {record.id!r}")
        triple = [per_lens[lens] for lens in LENS_ORDER]
        triples.append(triple)
        targets.append(record.binary_target)
        for lens, method in zip(LENS_ORDER, METHOD_NAMES[:3]):
            predictions[method].append(single_agent_predict(per_lens[lens]))
        predictions["majority_vote"].append(majority_vote_predict(triple))
        predictions["confidence_vote"].append(confidence_vote_predict(triple))
        feature_rows.append(build_features(triple).as_list())

    aggregator_preds = model.predict_batch(np.array(feature_rows))
    predictions["aggregator"] = [int(p) for p in aggregator_preds]

    method_metrics = {
        name: metrics(ConfusionMatrix.from_pairs(targets, predictions[name]))
        for name in METHOD_NAMES
    }

    regimes = [regime_of(triple, delta=delta) for triple in triples]
    regime_counts, regime_accs = _regime_breakdown(regimes, targets, predictions)

    sensitivity: dict[str, dict] = {}
    for d in sensitivity_deltas:
        regs = [regime_of(triple, delta=d) for triple in triples]
        counts_d, accs_d = _regime_breakdown(regs, targets, predictions)
        sensitivity[f"{d:g}"] = {
            regime: {"count": counts_d[regime], **accs_d[regime]} for regime in counts_d
        }

    corrections = tuple(
        record.id
        for record, target, maj, agg in zip(
            records, targets, predictions["majority_vote"], predictions["aggregator"]
        )
        if agg == target and maj != target
    )

    return EvalReport(
        test_size=len(records),
        method_metrics=method_metrics,
        regime_counts=regime_counts,
        regime_balanced_accuracy=regime_accs,
        delta=delta,
        delta_sensitivity=sensitivity,
        corrections=corrections,
    )


def write_report(report: EvalReport, json_path: str | Path, text_path: str | Path) -> None:
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    Path(json_path).write_text(report.to_json(), encoding="utf-8")
    Path(text_path).write_text(report.render_text(), encoding="utf-8")


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))

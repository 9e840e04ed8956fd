"""Build the 15-dimensional aggregation feature vector from three agent outputs.

Layout (see :mod:`ensemble_judge.domain` for the index constants): per-agent
labels and confidences in fixed lens order, the majority label, the label
counts, the modal-label agreement count, the top-two confidence gap, and a
one-hot indicator of the most confident agent.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

from .domain import (
    LENS_ORDER,
    AgentOutput,
    FeatureVector,
    SentimentLabel,
)


def majority_label(
    labels: Sequence[SentimentLabel], confidences: Sequence[float]
) -> SentimentLabel:
    """Modal label of the three agents.

    When all three labels are distinct there is no mode; the label of the
    most confident agent is used instead (confidence ties fall back to the
    fixed agent order performance > guidance > risk).
    """
    _check_triple(labels, confidences)
    for label in labels:
        if sum(1 for other in labels if other == label) >= 2:
            return label
    return labels[most_confident_agent(confidences)]


def most_confident_agent(confidences: Sequence[float]) -> int:
    """Index of the highest confidence; exact ties go to the earliest agent."""
    if len(confidences) != 3:
        raise ValueError("expected exactly three confidences")
    best = 0
    for i in (1, 2):
        if confidences[i] > confidences[best]:
            best = i
    return best


def confidence_gap(confidences: Sequence[float]) -> float:
    """Largest confidence minus the second largest."""
    if len(confidences) != 3:
        raise ValueError("expected exactly three confidences")
    top, second = sorted(confidences, reverse=True)[:2]
    return top - second


def _check_triple(labels: Sequence[SentimentLabel], confidences: Sequence[float]) -> None:
    if len(labels) != 3 or len(confidences) != 3:
        raise ValueError("expected exactly three labels and three confidences")


def build_features(outputs: Sequence[AgentOutput]) -> FeatureVector:
    """Assemble the aggregation features for one disclosure.

    ``outputs`` must hold exactly one output per lens for a single
    disclosure; any order is accepted and canonicalized to the fixed
    agent order. Fallback outputs (neutral, 0.0) enter unchanged.
    """
    if len(outputs) != 3:
        raise ValueError(f"expected exactly three agent outputs, got {len(outputs)}")
    by_lens = {o.agent: o for o in outputs}
    if len(by_lens) != 3:
        lenses = sorted(o.agent.value for o in outputs)
        raise ValueError(f"need one output per lens, got {lenses}")
    ids = {o.disclosure_id for o in outputs}
    if len(ids) != 1:
        raise ValueError(f"outputs span multiple disclosures: {sorted(ids)}")

    ordered = [by_lens[lens] for lens in LENS_ORDER]
    labels = [o.label for o in ordered]
    confidences = [o.confidence for o in ordered]

    majority = majority_label(labels, confidences)
    agreement = sum(1 for label in labels if label == majority)
    top_agent = most_confident_agent(confidences)

    values = [float(int(label)) for label in labels]
    values += [float(c) for c in confidences]
    values.append(float(int(majority)))
    values += [
        float(sum(1 for l in labels if l is SentimentLabel.POSITIVE)),
        float(sum(1 for l in labels if l is SentimentLabel.NEUTRAL)),
        float(sum(1 for l in labels if l is SentimentLabel.NEGATIVE)),
    ]
    values.append(float(agreement))
    values.append(confidence_gap(confidences))
    values += [1.0 if i == top_agent else 0.0 for i in range(3)]
    return FeatureVector(values=tuple(values))


def write_feature_file(
    path: str | Path,
    rows: Iterable[tuple[str, FeatureVector, int]],
) -> None:
    """Audit export: one JSON line {disclosure_id, features, target} per row.

    Row order is the caller's responsibility (the pipeline passes the sorted
    split order), so the file bytes are a pure function of the inputs.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for disclosure_id, fv, target in rows:
            fh.write(
                json.dumps(
                    {"disclosure_id": disclosure_id, "features": fv.as_list(), "target": target},
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_feature_file(path: str | Path) -> list[tuple[str, FeatureVector, int]]:
    rows: list[tuple[str, FeatureVector, int]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            rows.append(
                (obj["disclosure_id"], FeatureVector(values=tuple(obj["features"])), obj["target"])
            )
    return rows

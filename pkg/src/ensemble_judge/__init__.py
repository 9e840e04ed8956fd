"""Multi-agent zero-shot disclosure judgment with a trained logistic aggregator.

Three lens-specific agents (realized performance, forward guidance, downside
risk) each judge a disclosure as positive/neutral/negative with a confidence
score; an append-only cache makes every downstream stage replayable; a
15-dimensional joint feature vector feeds an L2 logistic meta-classifier,
which is evaluated against single-agent and voting baselines with an
agreement-regime breakdown.
"""

from .domain import (
    AgentOutput,
    ConfidenceSource,
    DisclosureRecord,
    FeatureVector,
    Lens,
    LENS_ORDER,
    SentimentLabel,
    Split,
    SplitAssignment,
    binarize_label,
    target_from_return,
)

__version__ = "0.1.0"

__all__ = [
    "AgentOutput",
    "ConfidenceSource",
    "DisclosureRecord",
    "FeatureVector",
    "Lens",
    "LENS_ORDER",
    "SentimentLabel",
    "Split",
    "SplitAssignment",
    "binarize_label",
    "target_from_return",
    "__version__",
]

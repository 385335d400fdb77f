"""Logit-cosine similarity between models and best-candidate selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ClassCountMismatch
from .nncore import Model, predict_logits

SELF = -1


@dataclass
class MatchResult:
    client_id: int
    candidate_index: int  # SELF when there were no candidates
    similarity: float
    all_scores: list[float] = field(default_factory=list)

    @property
    def is_self(self) -> bool:
        return self.candidate_index == SELF


def mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Average per-row cosine; rows where either side is all-zero count as 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ClassCountMismatch(f"logit shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    denom = na * nb
    cos = np.divide((a * b).sum(axis=1), denom, out=np.zeros(len(a)), where=denom > 0)
    return float(np.clip(cos, -1.0, 1.0).mean())


def model_similarity(a: Model, b: Model, public_features: np.ndarray) -> float:
    if a.num_classes != b.num_classes:
        raise ClassCountMismatch(f"{a.num_classes} vs {b.num_classes} classes")
    return mean_cosine(predict_logits(a, public_features), predict_logits(b, public_features))


def match_clients(clients, candidates: list[Model], public_features: np.ndarray) -> list[MatchResult]:
    """For each ``(client_id, model)`` pick the candidate with the highest
    similarity (lowest index on ties); SELF when ``candidates`` is empty."""
    cand_logits = [predict_logits(c, public_features) for c in candidates]
    results = []
    for cid, model in clients:
        if not candidates:
            results.append(MatchResult(cid, SELF, 1.0, []))
            continue
        if any(c.num_classes != model.num_classes for c in candidates):
            raise ClassCountMismatch("candidate class count differs from client model")
        own = predict_logits(model, public_features)
        scores = [mean_cosine(own, logits) for logits in cand_logits]
        best = int(np.argmax(scores))
        results.append(MatchResult(cid, best, scores[best], scores))
    return results

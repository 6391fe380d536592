"""Retrieval scoring, ranking, recall metrics, and the contrastive loss.

Scoring and ranking are plain numpy (nothing downstream differentiates
through a ranking); the loss is built from autodiff primitives so gradients
flow back into the model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import COSINE_EPS, Tensor
from .errors import DegenerateInputError, ShapeError


@dataclass
class CandidateDB:
    """Fixed candidate set: integer ids aligned with feature rows."""

    ids: np.ndarray       # (count,) unique integers
    features: np.ndarray  # (count, D)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ShapeError("CandidateDB", f"features must be 2-d, got {self.features.shape}")
        if self.ids.shape != (self.features.shape[0],):
            raise ShapeError("CandidateDB",
                             f"{self.ids.shape[0]} ids for {self.features.shape[0]} feature rows")
        if len(self) < 2:
            raise DegenerateInputError("CandidateDB: need at least 2 candidates")
        if len(np.unique(self.ids)) != len(self.ids):
            raise DegenerateInputError("CandidateDB: duplicate candidate ids")
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(norms <= COSINE_EPS):
            raise DegenerateInputError("CandidateDB: zero-norm candidate feature")
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def index_of(self, candidate_id: int) -> int:
        try:
            return self._index[int(candidate_id)]
        except KeyError:
            raise KeyError(f"CandidateDB: unknown candidate id {candidate_id}") from None

    def feature_of(self, candidate_id: int) -> np.ndarray:
        return self.features[self.index_of(candidate_id)]


@dataclass
class RankingResult:
    """Candidates ordered best-first with their similarity scores."""

    ids: np.ndarray     # (count,) candidate ids, best first
    scores: np.ndarray  # (count,) aligned similarity scores, non-increasing


def similarity_scores(query: np.ndarray, db: CandidateDB) -> np.ndarray:
    """Cosine similarity of the query against every candidate feature."""
    query = np.asarray(query)
    if query.ndim != 1 or query.shape[0] != db.dim:
        raise ShapeError("similarity_scores", f"expected ({db.dim},) query, got {query.shape}")
    qn = np.linalg.norm(query)
    if qn <= COSINE_EPS:
        raise DegenerateInputError("similarity_scores: zero-norm query")
    row_norms = np.linalg.norm(db.features, axis=1)
    denom = np.maximum(qn * row_norms, COSINE_EPS)
    return np.clip(db.features @ query / denom, -1.0, 1.0)


def rank(scores: np.ndarray, ids: np.ndarray | None = None) -> RankingResult:
    """Stable descending sort of scores; ties break by ascending candidate id."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ShapeError("rank", f"expected 1-d scores, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise DegenerateInputError("rank: non-finite score")
    if ids is None:
        ids = np.arange(scores.shape[0], dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != scores.shape:
        raise ShapeError("rank", f"{ids.shape[0]} ids for {scores.shape[0]} scores")
    # lexsort uses the last key as primary: sort by -score, then id ascending
    order = np.lexsort((ids, -scores))
    return RankingResult(ids=ids[order], scores=scores[order])


def recall_at_k(rankings: Sequence[RankingResult], targets: Sequence[int], k: int) -> float:
    """Fraction of rankings whose top-k contains the transaction's target id."""
    if k < 1:
        raise ValueError(f"recall_at_k: k must be >= 1, got {k}")
    if len(rankings) != len(targets):
        raise ShapeError("recall_at_k", f"{len(rankings)} rankings for {len(targets)} targets")
    if len(rankings) == 0:
        raise DegenerateInputError("recall_at_k: empty ranking list")
    hits = 0
    for ranking, target in zip(rankings, targets):
        target = int(target)
        if target not in ranking.ids:
            raise KeyError(f"recall_at_k: target id {target} not among ranked candidates")
        if target in ranking.ids[:k]:
            hits += 1
    return hits / len(rankings)


def batch_loss(predictions: Tensor, targets: Tensor) -> Tensor:
    """In-batch contrastive loss over cosine similarity logits.

    Row i's positive is target i; every other target row in the batch is a
    negative. No temperature is applied and accidental duplicate targets are
    not deduplicated. A batch of one has no negatives and scores exactly 0.
    """
    if predictions.data.ndim != 2 or targets.data.ndim != 2:
        raise ShapeError("batch_loss",
                         f"expected 2-d predictions/targets, got {predictions.data.shape} and {targets.data.shape}")
    if predictions.data.shape != targets.data.shape:
        raise ShapeError("batch_loss",
                         f"shape mismatch: {predictions.data.shape} vs {targets.data.shape}")
    b = predictions.data.shape[0]
    pred_norms = np.linalg.norm(predictions.data, axis=1)
    tar_norms = np.linalg.norm(targets.data, axis=1)
    if np.any(pred_norms <= COSINE_EPS) or np.any(tar_norms <= COSINE_EPS):
        raise DegenerateInputError("batch_loss: zero-norm row")
    if b == 1:
        return Tensor(np.zeros((), dtype=predictions.data.dtype))
    pn = ad.div(predictions, ad.clamp_min(ad.l2norm(predictions, axis=1, keepdims=True), COSINE_EPS))
    tn = ad.div(targets, ad.clamp_min(ad.l2norm(targets, axis=1, keepdims=True), COSINE_EPS))
    sims = ad.einsum2("id,jd->ij", pn, tn)
    exp_sims = ad.exp(sims)
    log_denom = ad.log(ad.reduce_sum(exp_sims, axis=1))
    eye = Tensor(np.eye(b, dtype=predictions.data.dtype))
    diag = ad.reduce_sum(ad.mul(sims, eye), axis=1)
    return ad.reduce_mean(ad.sub(log_denom, diag))


def transaction_loss(predictions: Sequence[Tensor], targets: Sequence[Tensor]) -> Tensor:
    """Mean of the per-turn batch losses over a padded transaction."""
    if len(predictions) != len(targets):
        raise ShapeError("transaction_loss",
                         f"{len(predictions)} prediction turns for {len(targets)} target turns")
    if len(predictions) == 0:
        raise DegenerateInputError("transaction_loss: no turns")
    total = batch_loss(predictions[0], targets[0])
    for pred, tar in zip(predictions[1:], targets[1:]):
        total = ad.add(total, batch_loss(pred, tar))
    return ad.mul(total, 1.0 / len(predictions))

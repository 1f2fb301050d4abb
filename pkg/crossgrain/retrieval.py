"""Cosine ranking and retrieval metrics.

Every gallery is ranked by descending cosine similarity with ties broken by
ascending gallery id, and average precision is computed over the whole
returned list (never a top-N prefix).
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator

from crossgrain import settings
from crossgrain.config import EvalConfig
from crossgrain.core.numeric import FeatureMatrix, Vector, as_matrix
from crossgrain.errors import ConfigurationError, DomainError, EvaluationError, PreconditionError, ShapeError

logger = logging.getLogger(__name__)

CurvePoint = tuple[float, float]


class Task(str, Enum):
    BI_MODAL = "bi-modal"
    ALL_MODAL = "all-modal"
    # image queries against text, groundtruth = paired text
    ANNOTATION = "annotation"
    # text queries against images, groundtruth = paired image
    RETRIEVAL = "retrieval"

    @property
    def needs_labels(self) -> bool:
        return self in (Task.BI_MODAL, Task.ALL_MODAL)


# ---------------------------------------------------------------------------
# Similarity and ranking
# ---------------------------------------------------------------------------

def _unit_rows(x: FeatureMatrix, *, name: str) -> FeatureMatrix:
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if np.any(zero):
        logger.warning("%d zero %s vector(s); their similarities are taken as 0", int(zero.sum()), name)
    return x / np.where(zero, 1.0, norms)[:, None]


def cosine_similarity(u: npt.ArrayLike, v: npt.ArrayLike) -> float:
    """``u.v / (|u| |v|)``; a zero vector scores 0."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cannot compare widths {u.size} and {v.size}", u.shape, v.shape)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        logger.warning("cosine similarity with a zero vector is taken as 0")
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_similarity_matrix(queries: FeatureMatrix, gallery: FeatureMatrix) -> FeatureMatrix:
    """``S[i, j]`` = cosine similarity of query ``i`` and gallery row ``j``.

    Scores are computed row by row, so a gallery item's score does not
    depend on where it sits in the gallery.
    """
    queries = as_matrix(queries, name="queries")
    gallery = as_matrix(gallery, name="gallery")
    if queries.shape[1] != gallery.shape[1]:
        raise ShapeError(
            f"query width {queries.shape[1]} differs from gallery width {gallery.shape[1]}",
            queries.shape, gallery.shape,
        )
    qn = _unit_rows(queries, name="query")
    gn = _unit_rows(gallery, name="gallery")
    return np.vstack([(gn * q).sum(axis=1) for q in qn]) if len(qn) else np.zeros((0, len(gn)))


@dataclass(frozen=True)
class RankedResult:
    query_id: object
    ids: tuple
    scores: Vector

    def __len__(self) -> int:
        return len(self.ids)


def _rank_order(scores: Vector, ids: Sequence) -> npt.NDArray[np.int64]:
    # np.unique gives an ascending integer key for any sortable id type
    _, id_key = np.unique(np.asarray(ids), return_inverse=True)
    return np.lexsort((id_key, -scores))


def rank_retrieve(
    query: npt.ArrayLike,
    gallery: FeatureMatrix,
    *,
    ids: Sequence | None = None,
    query_id: object = None,
) -> RankedResult:
    """Sort *gallery* by descending cosine similarity to *query*.

    Raises:
        DomainError: if the gallery is empty.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise DomainError("cannot rank an empty gallery")
    ids = list(range(gallery.shape[0])) if ids is None else list(ids)
    if len(ids) != gallery.shape[0]:
        raise ShapeError(f"{len(ids)} ids for {gallery.shape[0]} gallery rows")
    if len(set(ids)) != len(ids):
        raise DomainError("gallery ids must be unique")
    scores = cosine_similarity_matrix(np.asarray(query, dtype=np.float64).reshape(1, -1), gallery)[0]
    order = _rank_order(scores, ids)
    return RankedResult(query_id=query_id, ids=tuple(ids[i] for i in order), scores=scores[order])


# ---------------------------------------------------------------------------
# Precision metrics
# ---------------------------------------------------------------------------

def average_precision(relevance: npt.ArrayLike, n_relevant: int) -> float | None:
    """``(1/R) * sum_k precision@k * rel_k`` over the full ranked list.

    Returns None (and logs a warning) when ``R == 0``: such a query has no
    defined AP and is left out of MAP.
    """
    rel = np.asarray(relevance, dtype=np.float64).ravel()
    if not np.all((rel == 0) | (rel == 1)):
        raise DomainError("relevance entries must be 0 or 1")
    if n_relevant < 0:
        raise DomainError(f"relevant count must be non-negative, got {n_relevant}")
    if n_relevant == 0:
        logger.warning("query has no relevant items; excluded from MAP")
        return None
    hits = np.cumsum(rel)
    if hits[-1:].sum() > n_relevant:
        raise DomainError(f"{int(hits[-1])} relevant items returned but R = {n_relevant}")
    ranks = np.arange(1, rel.size + 1)
    return float((hits / ranks * rel).sum() / n_relevant)


def precision_at_k(relevance: npt.ArrayLike, k: int) -> float:
    rel = np.asarray(relevance, dtype=np.float64).ravel()
    if k < 1:
        raise PreconditionError(f"K must be at least 1, got {k}")
    k = min(k, rel.size)
    return float(rel[:k].sum() / k) if k else 0.0


@dataclass(frozen=True)
class RankedRelevance:
    """Relevance of one query's ranked gallery and its relevant count."""

    relevance: Vector
    n_relevant: int


def ranked_relevance(
    queries: FeatureMatrix,
    query_labels: npt.ArrayLike,
    gallery: FeatureMatrix,
    gallery_labels: npt.ArrayLike,
    *,
    gallery_ids: Sequence | None = None,
    exclude_mask: npt.NDArray[np.bool_] | None = None,
) -> list[RankedRelevance]:
    """Rank the gallery for every query and mark label matches.

    ``exclude_mask[i, j]`` removes gallery item ``j`` from query ``i``'s list.
    """
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    if gallery.shape[0] == 0:
        raise DomainError("cannot rank an empty gallery")
    if len(query_labels) != queries.shape[0] or len(gallery_labels) != gallery.shape[0]:
        raise ShapeError("label counts must match row counts")
    ids = np.arange(gallery.shape[0]) if gallery_ids is None else np.asarray(gallery_ids)
    sims = cosine_similarity_matrix(queries, gallery)
    out: list[RankedRelevance] = []
    for i in range(queries.shape[0]):
        keep = np.ones(gallery.shape[0], dtype=bool) if exclude_mask is None else ~exclude_mask[i]
        order = _rank_order(sims[i][keep], ids[keep])
        rel = (gallery_labels[keep][order] == query_labels[i]).astype(np.float64)
        out.append(RankedRelevance(rel, int(rel.sum())))
    return out


def map_from_relevance(rankings: Iterable[RankedRelevance]) -> float:
    aps = [average_precision(r.relevance, r.n_relevant) for r in rankings]
    kept = [ap for ap in aps if ap is not None]
    if not kept:
        raise EvaluationError("no query has a relevant gallery item; MAP is undefined")
    if len(kept) < len(aps):
        logger.warning("%d of %d queries excluded from MAP", len(aps) - len(kept), len(aps))
    return float(np.mean(kept))


def map_score(
    queries: FeatureMatrix,
    query_labels: npt.ArrayLike,
    gallery: FeatureMatrix,
    gallery_labels: npt.ArrayLike,
    *,
    exclude_mask: npt.NDArray[np.bool_] | None = None,
) -> float:
    """Mean average precision with relevance = label equality.

    Raises:
        EvaluationError: if every query has ``R == 0``.
    """
    return map_from_relevance(
        ranked_relevance(queries, query_labels, gallery, gallery_labels, exclude_mask=exclude_mask)
    )


def recall_at_k(results: Sequence[RankedResult], groundtruth: Sequence[Iterable], k: int) -> float:
    """Fraction of queries with any groundtruth id in their top *k*.

    *k* larger than a gallery is clamped to its size with a warning.
    """
    if k < 1:
        raise PreconditionError(f"K must be at least 1, got {k}")
    if len(results) != len(groundtruth):
        raise ShapeError(f"{len(results)} results but {len(groundtruth)} groundtruth sets")
    if not results:
        raise EvaluationError("recall needs at least one query")
    hits = 0
    for result, truth in zip(results, groundtruth):
        cutoff = k
        if k > len(result):
            logger.warning("K=%d exceeds gallery size %d; clamped", k, len(result))
            cutoff = len(result)
        wanted = set(truth)
        if any(item in wanted for item in result.ids[:cutoff]):
            hits += 1
    return hits / len(results)


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------

def curves(
    rankings: Sequence[RankedRelevance],
    scope_grid: Sequence[int] = settings.SCOPE_GRID,
) -> tuple[list[CurvePoint], list[CurvePoint]]:
    """Precision-recall and precision-scope curves averaged over queries.

    The PR curve has one point per rank cutoff at which the mean recall
    increases.  Scope values beyond the gallery size are clamped to it.
    """
    usable = [r for r in rankings if r.n_relevant > 0]
    if not usable:
        return [], []
    length = min(len(r.relevance) for r in usable)
    rel = np.vstack([r.relevance[:length] for r in usable])
    totals = np.array([r.n_relevant for r in usable], dtype=np.float64)
    hits = np.cumsum(rel, axis=1)
    cutoffs = np.arange(1, length + 1)
    precision = (hits / cutoffs).mean(axis=0)
    recall = (hits / totals[:, None]).mean(axis=0)

    pr: list[CurvePoint] = []
    for r, p in zip(recall, precision):
        if not pr or r > pr[-1][0]:
            pr.append((float(r), float(p)))

    scope: list[CurvePoint] = []
    for k in sorted({min(int(k), length) for k in scope_grid if k >= 1}):
        scope.append((float(k), float(np.mean([precision_at_k(row, k) for row in rel]))))
    return pr, scope


def write_curve_csv(points: Sequence[CurvePoint], path: str | Path) -> Path:
    """Write ``x,precision`` rows with nine significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digits = settings.CURVE_SIGNIFICANT_DIGITS
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "precision"])
        for x, p in points:
            writer.writerow([f"{x:.{digits}g}", f"{p:.{digits}g}"])
    return path


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class MetricsReport(BaseModel):
    """Everything one evaluation task produced."""

    model_config = ConfigDict(extra="forbid")

    task: Task
    map_i2t: Optional[float] = Field(None, ge=0.0, le=1.0)
    map_t2i: Optional[float] = Field(None, ge=0.0, le=1.0)
    map_image_to_all: Optional[float] = Field(None, ge=0.0, le=1.0)
    map_text_to_all: Optional[float] = Field(None, ge=0.0, le=1.0)
    map_average: Optional[float] = Field(None, ge=0.0, le=1.0)
    recall_at: dict[int, float] = Field(default_factory=dict)
    pr_curve: list[CurvePoint] = Field(default_factory=list)
    scope_curve: list[CurvePoint] = Field(default_factory=list)

    @field_validator("recall_at")
    @classmethod
    def _rates(cls, v: dict[int, float]) -> dict[int, float]:
        if any(not 0.0 <= rate <= 1.0 for rate in v.values()):
            raise ValueError("recall rates must lie in [0, 1]")
        return v

    @field_validator("pr_curve", "scope_curve")
    @classmethod
    def _increasing(cls, v: list[CurvePoint]) -> list[CurvePoint]:
        xs = [x for x, _ in v]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("curve x values must be strictly increasing")
        if any(not 0.0 <= p <= 1.0 for _, p in v):
            raise ValueError("precision values must lie in [0, 1]")
        return v

    def metrics(self) -> dict[str, float]:
        """Flat ``name -> value`` view of every scalar that was computed."""
        out: dict[str, float] = {}
        for name in ("map_i2t", "map_t2i", "map_image_to_all", "map_text_to_all", "map_average"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        for k in sorted(self.recall_at):
            out[f"recall_at_{k}"] = self.recall_at[k]
        return out


def evaluate_task(
    task: Task | str,
    m_image: FeatureMatrix,
    m_text: FeatureMatrix,
    *,
    labels: npt.ArrayLike | None = None,
    ids: Sequence | None = None,
    cfg: EvalConfig | None = None,
) -> MetricsReport:
    """Run one retrieval task on row-aligned common representations.

    Raises:
        ConfigurationError: if a MAP task is requested without labels.
    """
    task = Task(task)
    cfg = cfg or EvalConfig()
    m_image = as_matrix(m_image, name="image embeddings")
    m_text = as_matrix(m_text, name="text embeddings")
    n = m_image.shape[0]
    if m_text.shape[0] != n:
        raise ShapeError(f"{n} image rows but {m_text.shape[0]} text rows")
    ids = list(range(n)) if ids is None else list(ids)

    if task.needs_labels:
        if labels is None:
            raise ConfigurationError(f"task {task.value} needs labels")
        labels = np.asarray(labels)
        if task is Task.BI_MODAL:
            return _bimodal(m_image, m_text, labels, cfg)
        return _all_modal(m_image, m_text, labels, cfg)

    queries, gallery = (m_image, m_text) if task is Task.ANNOTATION else (m_text, m_image)
    results = [rank_retrieve(q, gallery, ids=ids, query_id=ids[i]) for i, q in enumerate(queries)]
    truth = [{ids[i]} for i in range(n)]
    recall = {k: recall_at_k(results, truth, k) for k in cfg.recall_ks}
    return MetricsReport(task=task, recall_at=recall)


def _bimodal(m_image: FeatureMatrix, m_text: FeatureMatrix, labels: npt.NDArray, cfg: EvalConfig) -> MetricsReport:
    n = m_image.shape[0]
    exclude = np.eye(n, dtype=bool) if cfg.exclude_own_pair else None
    i2t = ranked_relevance(m_image, labels, m_text, labels, exclude_mask=exclude)
    t2i = ranked_relevance(m_text, labels, m_image, labels, exclude_mask=exclude)
    map_i2t = map_from_relevance(i2t)
    map_t2i = map_from_relevance(t2i)
    pr, scope = curves(i2t + t2i, cfg.scope_grid)
    return MetricsReport(
        task=Task.BI_MODAL,
        map_i2t=map_i2t,
        map_t2i=map_t2i,
        map_average=(map_i2t + map_t2i) / 2.0,
        pr_curve=pr,
        scope_curve=scope,
    )


def _all_modal(m_image: FeatureMatrix, m_text: FeatureMatrix, labels: npt.NDArray, cfg: EvalConfig) -> MetricsReport:
    n = m_image.shape[0]
    union = np.vstack([m_image, m_text])
    union_labels = np.concatenate([labels, labels])
    # Query i of a modality must not retrieve itself
    own_image = np.hstack([np.eye(n, dtype=bool), np.zeros((n, n), dtype=bool)])
    own_text = np.hstack([np.zeros((n, n), dtype=bool), np.eye(n, dtype=bool)])
    if cfg.exclude_own_pair:
        own_image = own_image | own_text
        own_text = own_image
    image_q = ranked_relevance(m_image, labels, union, union_labels, exclude_mask=own_image)
    text_q = ranked_relevance(m_text, labels, union, union_labels, exclude_mask=own_text)
    map_img = map_from_relevance(image_q)
    map_txt = map_from_relevance(text_q)
    pr, scope = curves(image_q + text_q, cfg.scope_grid)
    return MetricsReport(
        task=Task.ALL_MODAL,
        map_image_to_all=map_img,
        map_text_to_all=map_txt,
        map_average=(map_img + map_txt) / 2.0,
        pr_curve=pr,
        scope_curve=scope,
    )

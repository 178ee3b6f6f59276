"""Counterfactual region removal and retrieval metrics.

For every query the top-1 gallery image is perturbed inside the relevance
region of each query phrase; the phrase whose removal costs the most
similarity replaces that single similarity cell, and retrieval metrics are
recomputed on the updated matrix.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .diffmath import ParameterError, ShapeError, matmul

log = logging.getLogger(__name__)

METRICS = ("R@1", "R@5", "R@10", "mAP", "mINP")


@dataclass
class SimilarityMatrix:
    scores: np.ndarray  # N_q x N_g
    relevant: np.ndarray  # N_q x N_g bool, same identity

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.relevant = np.asarray(self.relevant, dtype=bool)
        if self.scores.ndim != 2 or self.relevant.shape != self.scores.shape:
            raise ShapeError(f"scores {self.scores.shape} and relevance {self.relevant.shape} must match")

    @classmethod
    def from_identities(cls, scores, query_ids, gallery_ids) -> "SimilarityMatrix":
        q = np.asarray(query_ids)
        g = np.asarray(gallery_ids)
        return cls(scores, q[:, None] == g[None, :])

    def copy(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.scores.copy(), self.relevant.copy())


@dataclass
class RelevanceMap:
    values: np.ndarray  # H x W in [0, 1]
    grid: tuple[int, int]
    phrase: str = ""
    degenerate: bool = False


@dataclass(frozen=True)
class MaskSpec:
    alpha: float
    p: float

    def __post_init__(self):
        for name in ("alpha", "p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")


class EncoderPort(Protocol):
    def encode_image(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (global D-vector, K x D patches) for a normalized image."""

    def encode_text(self, text: str) -> np.ndarray:
        """Return a unit-norm D-vector."""


def similarity_matrix(queries, gallery, query_ids=None, gallery_ids=None) -> SimilarityMatrix:
    scores = matmul(np.asarray(queries), np.asarray(gallery), transpose_b=True)
    if query_ids is None:
        relevant = np.zeros(scores.shape, dtype=bool)
    else:
        relevant = np.asarray(query_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    return SimilarityMatrix(scores, relevant)


def _scores(S) -> np.ndarray:
    return S.scores if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)


def top1(S, i: int) -> int:
    """Row argmax; ``np.argmax`` already returns the first of tied maxima."""
    row = _scores(S)[i]
    if row.size == 0:
        raise ParameterError("empty gallery")
    return int(np.argmax(row))


def relevance_map(phrase_embedding, patches, grid, image_size, phrase: str = "") -> RelevanceMap:
    """Phrase-to-patch cosine scores, min-max normalized, nearest-neighbor upsampled."""
    gh, gw = grid
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[0] != gh * gw:
        raise ShapeError(f"{patches.shape[0]} patches do not fill a {gh}x{gw} grid")
    scores = matmul(patches, np.asarray(phrase_embedding, dtype=np.float64)[None, :], transpose_b=True)[:, 0]
    lo, hi = scores.min(), scores.max()
    degenerate = not hi > lo
    if degenerate:
        cells = np.zeros((gh, gw))
    else:
        cells = ((scores - lo) / (hi - lo)).reshape(gh, gw)
    H, W = image_size
    rows = np.arange(H) * gh // H
    cols = np.arange(W) * gw // W
    return RelevanceMap(cells[rows][:, cols], (gh, gw), phrase, degenerate)


def _values(R) -> np.ndarray:
    return R.values if isinstance(R, RelevanceMap) else np.asarray(R, dtype=np.float64)


def threshold_region(R, alpha: float) -> np.ndarray:
    """Boolean H x W region ``R >= alpha``; forced empty at ``alpha == 1``."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    v = _values(R)
    if alpha >= 1.0:
        return np.zeros(v.shape, dtype=bool)
    return v >= alpha


def topp_mask(region: np.ndarray, R, p: float) -> np.ndarray:
    """The ``ceil(p * |region|)`` highest-relevance region pixels.

    Ties are broken by row-major pixel order.
    """
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"p must lie in [0, 1], got {p}")
    v = _values(R)
    region = np.asarray(region, dtype=bool)
    idx = np.flatnonzero(region.ravel())
    n = math.ceil(p * idx.size) if p > 0 else 0
    mask = np.zeros(region.size, dtype=bool)
    if n:
        order = np.argsort(-v.ravel()[idx], kind="stable")
        mask[idx[order[:n]]] = True
    return mask.reshape(region.shape)


def part_mask(R, spec: MaskSpec) -> np.ndarray:
    return topp_mask(threshold_region(R, spec.alpha), R, spec.p)


def perturb(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[mask] = 0
    return out


def counterfactual_similarity(query: np.ndarray, perturbed: np.ndarray, encoder: EncoderPort) -> float:
    try:
        g, _ = encoder.encode_image(perturbed)
    except Exception as exc:
        raise RuntimeError(f"encoder failed on perturbed image: {exc}") from exc
    return float(matmul(np.asarray(query)[None, :], np.asarray(g)[None, :], transpose_b=True)[0, 0])


def rank1_part(deltas: Sequence[float]) -> int:
    d = np.asarray(deltas, dtype=np.float64)
    if d.size == 0:
        raise ParameterError("no phrases to rank")
    return int(np.argmax(d))


def cf_matrix_update(S: SimilarityMatrix, updates) -> SimilarityMatrix:
    """Copy of ``S`` with ``S[i, j_i]`` replaced for every ``i -> (j_i, s_tilde)``."""
    out = S.copy()
    items = updates.items() if isinstance(updates, dict) else enumerate(updates)
    for i, upd in items:
        if upd is None:
            continue
        j, s_new = upd
        if not 0 <= j < out.scores.shape[1]:
            raise IndexError(f"gallery index {j} out of range")
        out.scores[i, j] = s_new
    return out


# -- ranking metrics ---------------------------------------------------------

def _ranked_relevance(S: SimilarityMatrix):
    admitted = S.relevant.any(axis=1)
    if not admitted.all():
        log.warning("%d quer(ies) without relevant gallery items excluded", int((~admitted).sum()))
    rows = np.flatnonzero(admitted)
    order = np.argsort(-S.scores[rows], axis=1, kind="stable")
    return np.take_along_axis(S.relevant[rows], order, axis=1)


def recall_at_k(S: SimilarityMatrix, k: int) -> float:
    if k < 1:
        raise ParameterError("k must be >= 1")
    ranked = _ranked_relevance(S)
    if ranked.shape[0] == 0:
        return float("nan")
    return float(ranked[:, :k].any(axis=1).mean())


def average_precisions(S: SimilarityMatrix) -> np.ndarray:
    ranked = _ranked_relevance(S)
    hits = np.cumsum(ranked, axis=1)
    ranks = np.arange(1, ranked.shape[1] + 1)
    precision = hits / ranks
    return (precision * ranked).sum(axis=1) / ranked.sum(axis=1)


def mean_ap(S: SimilarityMatrix) -> float:
    ap = average_precisions(S)
    return float(ap.mean()) if ap.size else float("nan")


def minp(S: SimilarityMatrix) -> float:
    ranked = _ranked_relevance(S)
    if ranked.shape[0] == 0:
        return float("nan")
    n_pos = ranked.sum(axis=1)
    hardest = ranked.shape[1] - np.argmax(ranked[:, ::-1], axis=1)
    return float((n_pos / hardest).mean())


def retrieval_metrics(S: SimilarityMatrix, ks=(1, 5, 10)) -> dict:
    out = {f"R@{k}": recall_at_k(S, k) for k in ks}
    out["mAP"] = mean_ap(S)
    out["mINP"] = minp(S)
    return out


@dataclass
class CounterfactualReport:
    baseline: dict
    counterfactual: dict
    delta: dict
    delta_pct: dict
    spec: MaskSpec | None = None
    top1: list = field(default_factory=list)
    chosen_phrase: list = field(default_factory=list)
    delta_s: list = field(default_factory=list)
    baseline_matrix: SimilarityMatrix | None = None
    counterfactual_matrix: SimilarityMatrix | None = None

    def rows(self):
        for name in self.baseline:
            yield name, self.baseline[name], self.counterfactual[name], self.delta[name], self.delta_pct[name]


def metric_drops(baseline: dict, counterfactual: dict, **extra) -> CounterfactualReport:
    """Absolute and relative drops; a zero baseline gives an undefined (NaN) percentage."""
    delta, pct = {}, {}
    for name, m0 in baseline.items():
        delta[name] = m0 - counterfactual[name]
        pct[name] = 100.0 * delta[name] / m0 if m0 != 0 else float("nan")
    return CounterfactualReport(dict(baseline), dict(counterfactual), delta, pct, **extra)


@dataclass
class QueryCase:
    """One text query with its embedding and evaluation phrases."""
    embedding: np.ndarray
    phrases: list  # phrase strings
    phrase_embeddings: np.ndarray  # n x D


def run_counterfactual(
    S: SimilarityMatrix,
    queries: Sequence[QueryCase],
    gallery_images: Sequence[np.ndarray],
    gallery_patches: Sequence[np.ndarray],
    grid: tuple[int, int],
    encoder: EncoderPort,
    spec: MaskSpec,
    workers: int = 1,
) -> CounterfactualReport:
    """Full rank-1 part removal protocol for one ``(alpha, p)`` setting."""
    def one(i):
        j = top1(S, i)
        q = queries[i]
        if len(q.phrases) == 0:
            return j, None, []
        image = gallery_images[j]
        deltas, sims = [], []
        for m, h in enumerate(q.phrase_embeddings):
            R = relevance_map(h, gallery_patches[j], grid, image.shape[:2], q.phrases[m])
            mask = part_mask(R, spec)
            if mask.any():
                s_new = counterfactual_similarity(q.embedding, perturb(image, mask), encoder)
            else:
                s_new = float(S.scores[i, j])
            sims.append(s_new)
            deltas.append(float(S.scores[i, j]) - s_new)
        m_star = rank1_part(deltas)
        return j, m_star, (deltas, sims)

    n_q = S.scores.shape[0]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(n_q)))
    else:
        results = [one(i) for i in range(n_q)]

    updates, chosen, delta_s, tops = {}, [], [], []
    for i, (j, m_star, extra) in enumerate(results):
        tops.append(j)
        chosen.append(m_star)
        if m_star is None:
            delta_s.append([])
            continue
        deltas, sims = extra
        delta_s.append(deltas)
        updates[i] = (j, sims[m_star])
    S_cf = cf_matrix_update(S, updates)
    return metric_drops(
        retrieval_metrics(S),
        retrieval_metrics(S_cf),
        spec=spec,
        top1=tops,
        chosen_phrase=chosen,
        delta_s=delta_s,
        baseline_matrix=S,
        counterfactual_matrix=S_cf,
    )

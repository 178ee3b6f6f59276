"""Glue between the toy world, the objective and the counterfactual protocol."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cfeval
from .formats import ingest_phrases
from .ppim import EmbeddingBatch
from .toyworld import (
    ToyEncoder,
    ToyEncoderParams,
    caption_of,
    encode_image,
    encode_phrase,
    normalize_image,
)


def encode_scenes(params: ToyEncoderParams, scenes, phrases, mask, grid) -> EmbeddingBatch:
    mask = np.asarray(mask, dtype=np.float64)
    N, P = mask.shape
    D = params.dim
    v, u = np.zeros((N, D)), np.zeros((N, D))
    Z = np.zeros((N, grid[0] * grid[1], D))
    H = np.zeros((N, P, D))
    for i, scene in enumerate(scenes):
        v[i], Z[i] = encode_image(normalize_image(scene.image), params, grid)
        if phrases[i]:
            u[i] = encode_phrase(caption_of(phrases[i]), params)
        for p, text in enumerate(phrases[i]):
            H[i, p] = encode_phrase(text, params)
    ids = np.array([s.identity for s in scenes], dtype=np.int64)
    return EmbeddingBatch(v, u, Z, H, mask, ids, tuple(grid))


@dataclass
class EvalSet:
    batch: EmbeddingBatch
    S: cfeval.SimilarityMatrix
    queries: list
    images: list
    encoder: ToyEncoder


def build_eval(params: ToyEncoderParams, scenes, documents, P: int, grid) -> EvalSet:
    """Queries are the captions of ``scenes``; the gallery is their images."""
    phrases, mask, _ = ingest_phrases(documents, P)
    batch = encode_scenes(params, scenes, phrases, mask, grid)
    S = cfeval.similarity_matrix(batch.global_text, batch.global_image, batch.identities, batch.identities)
    queries = [
        cfeval.QueryCase(batch.global_text[i], list(phrases[i]), batch.phrases[i, : len(phrases[i])])
        for i in range(batch.B)
    ]
    images = [normalize_image(s.image) for s in scenes]
    return EvalSet(batch, S, queries, images, ToyEncoder(params, grid))


def counterfactual(ev: EvalSet, alpha: float, p: float, workers: int = 1) -> cfeval.CounterfactualReport:
    return cfeval.run_counterfactual(
        ev.S, ev.queries, ev.images, list(ev.batch.patches), ev.batch.grid, ev.encoder,
        cfeval.MaskSpec(alpha, p), workers=workers,
    )


def sweep(ev: EvalSet, alphas, ps, workers: int = 1) -> list:
    return [counterfactual(ev, a, p, workers) for a in alphas for p in ps]


@dataclass
class ToyProtocol:
    """Paired-seed toy experiment: train on one world, sweep on fresh galleries.

    Each eval gallery holds one image per identity, so a perturbed top-1 can
    only be replaced by a different person. Several galleries are averaged per
    seed because R@1 on a single small gallery moves in coarse steps.
    """

    identities: int = 24
    samples: int = 4
    eval_identities: int = 96
    eval_galleries: int = 4
    grounding_scenes: int = 32
    phrases: int = 6
    grid: tuple = (4, 4)
    epochs: int = 60
    lr: float = 0.5
    alphas: tuple = (0.1, 0.3, 0.5, 0.7)
    ps: tuple = (0.1, 0.3, 0.5, 1.0)
    alpha_ref: float = 0.3
    p_ref: float = 0.1


@dataclass
class ToyRun:
    seed: int
    params: ToyEncoderParams
    curve: list
    p_curve: np.ndarray      # ΔR@1% over protocol.ps at alpha_ref
    alpha_curve: np.ndarray  # ΔR@1% over protocol.alphas at p_ref
    baseline_r1: float
    grounding: float
    untrained_grounding: float
    uniform_grounding: float


def toy_run(seed: int, loss, protocol: ToyProtocol | None = None) -> ToyRun:
    from .toyworld import TrainConfig, eval_grounding, gen_dataset, prepare, train

    pr = protocol or ToyProtocol()
    scenes, docs = gen_dataset(pr.identities, pr.samples, grid=pr.grid, seed=seed)
    phrases, mask, _ = ingest_phrases(docs, pr.phrases)
    data = prepare(scenes, phrases, mask, pr.grid, 128)
    res = train(data, TrainConfig(loss=loss, epochs=pr.epochs, lr=pr.lr), seed=seed)

    p_curves, a_curves, r1 = [], [], []
    for g in range(pr.eval_galleries):
        te, ted = gen_dataset(pr.eval_identities, 1, grid=pr.grid, seed=1000 + 100 * seed + g)
        ev = build_eval(res.params, te, ted, pr.phrases, pr.grid)
        p_curves.append([counterfactual(ev, pr.alpha_ref, p).delta_pct["R@1"] for p in pr.ps])
        a_curves.append([counterfactual(ev, a, pr.p_ref).delta_pct["R@1"] for a in pr.alphas])
        r1.append(cfeval.recall_at_k(ev.S, 1))

    held, _ = gen_dataset(pr.grounding_scenes, 1, grid=pr.grid, seed=1000 + seed)
    trained = eval_grounding(res.params, held, pr.grid)
    untrained = eval_grounding(ToyEncoderParams.init(seed=seed), held, pr.grid)
    return ToyRun(
        seed, res.params, res.curve,
        np.mean(p_curves, axis=0), np.mean(a_curves, axis=0), float(np.mean(r1)),
        trained["mean"], untrained["mean"], trained["uniform"],
    )


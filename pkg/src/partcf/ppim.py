"""Patch-phrase interaction objective.

Phrase-to-patch similarity, per-patch soft assignment over phrase slots,
phrase-conditioned region aggregation, coverage regulariser, per-slot
cross-image TAL, frequency weighting, warmup and the combined objective.
Every loss returns its value together with gradients w.r.t. the embeddings.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffmath import (
    ParameterError,
    bmm,
    ShapeError,
    l2norm_rows,
    l2norm_rows_vjp,
    matmul,
    softmax_rows,
    softmax_rows_vjp,
)

log = logging.getLogger(__name__)


class PPIMError(ValueError):
    """Raised when a batch cannot produce a part loss at all."""


@dataclass
class EmbeddingBatch:
    global_image: np.ndarray  # B x D
    global_text: np.ndarray  # B x D
    patches: np.ndarray  # B x K x D
    phrases: np.ndarray  # B x P x D, padded rows zero
    phrase_mask: np.ndarray  # B x P, 0/1
    identities: np.ndarray  # B
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        self.global_image = np.asarray(self.global_image, dtype=np.float64)
        self.global_text = np.asarray(self.global_text, dtype=np.float64)
        self.patches = np.asarray(self.patches, dtype=np.float64)
        self.phrases = np.asarray(self.phrases, dtype=np.float64)
        self.phrase_mask = np.asarray(self.phrase_mask, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        B, K, D = self.patches.shape
        if self.phrases.ndim != 3 or self.phrases.shape[0] != B or self.phrases.shape[2] != D:
            raise ShapeError(f"phrases shape {self.phrases.shape} incompatible with patches {self.patches.shape}")
        for name in ("global_image", "global_text"):
            if getattr(self, name).shape != (B, D):
                raise ShapeError(f"{name} must be {(B, D)}, got {getattr(self, name).shape}")
        if self.phrase_mask.shape != self.phrases.shape[:2]:
            raise ShapeError(f"phrase_mask must be {self.phrases.shape[:2]}, got {self.phrase_mask.shape}")
        if self.identities.shape != (B,):
            raise ShapeError(f"identities must have length {B}")
        if self.grid is None:
            self.grid = (1, K)
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        if self.grid[0] * self.grid[1] != K:
            raise ShapeError(f"grid {self.grid} does not cover K={K} patches")

    @property
    def B(self) -> int:
        return self.patches.shape[0]

    @property
    def K(self) -> int:
        return self.patches.shape[1]

    @property
    def D(self) -> int:
        return self.patches.shape[2]

    @property
    def P(self) -> int:
        return self.phrases.shape[1]

    def check_invariants(self, atol: float = 1e-5) -> None:
        """Raise ``ValueError`` if norms or padding violate the batch contract."""
        if not np.all(np.isin(self.phrase_mask, (0.0, 1.0))):
            raise ValueError("phrase_mask must be 0/1")
        pn = np.linalg.norm(self.phrases, axis=2)
        valid = self.phrase_mask > 0
        if np.any(np.abs(pn[valid] - 1) > atol):
            raise ValueError("valid phrase rows must be unit norm")
        if np.any(self.phrases[~valid] != 0):
            raise ValueError("padded phrase rows must be exactly zero")
        if np.any(np.abs(np.linalg.norm(self.patches, axis=2) - 1) > atol):
            raise ValueError("patch rows must be unit norm")


@dataclass
class PartLossConfig:
    tau_part: float = 0.07
    tau_tal: float = 0.02
    margin_tal: float = 0.1
    lambda_part: float = 0.5
    lambda_cov: float = 0.1
    warmup_epochs: int = 5
    tau_base: float = 0.07

    def __post_init__(self):
        for name in ("tau_part", "tau_tal", "tau_base"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0")
        for name in ("margin_tal", "lambda_part", "lambda_cov"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if int(self.warmup_epochs) < 1:
            raise ParameterError("warmup_epochs must be >= 1")


@dataclass
class LossReport:
    value: float
    components: dict = field(default_factory=dict)
    gradients: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def phrase_patch_similarity(batch: EmbeddingBatch, i: int) -> np.ndarray:
    if not 0 <= i < batch.B:
        raise IndexError(f"sample {i} out of range for batch of {batch.B}")
    return matmul(batch.phrases[i], batch.patches[i], transpose_b=True)


def soft_assignment(S: np.ndarray, tau_part: float) -> np.ndarray:
    """Softmax over phrase slots (rows of ``S``) for every patch column."""
    return softmax_rows(np.asarray(S).T, tau_part).T


def region_aggregate(Z: np.ndarray, A: np.ndarray) -> np.ndarray:
    return l2norm_rows(matmul(A, Z))


def coverage_loss(assignments, mask, K: int | None = None):
    """Negative mean coverage of valid phrase slots.

    Returns ``(value, grads)`` with ``grads[i]`` the gradient w.r.t.
    ``assignments[i]`` (P x K). Samples without any valid phrase are left out
    of the mean and get a zero gradient.
    """
    mask = np.asarray(mask, dtype=np.float64)
    grads = [np.zeros_like(np.asarray(a, dtype=np.float64)) for a in assignments]
    n = mask.sum(axis=1)
    admitted = np.flatnonzero(n > 0)
    if len(admitted) < len(n):
        warnings.warn(f"coverage: {len(n) - len(admitted)} sample(s) without valid phrases excluded")
    if len(admitted) == 0:
        raise PPIMError("no valid phrases in batch")
    B = len(admitted)
    total = 0.0
    for i in admitted:
        A = np.asarray(assignments[i], dtype=np.float64)
        if K is not None and A.shape[1] != K:
            raise ShapeError(f"assignment {i} has {A.shape[1]} patches, expected {K}")
        c = A.sum(axis=1)
        total += float((mask[i] * c).sum()) / n[i]
        grads[i] = np.broadcast_to((-mask[i] / (n[i] * B))[:, None], A.shape).copy()
    return -total / B, grads


def _tal_rows(M: np.ndarray, positive: np.ndarray, tau: float, margin: float, valid: np.ndarray | None = None):
    """Smoothed triplet loss of every row of ``M`` (``... x n x n`` or ``n x m``).

    ``positive[..., i, j]`` marks column ``j`` as a positive for row ``i``;
    other valid columns are negatives. ``valid[..., j]`` (default all True)
    removes padded entries both as rows and as columns. Returns
    ``(per-row values, dL/dM)`` where the gradient is for the summed values;
    invalid rows contribute zero.
    """
    M = np.asarray(M, dtype=np.float64)
    positive = np.broadcast_to(np.asarray(positive, dtype=bool), M.shape)
    if valid is None:
        col_ok = np.ones(M.shape[:-2] + (1, M.shape[-1]), dtype=bool)
        row_ok = np.ones(M.shape[:-1], dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        col_ok = valid[..., None, :]
        row_ok = valid
    pos = positive & col_ok & row_ok[..., :, None]
    neg = ~positive & col_ok & row_ok[..., :, None]
    n_pos = pos.sum(axis=-1)
    if np.any(n_pos[row_ok] == 0):
        raise ParameterError("every TAL row needs at least one positive")
    n_pos = np.maximum(n_pos, 1)
    x = (M[..., None, :] - M[..., :, None] + margin) / tau  # [..., row, positive a, negative b]
    pair = pos[..., :, None] & neg[..., None, :]
    x = np.where(pair, x, -np.inf)
    top = np.maximum(x.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(x - top)
    denom = np.exp(-top) + e.sum(axis=-1, keepdims=True)
    per_pos = (top[..., 0] + np.log(denom[..., 0])) * pos
    values = per_pos.sum(axis=-1) / n_pos
    dx = e / denom * (pos / n_pos[..., None])[..., None] / tau
    grad = dx.sum(axis=-2) - dx.sum(axis=-1)
    return values, grad


def tal_row(scores, positives, negatives, tau_tal: float = 0.02, margin_tal: float = 0.1) -> float:
    """Triplet alignment loss of one row of scores.

    ``(1/|Pos|) sum_p log(1 + sum_n exp((s_n - s_p + margin) / tau))``.
    Indices outside both sets are ignored.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = sorted(set(int(i) for i in positives))
    neg = sorted(set(int(i) for i in negatives))
    if not pos:
        raise ParameterError("tal_row needs at least one positive")
    idx = pos + neg
    mask = np.zeros((1, len(idx)), dtype=bool)
    mask[0, : len(pos)] = True
    return float(_tal_rows(s[idx][None, :], mask, tau_tal, margin_tal)[0][0])


def per_phrase_loss(batch: EmbeddingBatch, regions: np.ndarray, p: int, cfg: PartLossConfig):
    """Bidirectional TAL for phrase slot ``p``.

    ``regions`` holds the aggregated region vectors of slot ``p`` (B x D).
    Only samples whose slot ``p`` is valid take part, both as anchors and as
    candidates. Returns ``(value, grad_regions, grad_phrases)``.
    """
    values, dR, dH = _slot_losses(
        np.asarray(regions)[:, None, :], batch.phrases[:, p : p + 1, :], batch.phrase_mask[:, p : p + 1],
        batch.identities, cfg,
    )
    return float(values[0]), dR[:, 0, :], dH[:, 0, :]


def _slot_losses(regions, phrases, mask, identities, cfg: PartLossConfig, slot_scale=None, with_grad=True):
    """All per-slot TAL values at once (``regions``/``phrases`` are B x P x D).

    Returns ``(values[P], d_regions, d_phrases)``; gradients are for
    ``sum_p slot_scale[p] * values[p]`` (``slot_scale`` defaults to ones).
    """
    B, P, _ = regions.shape
    Rt = regions.transpose(1, 0, 2)  # P x B x D
    Ht = phrases.transpose(1, 0, 2)
    valid = np.asarray(mask).T > 0  # P x B
    same = identities[:, None] == identities[None, :]
    Q = bmm(Rt, Ht, transpose_b=True)  # Q[p, i, j] = <region_i, phrase_j>
    v_row, g_row = _tal_rows(Q, same, cfg.tau_tal, cfg.margin_tal, valid)
    v_col, g_col = _tal_rows(Q.swapaxes(1, 2), same, cfg.tau_tal, cfg.margin_tal, valid)
    scale = 1.0 / (2 * B)
    values = (v_row.sum(axis=1) + v_col.sum(axis=1)) * scale
    if not with_grad:
        return values, None, None
    w = np.ones(P) if slot_scale is None else np.asarray(slot_scale, dtype=np.float64)
    dQ = (g_row + g_col.swapaxes(1, 2)) * (scale * w)[:, None, None]
    d_regions = bmm(dQ, Ht).transpose(1, 0, 2)
    d_phrases = bmm(dQ.swapaxes(1, 2), Rt).transpose(1, 0, 2)
    return values, d_regions, d_phrases


def phrase_weights(mask: np.ndarray) -> np.ndarray:
    f = np.asarray(mask, dtype=np.float64).sum(axis=0)
    if f.sum() <= 0:
        raise PPIMError("no valid phrases in batch")
    return f / f.sum()


def _ppim_terms(batch: EmbeddingBatch, cfg: PartLossConfig, w_part: float, w_cov: float,
                with_grad: bool = True) -> LossReport:
    B, P, K, D = batch.B, batch.P, batch.K, batch.D
    weights = phrase_weights(batch.phrase_mask)
    notes = []
    Z, H = batch.patches, batch.phrases

    S = bmm(H, Z, transpose_b=True)  # B x P x K
    A = _column_softmax(S, cfg.tau_part)
    R = bmm(A, Z)  # B x P x D
    regions = l2norm_rows(R.reshape(B * P, D)).reshape(B, P, D)

    if len(np.unique(batch.identities)) < 2:
        notes.append("single identity in batch: part loss is zero")
        warnings.warn(notes[-1])
        part = 0.0
        d_regions = np.zeros_like(regions)
        d_phrases = np.zeros_like(H)
    else:
        values, d_regions, d_phrases = _slot_losses(regions, H, batch.phrase_mask, batch.identities, cfg,
                                                    w_part * weights, with_grad)
        part = float((weights * values).sum())

    cov, d_assign_cov = coverage_loss(A, batch.phrase_mask, K)
    value = w_part * part + w_cov * cov
    components = {"part": float(part), "coverage": float(cov)}
    if not with_grad:
        return LossReport(float(value), components, {}, notes)

    dR = l2norm_rows_vjp(R.reshape(B * P, D), d_regions.reshape(B * P, D)).reshape(B, P, D)
    dA = bmm(dR, Z, transpose_b=True) + w_cov * np.stack(d_assign_cov)
    At = A.transpose(0, 2, 1).reshape(B * K, P)
    dS = softmax_rows_vjp(At, dA.transpose(0, 2, 1).reshape(B * K, P), cfg.tau_part)
    dS = dS.reshape(B, K, P).transpose(0, 2, 1)
    d_patches = bmm(A.transpose(0, 2, 1), dR) + bmm(dS.transpose(0, 2, 1), H)
    d_phrases += bmm(dS, Z)
    return LossReport(float(value), components, {"patches": d_patches, "phrases": d_phrases}, notes)


def _column_softmax(S: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over the phrase axis of a B x P x K stack."""
    B, P, K = S.shape
    return softmax_rows(S.transpose(0, 2, 1).reshape(B * K, P), tau).reshape(B, K, P).transpose(0, 2, 1)


def part_loss(batch: EmbeddingBatch, cfg: PartLossConfig, with_grad: bool = True) -> LossReport:
    """Frequency-weighted sum of per-slot losses, with gradients for Z and H."""
    return _ppim_terms(batch, cfg, 1.0, 0.0, with_grad)


def part_objective(batch: EmbeddingBatch, cfg: PartLossConfig, with_grad: bool = True) -> LossReport:
    """``part + lambda_cov * coverage`` with gradients for Z and H."""
    return _ppim_terms(batch, cfg, 1.0, cfg.lambda_cov, with_grad)


def warmup(epoch: int, warmup_epochs: int) -> float:
    if epoch < 0 or warmup_epochs < 1:
        raise ParameterError("warmup needs epoch >= 0 and warmup_epochs >= 1")
    return min(1.0, (epoch + 1) / warmup_epochs)


def symmetric_contrastive_loss(batch: EmbeddingBatch, tau: float = 0.07) -> LossReport:
    """Stand-in base objective: symmetric cross-entropy over ``v u^T / tau``.

    Targets spread uniformly over same-identity pairs in the batch, which
    reduces to the usual diagonal target when identities are unique.
    """
    v, u, y = batch.global_image, batch.global_text, batch.identities
    B = len(y)
    logits = matmul(v, u, transpose_b=True) / tau
    target = (y[:, None] == y[None, :]).astype(np.float64)
    target /= target.sum(axis=1, keepdims=True)
    target_t = (y[:, None] == y[None, :]).astype(np.float64)
    target_t /= target_t.sum(axis=0, keepdims=True)

    def xent(lg, tg):
        top = lg.max(axis=1, keepdims=True)
        lse = top + np.log(np.exp(lg - top).sum(axis=1, keepdims=True))
        logp = lg - lse
        return -(tg * logp).sum() / B, (np.exp(logp) * tg.sum(axis=1, keepdims=True) - tg) / B

    l_i2t, g_i2t = xent(logits, target)
    l_t2i, g_t2i = xent(logits.T, target_t.T)
    d_logits = 0.5 * (g_i2t + g_t2i.T) / tau
    value = 0.5 * (l_i2t + l_t2i)
    return LossReport(
        value=float(value),
        components={"base": float(value)},
        gradients={"global_image": matmul(d_logits, u), "global_text": matmul(d_logits.T, v)},
    )


BaseLoss = Callable[[EmbeddingBatch], LossReport]


def combined_loss(batch: EmbeddingBatch, base_loss: BaseLoss | None, epoch: int, cfg: PartLossConfig) -> LossReport:
    """``base + lambda_part * r(e) * (part + lambda_cov * coverage)``."""
    if cfg.lambda_part < 0 or cfg.lambda_cov < 0:
        raise ParameterError("loss weights must be non-negative")
    if base_loss is None:
        base = symmetric_contrastive_loss(batch, cfg.tau_base)
    else:
        base = base_loss(batch)
    r = warmup(epoch, cfg.warmup_epochs)
    terms = part_objective(batch, cfg)
    scale = cfg.lambda_part * r
    grads = {
        "global_image": np.asarray(base.gradients.get("global_image", np.zeros_like(batch.global_image))),
        "global_text": np.asarray(base.gradients.get("global_text", np.zeros_like(batch.global_text))),
        "patches": scale * terms.gradients["patches"] + base.gradients.get("patches", 0.0),
        "phrases": scale * terms.gradients["phrases"] + base.gradients.get("phrases", 0.0),
    }
    for name in ("global_image", "global_text"):
        if grads[name].shape != getattr(batch, name).shape:
            raise ShapeError(f"base loss gradient for {name} has shape {grads[name].shape}")
    value = base.value + scale * (terms.components["part"] + cfg.lambda_cov * terms.components["coverage"])
    return LossReport(
        value=float(value),
        components={
            "base": base.value,
            "part": terms.components["part"],
            "coverage": terms.components["coverage"],
            "warmup": r,
        },
        gradients=grads,
        warnings=base.warnings + terms.warnings,
    )

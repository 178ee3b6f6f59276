"""Synthetic grounded scenes, toy dual encoder and a deterministic trainer.

Scenes are small "pedestrians": four colored body-part rectangles stacked on
a noisy background. Identity fixes the part colors; each scene draws its own
horizontal placement and background. Phrase annotations use the structured
part-phrase document layout that ``formats.ingest_phrases`` reads.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffmath import NumericError, ParameterError, l2norm_rows, l2norm_rows_vjp, matmul
from .ppim import EmbeddingBatch, PartLossConfig, combined_loss

log = logging.getLogger(__name__)

SCHEMA_TAG = "chuk_peds_parts_phrase_v1"

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.90, 0.10),
    "white": (0.97, 0.97, 0.97),
    "purple": (0.55, 0.15, 0.75),
    "orange": (0.98, 0.55, 0.05),
    "pink": (0.98, 0.60, 0.75),
    "cyan": (0.10, 0.85, 0.90),
    "brown": (0.50, 0.30, 0.10),
}

# part noun, schema field, row band (in grid cells, top to bottom)
PARTS = (
    ("hat", "hair_head", 0),
    ("shirt", "upper_body", 1),
    ("pants", "lower_body", 2),
    ("shoes", "footwear", 3),
)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class SyntheticScene:
    image: np.ndarray  # H x W x C in [0, 1]
    parts: list  # (phrase, (top, left, bottom, right), color name)
    identity: int
    noise_seed: int

    @property
    def phrases(self) -> list[str]:
        return [p[0] for p in self.parts]


def identity_palette(seed: int, identity: int) -> dict:
    """Part -> color name; a pure function of (seed, identity)."""
    rng = np.random.default_rng([seed, identity, 7])
    names = list(COLORS)
    pick = rng.choice(len(names), size=len(PARTS), replace=False)
    return {part: names[c] for (part, _, _), c in zip(PARTS, pick)}


BACKGROUNDS = ("blocks", "tint", "noise")


def background(rng, H, W, style: str = "blocks"):
    """Dark clutter behind the person: per-block tints, one tint, or plain noise."""
    if style not in BACKGROUNDS:
        raise ParameterError(f"unknown background {style!r}")
    if style == "noise":
        return rng.uniform(0.0, 0.3, size=(H, W, 3))
    if style == "tint":
        base = rng.uniform(0.0, 0.35, size=3)
        return np.clip(base + rng.uniform(-0.05, 0.05, size=(H, W, 3)), 0.0, 1.0)
    # independent dark tint per 8x8 block
    bh, bw = max(H // 4, 1), max(W // 4, 1)
    tints = rng.uniform(0.0, 0.35, size=(-(-H // bh), -(-W // bw), 3))
    base = np.repeat(np.repeat(tints, bh, axis=0), bw, axis=1)[:H, :W]
    return np.clip(base + rng.uniform(-0.05, 0.05, size=(H, W, 3)), 0.0, 1.0)


def annotation_document(scene: SyntheticScene, sample_id: str = "") -> dict:
    fields = {f: ["none"] for _, f, _ in PARTS}
    for phrase, _, _ in scene.parts:
        noun = phrase.split()[-1]
        field_name = next(f for n, f, _ in PARTS if n == noun)
        fields[field_name] = [phrase]
    return {
        "schema": [SCHEMA_TAG],
        "sample_id": sample_id,
        "identity": int(scene.identity),
        "clothing": {
            "upper_body": fields["upper_body"],
            "lower_body": fields["lower_body"],
            "footwear": fields["footwear"],
        },
        "accessories": {"backpack": ["none"], "others": ["none"]},
        "body_appearance": {"gender": ["unknown"], "pose_motion": ["unknown"], "height_impression": ["unknown"]},
        "hair_head": fields["hair_head"],
    }


def gen_dataset(num_identities: int, samples_per_identity: int, grid=(4, 4), image_size=(32, 32), seed: int = 0,
                background_style: str = "blocks"):
    """Return ``(scenes, documents)`` for ``num_identities * samples_per_identity`` samples."""
    if num_identities < 1 or samples_per_identity < 1:
        raise ParameterError("counts must be >= 1")
    gh, gw = grid
    H, W = image_size
    if H < gh or W < gw:
        raise ParameterError(f"image {image_size} smaller than grid {grid}")
    if gh < len(PARTS) or gw < 2:
        raise ParameterError(f"grid must be at least {len(PARTS)}x2 cells")
    rows = [r * H // gh for r in range(gh + 1)]
    cols = [c * W // gw for c in range(gw + 1)]
    person_rows = np.linspace(0, gh, len(PARTS) + 1).astype(int)

    scenes, docs = [], []
    for ident in range(num_identities):
        palette = identity_palette(seed, ident)
        for s in range(samples_per_identity):
            noise_seed = int(np.random.default_rng([seed, ident, s]).integers(2**31))
            rng = np.random.default_rng(noise_seed)
            image = background(rng, H, W, background_style)
            left_cell = int(rng.integers(0, gw - 1))
            n_parts = int(rng.integers(2, len(PARTS) + 1))
            shown = sorted(rng.choice(len(PARTS), size=n_parts, replace=False))
            parts = []
            for k, (noun, _, _) in enumerate(PARTS):
                top, bottom = rows[person_rows[k]], rows[person_rows[k + 1]]
                left, right = cols[left_cell], cols[left_cell + 2]
                color = palette[noun]
                image[top:bottom, left:right] = COLORS[color]
                if k in shown:
                    parts.append((f"{color} {noun}", (top, left, bottom, right), color))
            scene = SyntheticScene(image, parts, ident, noise_seed)
            scenes.append(scene)
            docs.append(annotation_document(scene, f"id{ident:03d}_s{s:03d}"))
    return scenes, docs


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to [-1, 1]; zero is the 'removed' value."""
    return (np.asarray(image, dtype=np.float64) - 0.5) / 0.5


PIXEL_FEATURES = 32
PIXEL_BANDWIDTH = 2.0
_FREQ_RNG = np.random.default_rng(20240917)
_FREQS = _FREQ_RNG.normal(0.0, PIXEL_BANDWIDTH, size=(3, PIXEL_FEATURES))
_PHASES = _FREQ_RNG.uniform(0.0, 2 * np.pi, size=PIXEL_FEATURES)


def pixel_features(image: np.ndarray) -> np.ndarray:
    """Fixed random Fourier features of each normalized RGB pixel (H x W x F)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-1] != _FREQS.shape[0]:
        raise ParameterError(f"expected {_FREQS.shape[0]} channels, got {image.shape[-1]}")
    return np.sqrt(2.0 / PIXEL_FEATURES) * np.cos(image @ _FREQS + _PHASES)


def cell_features(image: np.ndarray, grid) -> np.ndarray:
    """Per-cell averages of the pixel features plus a constant 1 (K x (F+1))."""
    gh, gw = grid
    H, W, _ = image.shape
    if H % gh or W % gw:
        raise ParameterError(f"image {H}x{W} not divisible into {gh}x{gw} cells")
    phi = pixel_features(image)
    F = phi.shape[-1]
    cells = phi.reshape(gh, H // gh, gw, W // gw, F).mean(axis=(1, 3)).reshape(gh * gw, F)
    return np.concatenate([cells, np.ones((gh * gw, 1))], axis=1)


def token_bag(text: str, hash_dim: int) -> np.ndarray:
    toks = tokenize(text)
    if not toks:
        raise ParameterError("empty phrase")
    bag = np.zeros(hash_dim)
    for t in toks:
        bag[fnv1a_64(t.encode("utf-8")) % hash_dim] += 1.0
    return bag


@dataclass
class ToyEncoderParams:
    image_proj: np.ndarray  # (F+1) x D over averaged pixel features
    text_proj: np.ndarray  # hash_dim x D

    @classmethod
    def init(cls, dim: int = 16, hash_dim: int = 128, seed: int = 0) -> "ToyEncoderParams":
        rng = np.random.default_rng([seed, 1])
        n_in = PIXEL_FEATURES + 1
        return cls(
            rng.normal(0, 1 / np.sqrt(n_in), size=(n_in, dim)),
            rng.normal(0, 1.0, size=(hash_dim, dim)),
        )

    @property
    def dim(self) -> int:
        return self.image_proj.shape[1]

    @property
    def hash_dim(self) -> int:
        return self.text_proj.shape[0]

    def copy(self) -> "ToyEncoderParams":
        return ToyEncoderParams(self.image_proj.copy(), self.text_proj.copy())


def encode_image(image: np.ndarray, params: ToyEncoderParams, grid=(4, 4)):
    """Encode a normalized image: ``(global D-vector, K x D patches)``."""
    patches = l2norm_rows(matmul(cell_features(image, grid), params.image_proj))
    pooled = patches.mean(axis=0, keepdims=True)
    return l2norm_rows(pooled)[0], patches


def encode_phrase(phrase: str, params: ToyEncoderParams) -> np.ndarray:
    bag = token_bag(phrase, params.hash_dim)
    return l2norm_rows(matmul(bag[None, :], params.text_proj))[0]


class ToyEncoder:
    """``EncoderPort`` adapter around fixed parameters."""

    def __init__(self, params: ToyEncoderParams, grid=(4, 4)):
        self.params = params
        self.grid = tuple(grid)

    def encode_image(self, image):
        return encode_image(image, self.params, self.grid)

    def encode_text(self, text):
        return encode_phrase(text, self.params)


@dataclass
class EncodedData:
    """Encoder inputs precomputed for a list of scenes."""
    features: np.ndarray  # N x K x (C+1)
    caption_bags: np.ndarray  # N x hash_dim
    phrase_bags: np.ndarray  # N x P x hash_dim
    phrase_mask: np.ndarray  # N x P
    identities: np.ndarray
    grid: tuple
    phrases: list = field(default_factory=list)


def caption_of(phrases) -> str:
    return " ".join(phrases)


def prepare(scenes, phrases, mask, grid, hash_dim: int) -> EncodedData:
    """``phrases``/``mask`` come from phrase ingestion (N lists, N x P)."""
    mask = np.asarray(mask, dtype=np.float64)
    N, P = mask.shape
    feats = np.stack([cell_features(normalize_image(s.image), grid) for s in scenes])
    cap = np.zeros((N, hash_dim))
    pb = np.zeros((N, P, hash_dim))
    for i, ph in enumerate(phrases):
        if ph:
            cap[i] = token_bag(caption_of(ph), hash_dim)
        for p, text in enumerate(ph):
            pb[i, p] = token_bag(text, hash_dim)
    ids = np.array([s.identity for s in scenes], dtype=np.int64)
    return EncodedData(feats, cap, pb, mask, ids, tuple(grid), [list(p) for p in phrases])


def forward(params: ToyEncoderParams, data: EncodedData, idx) -> tuple[EmbeddingBatch, dict]:
    idx = np.asarray(idx)
    F = data.features[idx]
    B, K, _ = F.shape
    D = params.dim
    pre_z = matmul(F.reshape(B * K, -1), params.image_proj)
    Z = l2norm_rows(pre_z).reshape(B, K, D)
    pooled = Z.mean(axis=1)
    v = l2norm_rows(pooled)
    pre_u = matmul(data.caption_bags[idx], params.text_proj)
    u = l2norm_rows(pre_u)
    mask = data.phrase_mask[idx]
    P = mask.shape[1]
    pre_h = matmul(data.phrase_bags[idx].reshape(B * P, -1), params.text_proj)
    Hm = l2norm_rows(pre_h).reshape(B, P, D) * mask[:, :, None]
    batch = EmbeddingBatch(v, u, Z, Hm, mask, data.identities[idx], data.grid)
    cache = dict(idx=idx, pre_z=pre_z, pooled=pooled, pre_u=pre_u, pre_h=pre_h)
    return batch, cache


def backward(params: ToyEncoderParams, data: EncodedData, cache: dict, grads: dict) -> ToyEncoderParams:
    """Gradients w.r.t. both projections, returned as a params-shaped object."""
    idx = cache["idx"]
    F = data.features[idx]
    B, K, _ = F.shape
    D = params.dim
    mask = data.phrase_mask[idx]
    P = mask.shape[1]

    d_pooled = l2norm_rows_vjp(cache["pooled"], grads["global_image"])
    dZ = grads["patches"] + d_pooled[:, None, :] / K
    d_pre_z = l2norm_rows_vjp(cache["pre_z"], dZ.reshape(B * K, D))
    g_img = matmul(F.reshape(B * K, -1).T, d_pre_z)

    d_pre_u = l2norm_rows_vjp(cache["pre_u"], grads["global_text"])
    g_txt = matmul(data.caption_bags[idx].T, d_pre_u)
    dH = (grads["phrases"] * mask[:, :, None]).reshape(B * P, D)
    d_pre_h = l2norm_rows_vjp(cache["pre_h"], dH)
    g_txt = g_txt + matmul(data.phrase_bags[idx].reshape(B * P, -1).T, d_pre_h)
    return ToyEncoderParams(g_img, g_txt)


@dataclass
class TrainConfig:
    loss: PartLossConfig = field(default_factory=PartLossConfig)
    epochs: int = 60
    batch_size: int = 16
    lr: float = 0.05
    lr_decay: float = 0.5
    decay_every: int = 20
    dim: int = 16
    hash_dim: int = 128

    def __post_init__(self):
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ParameterError(f"lr must be a positive finite number, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ParameterError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        for name in ("epochs", "batch_size", "decay_every", "dim", "hash_dim"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1")


@dataclass
class TrainResult:
    params: ToyEncoderParams
    curve: list  # one dict per epoch


def train(data: EncodedData, cfg: TrainConfig, seed: int = 0, init: ToyEncoderParams | None = None) -> TrainResult:
    """Plain full-step gradient descent on the combined objective."""
    if len(np.unique(data.identities)) < 2:
        raise ParameterError("training needs at least two identities")
    params = init.copy() if init is not None else ToyEncoderParams.init(cfg.dim, cfg.hash_dim, seed)
    N = len(data.identities)
    curve = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)
        order = np.random.default_rng([seed, epoch, 3]).permutation(N)
        sums = {"total": 0.0, "base": 0.0, "part": 0.0, "coverage": 0.0}
        n_batches = 0
        for start in range(0, N, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch, cache = forward(params, data, idx)
            rep = combined_loss(batch, None, epoch, cfg.loss)
            if not np.isfinite(rep.value):
                raise NumericError(f"loss diverged at epoch {epoch}")
            g = backward(params, data, cache, rep.gradients)
            params.image_proj -= lr * g.image_proj
            params.text_proj -= lr * g.text_proj
            sums["total"] += rep.value
            for k in ("base", "part", "coverage"):
                sums[k] += rep.components[k]
            n_batches += 1
        row = {k: v / n_batches for k, v in sums.items()}
        row.update(epoch=epoch, lr=lr, warmup=min(1.0, (epoch + 1) / cfg.loss.warmup_epochs))
        curve.append(row)
        log.debug("epoch %d total %.5f", epoch, row["total"])
    return TrainResult(params, curve)


def grounding_score(R: np.ndarray, rect) -> float:
    """Fraction of relevance mass inside ``rect = (top, left, bottom, right)``."""
    top, left, bottom, right = rect
    total = R.sum()
    if total <= 0:
        return (bottom - top) * (right - left) / R.size
    return float(R[top:bottom, left:right].sum() / total)


def eval_grounding(params: ToyEncoderParams, scenes, grid=(4, 4)) -> dict:
    """Per-phrase and mean grounding scores on scenes with known rectangles."""
    from .cfeval import relevance_map

    per_phrase: dict[str, list] = {}
    uniform = []
    for scene in scenes:
        _, patches = encode_image(normalize_image(scene.image), params, grid)
        for phrase, rect, _ in scene.parts:
            R = relevance_map(encode_phrase(phrase, params), patches, grid, scene.image.shape[:2], phrase)
            per_phrase.setdefault(phrase, []).append(grounding_score(R.values, rect))
            top, left, bottom, right = rect
            uniform.append((bottom - top) * (right - left) / (scene.image.shape[0] * scene.image.shape[1]))
    scores = [s for v in per_phrase.values() for s in v]
    return {
        "per_phrase": {k: float(np.mean(v)) for k, v in sorted(per_phrase.items())},
        "mean": float(np.mean(scores)) if scores else float("nan"),
        "uniform": float(np.mean(uniform)) if uniform else float("nan"),
    }

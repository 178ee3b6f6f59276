"""On-disk formats: embedding files, phrase documents, heatmaps, reports.

All writers are deterministic and use ``\\n`` newlines so identical inputs
give byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from pathlib import Path

import numpy as np

from .ppim import EmbeddingBatch

log = logging.getLogger(__name__)

EMB_MAGIC = "IPAEMB 1"
HEADER_KEYS = ("B", "D", "K", "P", "GH", "GW")
CONTROLLED_TOKENS = frozenset({"none", "unknown", "not_visible"})
FIELD_ORDER = (
    ("clothing", "upper_body"),
    ("clothing", "lower_body"),
    ("clothing", "footwear"),
    ("accessories", "backpack"),
    ("accessories", "others"),
    ("body_appearance", "gender"),
    ("body_appearance", "pose_motion"),
    ("body_appearance", "height_impression"),
    ("hair_head", None),
)
REPORT_HEADER = ("metric", "baseline", "counterfactual", "delta", "delta_pct")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


# -- embedding files ---------------------------------------------------------

def _sections(B, D, K, P):
    return (
        ("global_image", "<f4", (B, D)),
        ("global_text", "<f4", (B, D)),
        ("patches", "<f4", (B, K, D)),
        ("phrases", "<f4", (B, P, D)),
        ("phrase_mask", "<f4", (B, P)),
        ("identities", "<i4", (B,)),
    )


def encode_embeddings(batch: EmbeddingBatch) -> bytes:
    """Serialize a batch; float values are rounded to 32 bits."""
    gh, gw = batch.grid
    dims = dict(B=batch.B, D=batch.D, K=batch.K, P=batch.P, GH=gh, GW=gw)
    header = EMB_MAGIC + "\n" + "".join(f"{k}={dims[k]}\n" for k in HEADER_KEYS) + "\n"
    out = [header.encode("ascii")]
    for name, dtype, shape in _sections(batch.B, batch.D, batch.K, batch.P):
        arr = np.asarray(getattr(batch, name))
        if dtype == "<f4" and not np.all(np.isfinite(arr)):
            raise FormatError(f"{name} holds non-finite values")
        out.append(np.ascontiguousarray(arr.reshape(shape), dtype=dtype).tobytes())
    return b"".join(out)


def write_embeddings(batch: EmbeddingBatch, path) -> None:
    Path(path).write_bytes(encode_embeddings(batch))


def decode_embeddings(data: bytes) -> EmbeddingBatch:
    end = data.find(b"\n\n")
    if end < 0:
        raise FormatError("header not terminated by a blank line", len(data))
    try:
        lines = data[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ASCII", exc.start) from exc
    if lines[0] != EMB_MAGIC:
        raise FormatError(f"bad magic {lines[0]!r}", 0)
    dims = {}
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        key, sep, val = line.partition("=")
        if not sep or key not in HEADER_KEYS or not val.isdigit():
            raise FormatError(f"bad header line {line!r}", offset)
        dims[key] = int(val)
        offset += len(line) + 1
    missing = [k for k in HEADER_KEYS if k not in dims]
    if missing:
        raise FormatError(f"header lacks {missing}", offset)
    B, D, K, P = dims["B"], dims["D"], dims["K"], dims["P"]
    if dims["GH"] * dims["GW"] != K:
        raise FormatError(f"K={K} differs from GH*GW={dims['GH'] * dims['GW']}", 0)
    pos = end + 2
    sections = _sections(B, D, K, P)
    expected = pos + sum(4 * math.prod(shape) for _, _, shape in sections)
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "trailing bytes"
        raise FormatError(f"{kind}: expected {expected} bytes, got {len(data)}", min(len(data), expected))
    fields = {}
    for name, dtype, shape in sections:
        n = math.prod(shape)
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(shape)
        if dtype == "<f4":
            bad = np.flatnonzero(~np.isfinite(arr.ravel()))
            if bad.size:
                raise FormatError(f"non-finite value in {name}", pos + 4 * int(bad[0]))
        fields[name] = arr.astype(np.float64 if dtype == "<f4" else np.int64)
        pos += 4 * n
    return EmbeddingBatch(grid=(dims["GH"], dims["GW"]), **fields)


def read_embeddings(path) -> EmbeddingBatch:
    return decode_embeddings(Path(path).read_bytes())


# -- phrase documents --------------------------------------------------------

def flatten_document(doc) -> list[str]:
    """Phrases of one annotation document in the fixed field order."""
    if not isinstance(doc, dict):
        raise FormatError("annotation document must be a JSON object")
    out = []
    for group, name in FIELD_ORDER:
        node = doc.get(group)
        if node is None:
            continue
        if name is not None:
            if not isinstance(node, dict):
                raise FormatError(f"group {group!r} must be an object")
            node = node.get(name)
            if node is None:
                continue
        if isinstance(node, str):
            node = [node]
        if not isinstance(node, list) or not all(isinstance(x, str) for x in node):
            raise FormatError(f"field {group}.{name or ''} must be a list of strings")
        for raw in node:
            phrase = " ".join(raw.lower().split())
            if not phrase or phrase in CONTROLLED_TOKENS:
                continue
            out.append("backpack" if name == "backpack" else phrase)
    return out


def ingest_phrases(documents, P: int):
    """Return ``(phrases, mask, flagged)``.

    ``phrases[i]`` holds at most ``P`` strings, ``mask`` is ``N x P`` and
    ``flagged`` lists ``(index, reason)`` for malformed or empty samples.
    Malformed samples keep their position with an all-zero mask.
    """
    phrases, flagged = [], []
    mask = np.zeros((len(documents), P))
    for i, doc in enumerate(documents):
        try:
            flat = flatten_document(doc)
        except FormatError as exc:
            log.warning("annotation %d skipped: %s", i, exc)
            flagged.append((i, str(exc)))
            phrases.append([])
            continue
        kept = flat[:P]
        if not kept:
            flagged.append((i, "no valid phrases"))
        phrases.append(kept)
        mask[i, : len(kept)] = 1.0
    return phrases, mask, flagged


def read_documents(path) -> list:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    return data


# -- heatmaps ----------------------------------------------------------------

def quantize(values: np.ndarray) -> np.ndarray:
    """``round(255 * v)`` with halves rounded up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def write_heatmap(R, path) -> None:
    values = R.values if hasattr(R, "values") else R
    q = quantize(values)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_heatmap(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError("not a binary 8-bit graymap", 0)
    w, h = (int(x) for x in parts[1].split())
    body = parts[3]
    if len(body) != w * h:
        raise FormatError(f"expected {w * h} pixel bytes, got {len(body)}", len(data) - len(body))
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# -- CSV reports -------------------------------------------------------------

def fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if x == 0:
        return "0"
    return f"{x:.6g}"


def report_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for name, base, cf, d, pct in report.rows():
        w.writerow([name, fmt(base), fmt(cf), fmt(d), fmt(pct)])
    return buf.getvalue()


def write_report(report, path) -> None:
    Path(path).write_text(report_csv(report), encoding="utf-8", newline="\n")


def write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def read_rows(path) -> tuple[list, list]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]


# -- trained parameters and datasets -------------------------------------------

PARAMS_TAG = "partcf-params 1"


def write_params(params, path, **meta) -> None:
    doc = {
        "format": PARAMS_TAG,
        "image_proj": params.image_proj.tolist(),
        "text_proj": params.text_proj.tolist(),
        **meta,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8", newline="\n")


def read_params(path):
    from .toyworld import ToyEncoderParams

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != PARAMS_TAG:
        raise FormatError(f"{path}: not a parameter file")
    params = ToyEncoderParams(np.array(doc["image_proj"], dtype=np.float64), np.array(doc["text_proj"], dtype=np.float64))
    return params, {k: v for k, v in doc.items() if k not in ("format", "image_proj", "text_proj")}


def write_dataset(scenes, documents, out_dir, **meta) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.image for s in scenes]).astype(np.float64)
    with open(out / "images.npy", "wb") as fh:
        np.save(fh, images, allow_pickle=False)
    scene_meta = [
        {
            "identity": int(s.identity),
            "noise_seed": int(s.noise_seed),
            "parts": [{"phrase": ph, "rect": [int(x) for x in rect], "color": c} for ph, rect, c in s.parts],
        }
        for s in scenes
    ]
    (out / "scenes.json").write_text(json.dumps({**meta, "scenes": scene_meta}, indent=1, sort_keys=True) + "\n",
                                     encoding="utf-8", newline="\n")
    (out / "annotations.json").write_text(json.dumps(documents, indent=1) + "\n", encoding="utf-8", newline="\n")


def read_dataset(data_dir):
    """Return ``(scenes, documents, meta)``."""
    from .toyworld import SyntheticScene

    d = Path(data_dir)
    try:
        images = np.load(d / "images.npy", allow_pickle=False)
        meta = json.loads((d / "scenes.json").read_text(encoding="utf-8"))
        documents = read_documents(d / "annotations.json")
    except (OSError, ValueError) as exc:
        raise FormatError(f"{data_dir}: unreadable dataset ({exc})") from exc
    if images.ndim != 4 or not np.all(np.isfinite(images)):
        raise FormatError(f"{data_dir}: images.npy must be a finite N x H x W x C array")
    entries = meta.pop("scenes")
    if len(entries) != len(images) or len(documents) != len(images):
        raise FormatError(f"{data_dir}: images, scenes and annotations disagree in length")
    scenes = [
        SyntheticScene(img, [(p["phrase"], tuple(p["rect"]), p["color"]) for p in e["parts"]], e["identity"], e["noise_seed"])
        for img, e in zip(images, entries)
    ]
    return scenes, documents, meta

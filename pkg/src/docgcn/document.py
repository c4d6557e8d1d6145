"""Documents as fully connected graphs of OCR text segments.

Covers geometry (boxes, pairwise edge features), annotation alignment to IOB
token labels, the left-to-right / top-to-bottom reading order used for
sequence baselines, and the NDJSON corpus format.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

OUTSIDE = "O"
OTHER = "other"

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DocumentParseError(ValueError):
    pass


def tokenize(text: str, mode: str = "word") -> list[str]:
    """Split on whitespace and punctuation boundaries; ``mode="char"`` yields
    one token per non-space character."""
    return [t for t, _ in tokenize_with_offsets(text, mode)]


def tokenize_with_offsets(text: str, mode: str = "word") -> list[tuple[str, tuple[int, int]]]:
    if mode == "word":
        return [(m.group(), m.span()) for m in _WORD_RE.finditer(text)]
    if mode == "char":
        return [(ch, (i, i + 1)) for i, ch in enumerate(text) if not ch.isspace()]
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def normalize_value(value: str, mode: str = "word") -> str:
    """Canonical form used for value matching: tokens joined by one space
    (no separator in char mode)."""
    sep = "" if mode == "char" else " "
    return sep.join(tokenize(value, mode))


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width and height must be positive, got w={self.w}, h={self.h}")

    @property
    def cx(self) -> float:
        return self.x + 0.5 * self.w

    @property
    def cy(self) -> float:
        return self.y + 0.5 * self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def overlap_area(self, other: "BoundingBox") -> float:
        dx = min(self.x + self.w, other.x + other.w) - max(self.x, other.x)
        dy = min(self.y + self.h, other.y + other.h) - max(self.y, other.y)
        return max(dx, 0.0) * max(dy, 0.0)

    def overlap_ratio(self, other: "BoundingBox") -> float:
        return self.overlap_area(other) / min(self.area, other.area)

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x * s, self.y * s, self.w * s, self.h * s)

    def clamped(self, page_w: float, page_h: float) -> "BoundingBox":
        x = min(max(self.x, 0.0), page_w - self.w) if self.w <= page_w else 0.0
        y = min(max(self.y, 0.0), page_h - self.h) if self.h <= page_h else 0.0
        return BoundingBox(x, y, min(self.w, page_w), min(self.h, page_h))

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class TextSegment:
    id: int
    text: str
    bbox: BoundingBox
    mode: str = "word"
    tokens: tuple[str, ...] = field(init=False)
    offsets: tuple[tuple[int, int], ...] = field(init=False, repr=False)

    def __post_init__(self):
        pairs = tokenize_with_offsets(self.text, self.mode)
        object.__setattr__(self, "tokens", tuple(t for t, _ in pairs))
        object.__setattr__(self, "offsets", tuple(o for _, o in pairs))


@dataclass(frozen=True)
class EntityAnnotation:
    entity_type: str
    value: str
    bbox: BoundingBox


@dataclass(frozen=True)
class Document:
    doc_id: str
    segments: tuple[TextSegment, ...]
    page_w: float
    page_h: float
    annotations: tuple[EntityAnnotation, ...] = ()

    def __post_init__(self):
        if not self.segments:
            raise DocumentParseError(f"document {self.doc_id!r} has no segments")

    def __len__(self) -> int:
        return len(self.segments)

    def transformed(self, dx: float = 0.0, dy: float = 0.0, scale: float = 1.0) -> "Document":
        """Shift then scale every box (page and annotations included)."""

        def tf(b: BoundingBox) -> BoundingBox:
            return b.shifted(dx, dy).scaled(scale)

        return Document(
            self.doc_id,
            tuple(TextSegment(s.id, s.text, tf(s.bbox), s.mode) for s in self.segments),
            self.page_w * scale,
            self.page_h * scale,
            tuple(EntityAnnotation(a.entity_type, a.value, tf(a.bbox)) for a in self.annotations),
        )

    def permuted(self, order: Sequence[int]) -> "Document":
        return Document(
            self.doc_id, tuple(self.segments[i] for i in order), self.page_w, self.page_h, self.annotations
        )


# ---------------------------------------------------------------- geometry


def edge_features(src: TextSegment, dst: TextSegment) -> np.ndarray:
    """``[dx, dy, w_src/h_src, h_dst/h_src, w_dst/h_src]`` with signed
    center-to-center distances scaled by the source height."""
    a, b = src.bbox, dst.bbox
    return np.array(
        [(b.cx - a.cx) / a.h, (b.cy - a.cy) / a.h, a.w / a.h, b.h / a.h, b.w / a.h],
        dtype=np.float64,
    )


def edge_feature_tensor(segments: Sequence[TextSegment]) -> np.ndarray:
    """All pairwise edge features, shape ``(n, n, 5)``; entry ``[i, j]`` is
    ``edge_features(segments[i], segments[j])``."""
    boxes = np.array([s.bbox.as_list() for s in segments], dtype=np.float64)
    x, y, w, h = boxes.T
    cx, cy = x + 0.5 * w, y + 0.5 * h
    hs = h[:, None]
    n = len(segments)
    out = np.empty((n, n, 5))
    out[..., 0] = (cx[None, :] - cx[:, None]) / hs
    out[..., 1] = (cy[None, :] - cy[:, None]) / hs
    out[..., 2] = np.broadcast_to((w / h)[:, None], (n, n))
    out[..., 3] = h[None, :] / hs
    out[..., 4] = w[None, :] / hs
    return out


@dataclass(frozen=True)
class DocumentGraph:
    """Complete directed graph over segments, self-edges included."""

    segment_ids: tuple[int, ...]
    edges: np.ndarray  # (n, n, 5)

    @property
    def n_nodes(self) -> int:
        return len(self.segment_ids)

    @property
    def n_edges(self) -> int:
        return self.n_nodes**2


def build_graph(doc: Document) -> DocumentGraph:
    if not doc.segments:
        raise ValueError("cannot build a graph from an empty document")
    return DocumentGraph(tuple(s.id for s in doc.segments), edge_feature_tensor(doc.segments))


# -------------------------------------------------------------- alignment


def iob_tagset(entity_types: Sequence[str]) -> list[str]:
    """Tag list with ``O`` at index 0, then ``B-X``, ``I-X`` per type."""
    tags = [OUTSIDE]
    for t in entity_types:
        tags += [f"B-{t}", f"I-{t}"]
    return tags


def is_valid_iob(tags: Sequence[str]) -> bool:
    prev = OUTSIDE
    for tag in tags:
        if tag.startswith("I-") and prev[2:] != tag[2:]:
            return False
        prev = tag
    return True


@dataclass
class Alignment:
    tags: list[list[str]]  # per segment, per token
    segment_types: list[str]  # per segment: entity type or OTHER
    matched: int = 0
    dropped: int = 0
    warnings: list[str] = field(default_factory=list)


def _find_sublist(hay: Sequence[str], needle: Sequence[str], free: Sequence[bool]) -> int:
    m = len(needle)
    for start in range(len(hay) - m + 1):
        if tuple(hay[start : start + m]) == tuple(needle) and all(free[start : start + m]):
            return start
    return -1


def align_annotations(
    doc: Document,
    annotations: Iterable[EntityAnnotation] | None = None,
    threshold: float = 0.7,
) -> Alignment:
    """Assign each annotated entity to a segment and emit IOB labels.

    A segment contains an entity when overlap / min(area) exceeds
    ``threshold`` (full containment always counts, so ``threshold=1`` works); among containing segments whose tokens include the value,
    the highest ratio wins (lowest index on ties). Entities that overlap but
    whose value cannot be located are dropped and reported.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if annotations is None:
        annotations = doc.annotations
    segs = doc.segments
    tags = [[OUTSIDE] * len(s.tokens) for s in segs]
    seg_types = [OTHER] * len(segs)
    result = Alignment(tags, seg_types)
    for ann in annotations:
        ratios = [s.bbox.overlap_ratio(ann.bbox) for s in segs]
        candidates = sorted(
            (i for i, r in enumerate(ratios) if r > threshold or r >= 1.0), key=lambda i: (-ratios[i], i)
        )
        if not candidates:
            continue
        needle = tokenize(ann.value, segs[candidates[0]].mode)
        placed = False
        for i in candidates:
            free = [t == OUTSIDE for t in tags[i]]
            start = _find_sublist(segs[i].tokens, needle, free) if needle else -1
            if start < 0:
                continue
            tags[i][start] = f"B-{ann.entity_type}"
            for k in range(start + 1, start + len(needle)):
                tags[i][k] = f"I-{ann.entity_type}"
            if seg_types[i] == OTHER:
                seg_types[i] = ann.entity_type
            result.matched += 1
            placed = True
            break
        if not placed:
            msg = (
                f"{doc.doc_id}: {ann.entity_type} value {ann.value!r} overlaps a segment "
                "but was not found in its text; dropped from supervision"
            )
            log.warning(msg)
            result.warnings.append(msg)
            result.dropped += 1
    return result


# ---------------------------------------------------------- reading order


def reading_order(doc: Document) -> list[int]:
    """Segment ids grouped into lines top-to-bottom, left-to-right within a line.

    Segments join the current line while their vertical center lies within
    half the median segment height of the line's first segment.
    """
    segs = list(doc.segments)
    tol = 0.5 * float(np.median([s.bbox.h for s in segs]))
    by_y = sorted(segs, key=lambda s: (s.bbox.cy, s.bbox.x, s.id))
    lines: list[list[TextSegment]] = []
    anchor = None
    for s in by_y:
        if anchor is None or s.bbox.cy - anchor > tol:
            lines.append([s])
            anchor = s.bbox.cy
        else:
            lines[-1].append(s)
    order = []
    for line in lines:
        order += [s.id for s in sorted(line, key=lambda s: (s.bbox.x, s.id))]
    return order


# ---------------------------------------------------------- serialization


def _box(raw, where: str) -> BoundingBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise DocumentParseError(f"{where}: bbox must be [x, y, w, h], got {raw!r}")
    try:
        return BoundingBox(*(float(v) for v in raw))
    except (TypeError, ValueError) as err:
        raise DocumentParseError(f"{where}: {err}") from err


def load_document(record: dict, mode: str = "word") -> Document:
    """Validate one document record and build a :class:`Document`."""
    if not isinstance(record, dict):
        raise DocumentParseError(f"document record must be an object, got {type(record).__name__}")
    doc_id = record.get("doc_id")
    if not isinstance(doc_id, str):
        raise DocumentParseError("document record lacks a string 'doc_id'")
    where = f"document {doc_id!r}"
    page = record.get("page")
    if not isinstance(page, dict) or "w" not in page or "h" not in page:
        raise DocumentParseError(f"{where}: missing 'page' with 'w' and 'h'")
    page_w, page_h = float(page["w"]), float(page["h"])
    if not (page_w > 0 and page_h > 0):
        raise DocumentParseError(f"{where}: page size must be positive")
    raw_segments = record.get("segments")
    if not isinstance(raw_segments, list) or not raw_segments:
        raise DocumentParseError(f"{where}: 'segments' must be a non-empty list")
    seen: set[int] = set()
    segments = []
    for k, raw in enumerate(raw_segments):
        loc = f"{where}, segment #{k}"
        if not isinstance(raw, dict):
            raise DocumentParseError(f"{loc}: not an object")
        for key in ("id", "text", "bbox"):
            if key not in raw:
                raise DocumentParseError(f"{loc}: missing field {key!r}")
        sid = raw["id"]
        if not isinstance(sid, int) or isinstance(sid, bool):
            raise DocumentParseError(f"{loc}: 'id' must be an integer")
        loc = f"{where}, segment id {sid}"
        if sid in seen:
            raise DocumentParseError(f"{loc}: duplicate segment id")
        seen.add(sid)
        if not isinstance(raw["text"], str):
            raise DocumentParseError(f"{loc}: 'text' must be a string")
        box = _box(raw["bbox"], loc).clamped(page_w, page_h)
        segments.append(TextSegment(sid, raw["text"], box, mode))
    annotations = []
    for k, raw in enumerate(record.get("annotations", []) or []):
        loc = f"{where}, annotation #{k}"
        if not isinstance(raw, dict) or not {"type", "value", "bbox"} <= raw.keys():
            raise DocumentParseError(f"{loc}: needs 'type', 'value' and 'bbox'")
        annotations.append(EntityAnnotation(str(raw["type"]), str(raw["value"]), _box(raw["bbox"], loc)))
    return Document(doc_id, tuple(segments), page_w, page_h, tuple(annotations))


def document_to_record(doc: Document) -> dict:
    return {
        "doc_id": doc.doc_id,
        "page": {"w": doc.page_w, "h": doc.page_h},
        "segments": [{"id": s.id, "text": s.text, "bbox": s.bbox.as_list()} for s in doc.segments],
        "annotations": [
            {"type": a.entity_type, "value": a.value, "bbox": a.bbox.as_list()} for a in doc.annotations
        ],
    }


def load_corpus(path, mode: str = "word") -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise DocumentParseError(f"{path}:{lineno}: invalid JSON: {err}") from err
            try:
                docs.append(load_document(record, mode))
            except DocumentParseError as err:
                raise DocumentParseError(f"{path}:{lineno}: {err}") from err
    return docs


def save_corpus(docs: Iterable[Document], path) -> None:
    lines = [json.dumps(document_to_record(d), sort_keys=True) for d in docs]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

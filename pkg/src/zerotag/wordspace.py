"""Word-vector side information and the trainable projection into the joint space.

The label branch is: token -> pre-trained vector (frozen lookup table) ->
affine projection -> L2 normalization. Tags that cannot be resolved to a
vector are dropped, never approximated, under the default strict policy.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

_JOIN_RE = re.compile(r"[\s\-]+")


class WordVectorParseError(ValueError):
    """Raised for malformed word-vector text streams."""


class DegenerateProjectionError(ValueError):
    """Raised when the affine map sends a vector to (numerically) zero."""


@dataclass(frozen=True)
class WordVectorTable:
    """token -> D-dimensional vector lookup, immutable after construction."""

    dimension: int
    entries: dict[str, np.ndarray]
    duplicate_count: int = 0

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, token: str) -> np.ndarray | None:
        return self.entries.get(token)


@dataclass(frozen=True)
class ResolutionPolicy:
    """Which fallbacks resolve_tag may use after an exact lookup fails.

    joined:   strip whitespace/hyphens and look up the concatenation.
    averaged: mean of per-word vectors when every word is present.
    """

    allow_joined: bool = True
    allow_averaged: bool = False


STRICT_POLICY = ResolutionPolicy(allow_joined=True, allow_averaged=False)


@dataclass(frozen=True)
class TagResolution:
    tag: str
    status: str  # exact | joined | averaged | missing
    vector: np.ndarray | None = None

    def __post_init__(self):
        if (self.vector is None) != (self.status == "missing"):
            raise ValueError(f"vector must be present iff status != missing (got {self.status})")


@dataclass
class ProjectionParams:
    """Affine map [d, D] + bias [d] from word space into the joint space."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1 or self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError(f"inconsistent projection shapes {self.weight.shape} / {self.bias.shape}")
        if self.weight.shape[0] < 1:
            raise ValueError("joint dimension must be >= 1")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("projection parameters must be finite")

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]


def normalize_tag(tag: str) -> str:
    return tag.strip().lower()


def parse_word_vectors(stream, allow_list: set[str] | None = None) -> WordVectorTable:
    """Parse the standard text layout: one "token f1 f2 ... fD" per line.

    D is fixed by the first line. With allow_list given, only listed tokens
    are kept (bounds memory for large tables). Duplicate tokens keep the
    first occurrence; the number of duplicates seen is reported on the table.
    """
    if isinstance(stream, str):
        stream = stream.splitlines()
    dimension = None
    entries: dict[str, np.ndarray] = {}
    duplicates = 0
    for line_no, line in enumerate(stream, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split(" ")
        token, fields = parts[0], parts[1:]
        if not token or not fields:
            raise WordVectorParseError(f"line {line_no}: expected 'token f1 ... fD'")
        if dimension is None:
            dimension = len(fields)
        elif len(fields) != dimension:
            raise WordVectorParseError(
                f"line {line_no}: dimension mismatch, expected {dimension} floats, got {len(fields)}"
            )
        if allow_list is not None and token not in allow_list:
            continue
        if token in entries:
            duplicates += 1
            continue
        try:
            vector = np.array([float(f) for f in fields], dtype=np.float64)
        except ValueError as exc:
            raise WordVectorParseError(f"line {line_no}: unparseable float ({exc})") from None
        if not np.all(np.isfinite(vector)):
            raise WordVectorParseError(f"line {line_no}: non-finite vector component")
        entries[token] = vector
    if dimension is None:
        raise WordVectorParseError("empty stream: no word vectors found")
    return WordVectorTable(dimension=dimension, entries=entries, duplicate_count=duplicates)


def serialize_word_vectors(table: WordVectorTable) -> str:
    lines = []
    for token, vector in table.entries.items():
        lines.append(token + " " + " ".join(repr(float(v)) for v in vector))
    return "\n".join(lines) + "\n"


def resolve_tag(table: WordVectorTable, tag: str, policy: ResolutionPolicy = STRICT_POLICY) -> TagResolution:
    """Resolve a tag string to a vector: exact, then joined, then averaged.

    Missing is a value, not an error; callers decide whether to drop.
    """
    if not tag:
        raise ValueError("tag must be nonempty")
    norm = normalize_tag(tag)
    vector = table.get(norm)
    if vector is not None:
        return TagResolution(tag=tag, status="exact", vector=vector)
    if policy.allow_joined:
        joined = _JOIN_RE.sub("", norm)
        if joined and joined != norm:
            vector = table.get(joined)
            if vector is not None:
                return TagResolution(tag=tag, status="joined", vector=vector)
    if policy.allow_averaged:
        words = [w for w in _JOIN_RE.split(norm) if w]
        if len(words) > 1:
            vectors = [table.get(w) for w in words]
            if all(v is not None for v in vectors):
                return TagResolution(tag=tag, status="averaged", vector=np.mean(vectors, axis=0))
    return TagResolution(tag=tag, status="missing", vector=None)


def build_label_matrix(
    table: WordVectorTable,
    tags: list[str],
    policy: ResolutionPolicy = STRICT_POLICY,
) -> tuple[list[tuple[str, np.ndarray]], list[str]]:
    """Resolve an ordered tag list; returns (kept (tag, vector) pairs, dropped tags).

    Input order is preserved in `kept`; `dropped` holds the tags whose
    resolution is missing. Tags that collide after normalization are an
    error.
    """
    if not tags:
        raise ValueError("tags must be nonempty")
    seen: set[str] = set()
    for tag in tags:
        norm = normalize_tag(tag)
        if norm in seen:
            raise ValueError(f"duplicate tag after normalization: {tag!r}")
        seen.add(norm)
    kept: list[tuple[str, np.ndarray]] = []
    dropped: list[str] = []
    for tag in tags:
        res = resolve_tag(table, tag, policy)
        if res.status == "missing":
            dropped.append(tag)
        else:
            kept.append((tag, res.vector))
    return kept, dropped


def project_tag(vector: np.ndarray, params: ProjectionParams) -> np.ndarray:
    """Map a word vector to a unit-norm point in the joint space."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (params.input_dim,):
        raise ValueError(f"vector length {vector.shape} != table dimension {params.input_dim}")
    mapped = params.weight @ vector + params.bias
    norm = float(np.linalg.norm(mapped))
    if norm < 1e-12:
        raise DegenerateProjectionError("projection produced a (numerically) zero vector")
    return mapped / norm

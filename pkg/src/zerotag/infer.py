"""Zero-shot prediction: rank and threshold candidate labels for audio.

A label index is built by pushing any candidate tag set (including tags the
checkpoint never trained on) through the trained projection; tracks are
embedded with the trained encoder and scored by cosine similarity. Scores
are raw cosines in [-1, 1] and thresholds are applied on that scale. Ties
are broken by candidate/track list order for reproducibility.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dsp import PcmSignal, build_mel_filterbank, mel_spectrogram, resample
from .encoder import encode_track
from .training import ModelCheckpoint
from .wordspace import ResolutionPolicy, STRICT_POLICY, WordVectorTable, build_label_matrix, project_tag, resolve_tag


@dataclass(frozen=True)
class LabelIndex:
    """Ordered candidate tags with their unit-norm joint-space points."""

    tags: tuple[str, ...]
    points: np.ndarray  # (n_tags, d), unit rows
    dropped: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.tags)


@dataclass(frozen=True)
class AnnotationResult:
    """Per-tag cosine scores, the thresholded selection, and the ranking."""

    tags: tuple[str, ...]
    scores: np.ndarray
    threshold: float
    selected: tuple[str, ...]
    ranking: tuple[tuple[str, float], ...]


def build_label_index(
    checkpoint: ModelCheckpoint,
    candidate_tags: list[str],
    table: WordVectorTable,
    policy: ResolutionPolicy = STRICT_POLICY,
) -> LabelIndex:
    """Project every resolvable candidate tag with the trained projection."""
    kept, dropped = build_label_matrix(table, candidate_tags, policy)
    if not kept:
        raise ValueError("no candidate tag resolves in the word table")
    params = checkpoint.projection_params()
    points = np.stack([project_tag(vec, params) for _, vec in kept])
    return LabelIndex(tags=tuple(tag for tag, _ in kept), points=points, dropped=tuple(dropped))


def _ranked_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on negated scores: descending, ties keep input order
    return np.argsort(-scores, kind="stable")


def nearest_labels(point: np.ndarray, index: LabelIndex, k: int) -> list[tuple[str, float]]:
    """Top-k candidate tags by cosine score, descending."""
    if len(index) == 0:
        raise ValueError("empty label index")
    if not (1 <= k <= len(index)):
        raise ValueError(f"k must be in [1, {len(index)}], got {k}")
    point = np.asarray(point, dtype=np.float64)
    norm = float(np.linalg.norm(point))
    if norm < 1e-12:
        raise ValueError("cannot rank labels for a zero query point")
    scores = index.points @ (point / norm)
    order = _ranked_order(scores)[:k]
    return [(index.tags[i], float(scores[i])) for i in order]


def embed_signal(checkpoint: ModelCheckpoint, signal: PcmSignal) -> np.ndarray:
    """Full audio front end + encoder: raw signal to unit-norm embedding."""
    signal = resample(signal, checkpoint.dsp_config.target_sample_rate)
    mel = mel_spectrogram(signal, checkpoint.dsp_config)
    return encode_track(checkpoint.parameter_store(), checkpoint.encoder_config, mel, checkpoint.patch_policy)


def annotate(
    checkpoint: ModelCheckpoint,
    signal: PcmSignal,
    index: LabelIndex,
    threshold: float,
) -> AnnotationResult:
    """Embed a track and select all labels whose cosine meets the threshold."""
    if not (-1.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [-1, 1] (cosine range), got {threshold}")
    embedding = embed_signal(checkpoint, signal)
    return annotate_point(embedding, index, threshold)


def annotate_point(embedding: np.ndarray, index: LabelIndex, threshold: float) -> AnnotationResult:
    """Threshold/rank an already-computed embedding against a label index."""
    if not (-1.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [-1, 1] (cosine range), got {threshold}")
    scores = index.points @ np.asarray(embedding, dtype=np.float64)
    order = _ranked_order(scores)
    ranking = tuple((index.tags[i], float(scores[i])) for i in order)
    selected = tuple(tag for tag, score in zip(index.tags, scores) if score >= threshold)
    return AnnotationResult(tags=index.tags, scores=scores, threshold=threshold,
                            selected=selected, ranking=ranking)


def embed_tracks(
    checkpoint: ModelCheckpoint,
    records,
    base_dir: str | None = None,
    threads: int = 1,
) -> list[tuple[str, np.ndarray]]:
    """Embed manifest records in order; read-only, so threads are safe."""
    from .data import load_track_signal

    def one(record):
        return record.track_id, embed_signal(checkpoint, load_track_signal(record, base_dir))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, records))
    return [one(r) for r in records]


def retrieve_tracks(
    checkpoint: ModelCheckpoint,
    query_tag: str,
    track_embeddings: list[tuple[str, np.ndarray]],
    k: int,
    table: WordVectorTable,
    policy: ResolutionPolicy = STRICT_POLICY,
) -> list[tuple[str, float]]:
    """Rank tracks by cosine to the projected query tag; top-k, descending."""
    if not (1 <= k <= len(track_embeddings)):
        raise ValueError(f"k must be in [1, {len(track_embeddings)}], got {k}")
    res = resolve_tag(table, query_tag, policy)
    if res.status == "missing":
        raise ValueError(f"query tag {query_tag!r} does not resolve in the word table")
    query_point = project_tag(res.vector, checkpoint.projection_params())
    ids = [track_id for track_id, _ in track_embeddings]
    matrix = np.stack([emb for _, emb in track_embeddings])
    scores = matrix @ query_point
    order = _ranked_order(scores)[:k]
    return [(ids[i], float(scores[i])) for i in order]

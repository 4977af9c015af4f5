"""Corpus ingestion and the synthetic toy corpus.

Manifests are TAB-separated UTF-8 text, one track per line:

    track_id <TAB> audio_path <TAB> tag1,tag2 <TAB> [train|valid|test]

The toy corpus makes zero-shot transfer testable at desk scale: each class
is a harmonic tone with a class-specific fundamental, and two held-out
classes are interpolations of seen class pairs in BOTH modalities (audio
fundamental = midpoint frequency, word vector = normalized midpoint), so a
model that aligns the two spaces can label audio from classes it never saw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import PcmSignal, decode_wav
from .wordspace import WordVectorTable

SPLITS = ("train", "valid", "test")


class ManifestError(ValueError):
    """Raised for malformed manifest text."""


@dataclass(frozen=True)
class TrackRecord:
    track_id: str
    tags: tuple[str, ...]
    audio_path: str | None = None
    signal: PcmSignal | None = None
    split: str | None = None

    def __post_init__(self):
        if not self.track_id:
            raise ValueError("track_id must be nonempty")
        if not self.tags:
            raise ValueError(f"track {self.track_id!r}: tags must be nonempty")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"track {self.track_id!r}: unknown split {self.split!r}")
        if self.audio_path is None and self.signal is None:
            raise ValueError(f"track {self.track_id!r} has neither audio_path nor inline signal")


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)  # train, valid, test
    seed: int = 0
    stratify_by_tag: bool = False

    def __post_init__(self):
        if any(f < 0 for f in self.fractions):
            raise ValueError("split fractions must be nonnegative")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.fractions)}")


def load_manifest(source) -> list[TrackRecord]:
    """Parse manifest text (string or line iterable) into TrackRecords."""
    if isinstance(source, str):
        source = source.splitlines()
    records: list[TrackRecord] = []
    seen_ids: set[str] = set()
    for line_no, line in enumerate(source, start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ManifestError(f"line {line_no}: expected 3 or 4 TAB-separated fields, got {len(parts)}")
        track_id, audio_path, tag_field = parts[0], parts[1], parts[2]
        split = parts[3] if len(parts) == 4 and parts[3] else None
        if not track_id or not audio_path:
            raise ManifestError(f"line {line_no}: empty track_id or audio path")
        tags = tuple(dict.fromkeys(t for t in (s.strip() for s in tag_field.split(",")) if t))
        if not tags:
            raise ManifestError(f"line {line_no}: empty tag list")
        if track_id in seen_ids:
            raise ManifestError(f"line {line_no}: duplicate track_id {track_id!r}")
        seen_ids.add(track_id)
        try:
            records.append(TrackRecord(track_id=track_id, tags=tags, audio_path=audio_path, split=split))
        except ValueError as exc:
            raise ManifestError(f"line {line_no}: {exc}") from None
    return records


def serialize_manifest(records: list[TrackRecord]) -> str:
    lines = []
    for r in records:
        path = r.audio_path if r.audio_path is not None else ""
        fields = [r.track_id, path, ",".join(r.tags)]
        if r.split is not None:
            fields.append(r.split)
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def load_track_signal(record: TrackRecord, base_dir: str | None = None) -> PcmSignal:
    """Inline signal if present, otherwise decode the WAV at audio_path."""
    if record.signal is not None:
        return record.signal
    path = Path(record.audio_path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return decode_wav(path.read_bytes())


def make_splits(records: list[TrackRecord], spec: SplitSpec) -> list[TrackRecord]:
    """Assign train/valid/test splits, deterministically in the seed.

    Uses largest-remainder allocation (per tag group when stratifying) so
    fractions are honored within rounding; the three buckets partition the
    input. Records that already carry splits must bypass this operation.
    """
    if any(r.split is not None for r in records):
        raise ValueError("records already carry split fields; explicit splits bypass make_splits")
    n_buckets = sum(1 for f in spec.fractions if f > 0)
    if len(records) < n_buckets:
        raise ValueError(f"{len(records)} records cannot fill {n_buckets} nonempty split buckets")

    if spec.stratify_by_tag:
        groups: dict[tuple[str, ...], list[int]] = {}
        for i, r in enumerate(records):
            groups.setdefault(tuple(sorted(r.tags)), []).append(i)
        group_list = [groups[k] for k in sorted(groups)]
    else:
        group_list = [list(range(len(records)))]

    rng = np.random.default_rng(spec.seed)
    assignment: dict[int, str] = {}
    for members in group_list:
        order = [members[i] for i in rng.permutation(len(members))]
        n = len(order)
        counts = [int(np.floor(f * n)) for f in spec.fractions]
        remainders = [f * n - c for f, c in zip(spec.fractions, counts)]
        leftover = n - sum(counts)
        for bucket in sorted(range(3), key=lambda b: (-remainders[b], b))[:leftover]:
            counts[bucket] += 1
        bounds = np.cumsum([0] + counts)
        for bucket, name in enumerate(SPLITS):
            for idx in order[bounds[bucket]:bounds[bucket + 1]]:
                assignment[idx] = name
    return [
        TrackRecord(track_id=r.track_id, tags=r.tags, audio_path=r.audio_path,
                    signal=r.signal, split=assignment[i])
        for i, r in enumerate(records)
    ]


@dataclass(frozen=True)
class ToyCorpusConfig:
    """Synthetic corpus of harmonic tones with aligned word vectors.

    Seen class g sounds at fundamental base_freq + freq_step * g and gets a
    random unit word vector. The m-th unseen class interpolates the seen
    pair (2m, 2m+1): midpoint fundamental and normalized midpoint vector.
    """

    n_classes: int = 12
    tracks_per_class: int = 40
    seen_class_ids: tuple[int, ...] = tuple(range(10))
    unseen_class_ids: tuple[int, ...] = (10, 11)
    word_dim: int = 16
    base_freq: float = 200.0
    freq_step: float = 60.0
    harmonic_amps: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    noise_sigma: float = 0.01
    duration: float = 3.0
    freq_jitter: float = 0.03
    sample_rate: int = 22050
    peak_amplitude: float = 0.5
    seen_train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seen_class_ids", tuple(int(c) for c in self.seen_class_ids))
        object.__setattr__(self, "unseen_class_ids", tuple(int(c) for c in self.unseen_class_ids))
        object.__setattr__(self, "harmonic_amps", tuple(float(a) for a in self.harmonic_amps))
        seen, unseen = set(self.seen_class_ids), set(self.unseen_class_ids)
        if seen & unseen:
            raise ValueError("seen and unseen class ids overlap")
        if seen | unseen != set(range(self.n_classes)):
            raise ValueError("seen + unseen ids must cover exactly 0..n_classes-1")
        if 2 * len(self.unseen_class_ids) > len(self.seen_class_ids):
            raise ValueError("each unseen class needs its own pair of seen classes")
        if not (0.0 < self.seen_train_fraction < 1.0):
            raise ValueError("seen_train_fraction must be in (0, 1)")

    def class_tag(self, class_id: int) -> str:
        return f"class_{class_id}"


@dataclass(frozen=True)
class ToyCorpus:
    records: list[TrackRecord]
    word_table: WordVectorTable
    seen_tags: list[str]
    unseen_tags: list[str]
    fundamentals: dict[str, float]


def synth_toy_corpus(config: ToyCorpusConfig = ToyCorpusConfig()) -> ToyCorpus:
    """Deterministically synthesize the toy corpus (bitwise in the seed).

    Seen-class tracks are split seen_train_fraction/rest into train/test by
    track index; unseen-class tracks are all test, since unseen classes may
    never train.
    """
    root = np.random.SeedSequence(config.seed)
    word_seq, audio_seq = root.spawn(2)

    word_rng = np.random.default_rng(word_seq)
    seen_sorted = sorted(config.seen_class_ids)
    vectors: dict[int, np.ndarray] = {}
    for g in seen_sorted:
        v = word_rng.standard_normal(config.word_dim)
        vectors[g] = v / np.linalg.norm(v)
    fundamentals: dict[int, float] = {g: config.base_freq + config.freq_step * g for g in seen_sorted}
    for m, u in enumerate(sorted(config.unseen_class_ids)):
        a, b = seen_sorted[2 * m], seen_sorted[2 * m + 1]
        mid = vectors[a] + vectors[b]
        vectors[u] = mid / np.linalg.norm(mid)
        fundamentals[u] = (fundamentals[a] + fundamentals[b]) / 2.0

    audio_rng = np.random.default_rng(audio_seq)
    n_samples = int(round(config.duration * config.sample_rate))
    t = np.arange(n_samples, dtype=np.float64) / config.sample_rate
    amps = np.asarray(config.harmonic_amps)
    tone_scale = config.peak_amplitude / amps.sum()

    records: list[TrackRecord] = []
    n_train = int(round(config.seen_train_fraction * config.tracks_per_class))
    for g in range(config.n_classes):
        tag = config.class_tag(g)
        is_seen = g in config.seen_class_ids
        for i in range(config.tracks_per_class):
            f = fundamentals[g] * (1.0 + audio_rng.uniform(-config.freq_jitter, config.freq_jitter))
            phase = audio_rng.uniform(0.0, 2.0 * np.pi)
            tone = np.zeros(n_samples)
            for k, a_k in enumerate(amps, start=1):
                tone += a_k * np.sin(2.0 * np.pi * k * f * t + phase)
            samples = tone_scale * tone + audio_rng.normal(0.0, config.noise_sigma, n_samples)
            np.clip(samples, -1.0, 1.0, out=samples)
            split = ("train" if i < n_train else "test") if is_seen else "test"
            records.append(TrackRecord(
                track_id=f"toy_{g:02d}_{i:03d}",
                tags=(tag,),
                signal=PcmSignal(samples=samples, sample_rate=config.sample_rate),
                split=split,
            ))

    table = WordVectorTable(
        dimension=config.word_dim,
        entries={config.class_tag(g): vectors[g] for g in range(config.n_classes)},
    )
    return ToyCorpus(
        records=records,
        word_table=table,
        seen_tags=[config.class_tag(g) for g in sorted(config.seen_class_ids)],
        unseen_tags=[config.class_tag(g) for g in sorted(config.unseen_class_ids)],
        fundamentals={config.class_tag(g): fundamentals[g] for g in range(config.n_classes)},
    )

"""Joint training of the audio encoder and the tag projection.

Triplets (anchor patch, positive tag, K negative tags) are sampled uniformly
and scored with a sum-over-negatives max-margin hinge on cosine similarity:

    loss = sum_j max(0, margin - cos(a, p) + cos(a, n_j))

Both branches update in the same Adam step; the word-vector table itself is
frozen, only the projection trains. Checkpoints serialize to a documented
little-endian binary container (see save_checkpoint) and round-trip bitwise.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import data as corpus_data
from .dsp import DspConfig, PatchPolicy, build_mel_filterbank, extract_patches, mel_spectrogram, resample
from .encoder import EncoderConfig, backward_batch, forward_batch, init_encoder
from .layers import LayerSpec, ParameterStore, cosine_similarity_grad, layer_backward, layer_forward
from .wordspace import ProjectionParams, ResolutionPolicy, STRICT_POLICY, WordVectorTable, build_label_matrix, normalize_tag

CHECKPOINT_MAGIC = b"ZTAGCKPT"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or version-mismatched checkpoints."""


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.4
    negatives_per_anchor: int = 4
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 30
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float32"  # "float32" for speed, "float64" for verification

    def __post_init__(self):
        if not (0.0 < self.margin < 2.0):
            raise ValueError(f"margin must be in (0, 2) for cosine geometry, got {self.margin}")
        if self.negatives_per_anchor < 1:
            raise ValueError("need at least one negative per anchor")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class OptimizerState:
    """Adam first/second moments per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_store(cls, store: ParameterStore) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p) for name, p in store.params.items()},
            v={name: np.zeros_like(p) for name, p in store.params.items()},
        )


@dataclass(frozen=True)
class PreparedTrack:
    """A track ready for sampling: patch stack plus vocabulary tag indices."""

    track_id: str
    patches: np.ndarray  # (n_patches, patch_frames, n_mels)
    tag_ids: tuple[int, ...]


@dataclass(frozen=True)
class TripletBatch:
    anchors: np.ndarray  # (B, patch_frames, n_mels)
    positive_ids: np.ndarray  # (B,)
    negative_ids: np.ndarray  # (B, K)


@dataclass
class ModelCheckpoint:
    version: int
    encoder_config: EncoderConfig
    dsp_config: DspConfig
    patch_policy: PatchPolicy
    params: dict[str, np.ndarray]
    tag_vocab: list[str]
    metadata: dict

    @property
    def d(self) -> int:
        return self.encoder_config.embedding_dim

    def parameter_store(self) -> ParameterStore:
        store = ParameterStore()
        for name, value in self.params.items():
            store.add(name, value.copy())
        return store

    def projection_params(self) -> ProjectionParams:
        return ProjectionParams(weight=self.params["proj.weight"], bias=self.params["proj.bias"])


def projection_specs(word_dim: int, joint_dim: int) -> tuple[LayerSpec, LayerSpec]:
    dense = LayerSpec(kind="dense", name="proj", in_features=word_dim, out_features=joint_dim)
    norm = LayerSpec(kind="l2norm", name="proj.norm")
    return dense, norm


def init_joint_store(encoder_config: EncoderConfig, word_dim: int, seed: int) -> ParameterStore:
    """Encoder plus projection parameters from independent seeded streams."""
    root = np.random.SeedSequence(seed)
    enc_seq, proj_seq = root.spawn(2)
    store = init_encoder(encoder_config, enc_seq)
    rng = np.random.default_rng(proj_seq)
    d = encoder_config.embedding_dim
    bound = np.sqrt(6.0 / word_dim)
    store.add("proj.weight", rng.uniform(-bound, bound, size=(d, word_dim)))
    store.add("proj.bias", np.zeros(d))
    return store


def sample_triplets(
    tracks: list[PreparedTrack],
    n_tags: int,
    batch_size: int,
    negatives_per_anchor: int,
    rng: np.random.Generator,
) -> TripletBatch:
    """Uniform triplet sampling.

    Anchor tracks are uniform over the corpus, the positive uniform over the
    anchor's tags, negatives uniform without replacement over the vocabulary
    tags not attached to the anchor, and one patch is drawn uniformly per
    anchor. Draw order per anchor is fixed (anchor, positive, negatives,
    patch) so a seeded rng reproduces batches exactly.
    """
    if not tracks:
        raise ValueError("corpus empty: cannot sample triplets")
    if n_tags <= negatives_per_anchor:
        raise ValueError(f"vocabulary of {n_tags} tags cannot supply {negatives_per_anchor} negatives")
    anchors = []
    positives = np.empty(batch_size, dtype=np.int64)
    negatives = np.empty((batch_size, negatives_per_anchor), dtype=np.int64)
    track_idx = rng.integers(0, len(tracks), size=batch_size)
    for i, t in enumerate(track_idx):
        track = tracks[t]
        own = set(track.tag_ids)
        positives[i] = track.tag_ids[rng.integers(len(track.tag_ids))]
        candidates = np.array([tag for tag in range(n_tags) if tag not in own], dtype=np.int64)
        if candidates.size < negatives_per_anchor:
            raise ValueError(
                f"track {track.track_id!r} carries {len(own)} of {n_tags} vocabulary tags; "
                f"cannot draw {negatives_per_anchor} distinct negatives"
            )
        negatives[i] = rng.choice(candidates, size=negatives_per_anchor, replace=False)
        anchors.append(track.patches[rng.integers(track.patches.shape[0])])
    return TripletBatch(anchors=np.stack(anchors), positive_ids=positives, negative_ids=negatives)


def triplet_hinge_loss(
    anchor: np.ndarray,
    positive: np.ndarray,
    negatives: list[np.ndarray] | np.ndarray,
    margin: float,
):
    """Sum-over-negatives hinge on cosine similarity.

    Returns (loss, grad_anchor, grad_positive, [grad_negative_j]). The
    subgradient at the hinge kink is 0. Inputs must be unit norm within 1e-4.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negatives = [np.asarray(n, dtype=np.float64) for n in negatives]
    for name, vec in (("anchor", anchor), ("positive", positive), *(("negative", n) for n in negatives)):
        if abs(np.linalg.norm(vec) - 1.0) > 1e-4:
            raise ValueError(f"{name} is not unit norm (|v| = {np.linalg.norm(vec):.6f})")

    cos_p, gp_a, gp_p = cosine_similarity_grad(anchor, positive)
    loss = 0.0
    grad_a = np.zeros_like(anchor)
    grad_p = np.zeros_like(positive)
    grad_ns = [np.zeros_like(n) for n in negatives]
    for j, neg in enumerate(negatives):
        cos_n, gn_a, gn_n = cosine_similarity_grad(anchor, neg)
        hinge = margin - cos_p + cos_n
        if hinge > 0.0:
            loss += hinge
            grad_a += gn_a - gp_a
            grad_p -= gp_p
            grad_ns[j] = gn_n
    return loss, grad_a, grad_p, grad_ns


def adam_update(store: ParameterStore, state: OptimizerState, config: TrainConfig) -> None:
    """Bias-corrected Adam step over store.grads; increments the counter."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    scale1 = 1.0 / (1.0 - b1 ** state.step)
    scale2 = 1.0 / (1.0 - b2 ** state.step)
    for name, p in store.params.items():
        g = store.grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] * scale1
        v_hat = state.v[name] * scale2
        p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)


def train_step(
    store: ParameterStore,
    state: OptimizerState,
    batch: TripletBatch,
    base_vectors: np.ndarray,
    config: TrainConfig,
    encoder_config: EncoderConfig,
) -> float:
    """One joint update: forward both branches, mean hinge loss, Adam step."""
    dtype = store.params["proj.weight"].dtype
    emb, caches = forward_batch(store, encoder_config, batch.anchors.astype(dtype, copy=False), want_cache=True)

    used = np.unique(np.concatenate([batch.positive_ids, batch.negative_ids.ravel()]))
    row_of = {int(tag): i for i, tag in enumerate(used)}
    dense_spec, norm_spec = projection_specs(base_vectors.shape[1], encoder_config.embedding_dim)
    pre, dense_cache = layer_forward(dense_spec, store, base_vectors[used].astype(dtype, copy=False))
    tag_emb, norm_cache = layer_forward(norm_spec, None, pre)

    batch_size = emb.shape[0]
    total = 0.0
    grad_emb = np.zeros_like(emb)
    grad_tags = np.zeros_like(tag_emb)
    for i in range(batch_size):
        pos_row = row_of[int(batch.positive_ids[i])]
        neg_rows = [row_of[int(t)] for t in batch.negative_ids[i]]
        loss, ga, gp, gns = triplet_hinge_loss(
            emb[i], tag_emb[pos_row], [tag_emb[r] for r in neg_rows], config.margin
        )
        total += loss
        grad_emb[i] += ga
        grad_tags[pos_row] += gp
        for r, gn in zip(neg_rows, gns):
            grad_tags[r] += gn
    mean_loss = total / batch_size
    if not np.isfinite(mean_loss):
        raise NumericalError(_non_finite_diagnostic(store, "loss"))

    grad_emb /= batch_size
    grad_tags /= batch_size

    store.zero_grad()
    grad_pre, _ = layer_backward(norm_spec, norm_cache, grad_tags)
    _, proj_grads = layer_backward(dense_spec, dense_cache, grad_pre)
    store.accumulate(proj_grads)
    store.accumulate(backward_batch(caches, grad_emb))
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {name!r}")
    adam_update(store, state, config)
    return float(mean_loss)


def _non_finite_diagnostic(store: ParameterStore, what: str) -> str:
    for name, p in store.params.items():
        if not np.all(np.isfinite(p)):
            return f"non-finite {what}; first offending parameter block {name!r}"
    return f"non-finite {what}; all parameter blocks finite (bad input batch?)"


def prepare_tracks(
    records,
    vocab_tags: list[str],
    dsp_config: DspConfig,
    patch_policy: PatchPolicy,
    dtype: str = "float32",
    base_dir: str | None = None,
) -> list[PreparedTrack]:
    """DSP and tag-index the corpus once, ahead of the training loop."""
    tag_index = {normalize_tag(t): i for i, t in enumerate(vocab_tags)}
    filterbank = build_mel_filterbank(dsp_config)
    prepared = []
    for record in records:
        signal = corpus_data.load_track_signal(record, base_dir)
        signal = resample(signal, dsp_config.target_sample_rate)
        mel = mel_spectrogram(signal, dsp_config, filterbank)
        patches = extract_patches(mel, patch_policy.frames, patch_policy.stride)
        tag_ids = tuple(sorted(tag_index[normalize_tag(t)] for t in record.tags if normalize_tag(t) in tag_index))
        if not tag_ids:
            raise ValueError(f"track {record.track_id!r} has no tags resolvable in the vocabulary")
        prepared.append(PreparedTrack(
            track_id=record.track_id,
            patches=np.stack([p.values for p in patches]).astype(dtype),
            tag_ids=tag_ids,
        ))
    return prepared


def fit(
    records,
    tag_vocab: list[str],
    table: WordVectorTable,
    config: TrainConfig = TrainConfig(),
    encoder_config: EncoderConfig = EncoderConfig(),
    dsp_config: DspConfig = DspConfig(),
    patch_policy: PatchPolicy | None = None,
    policy: ResolutionPolicy = STRICT_POLICY,
    corpus_name: str = "",
    base_dir: str | None = None,
) -> tuple[ModelCheckpoint, list[float]]:
    """Train on a corpus; returns the checkpoint and per-epoch mean losses.

    Vocabulary tags that do not resolve in the word table are dropped before
    training (recorded in checkpoint metadata). Deterministic mode pins the
    BLAS thread pool and processes batches sequentially, making the whole
    trajectory bitwise-reproducible for a fixed seed.
    """
    kept, dropped = build_label_matrix(table, tag_vocab, policy)
    vocab = [tag for tag, _ in kept]
    if len(vocab) <= config.negatives_per_anchor:
        raise ValueError(
            f"resolvable vocabulary ({len(vocab)} tags) must exceed negatives_per_anchor={config.negatives_per_anchor}"
        )
    base_vectors = np.stack([vec for _, vec in kept])
    if patch_policy is None:
        patch_policy = PatchPolicy(frames=encoder_config.patch_frames)

    tracks = prepare_tracks(records, vocab, dsp_config, patch_policy, config.dtype, base_dir)
    store = init_joint_store(encoder_config, table.dimension, config.seed).astype(config.dtype)
    state = OptimizerState.for_store(store)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])

    history: list[float] = []
    steps_per_epoch = max(1, len(tracks) // config.batch_size)

    def run_epochs():
        for _ in range(config.epochs):
            epoch_losses = []
            for _ in range(steps_per_epoch):
                batch = sample_triplets(tracks, len(vocab), config.batch_size, config.negatives_per_anchor, rng)
                epoch_losses.append(train_step(store, state, batch, base_vectors, config, encoder_config))
            history.append(float(np.mean(epoch_losses)))

    if config.deterministic:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            run_epochs()
    else:
        run_epochs()

    metadata = {
        "seed": config.seed,
        "epochs_completed": config.epochs,
        "corpus_name": corpus_name,
        "n_train_tracks": len(tracks),
        "dropped_vocab_tags": dropped,
        "loss_history": history,
        "train_config": dataclasses.asdict(config),
    }
    checkpoint = ModelCheckpoint(
        version=CHECKPOINT_VERSION,
        encoder_config=encoder_config,
        dsp_config=dsp_config,
        patch_policy=patch_policy,
        params={name: p.copy() for name, p in store.params.items()},
        tag_vocab=vocab,
        metadata=metadata,
    )
    return checkpoint, history


# --- checkpoint container -------------------------------------------------
#
# Byte layout (all integers little-endian):
#   magic    8 bytes  b"ZTAGCKPT"
#   version  uint32
#   meta_len uint64, then meta_len bytes of UTF-8 JSON (configs, vocab,
#            training metadata)
#   count    uint32  number of arrays
#   manifest count records of:
#       name_len uint16, name bytes (UTF-8)
#       dtype    uint8 (0 = float64, 1 = float32)
#       ndim     uint8
#       dims     ndim x uint32
#   arrays   raw row-major little-endian data, in manifest order


def save_checkpoint(checkpoint: ModelCheckpoint, sink) -> None:
    """Write the binary container; round-trips bitwise via load_checkpoint."""
    close = False
    if isinstance(sink, (str, bytes)):
        sink = open(sink, "wb")
        close = True
    try:
        meta = {
            "encoder_config": dataclasses.asdict(checkpoint.encoder_config),
            "dsp_config": dataclasses.asdict(checkpoint.dsp_config),
            "patch_policy": dataclasses.asdict(checkpoint.patch_policy),
            "d": checkpoint.d,
            "tag_vocab": checkpoint.tag_vocab,
            "metadata": checkpoint.metadata,
        }
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        sink.write(CHECKPOINT_MAGIC)
        sink.write(struct.pack("<I", checkpoint.version))
        sink.write(struct.pack("<Q", len(meta_bytes)))
        sink.write(meta_bytes)
        sink.write(struct.pack("<I", len(checkpoint.params)))
        names = list(checkpoint.params)
        for name in names:
            arr = checkpoint.params[name]
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported array dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            sink.write(struct.pack("<H", len(encoded)))
            sink.write(encoded)
            sink.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            sink.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in names:
            arr = checkpoint.params[name]
            sink.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    finally:
        if close:
            sink.close()


def _read(source, size: int, what: str) -> bytes:
    chunk = source.read(size)
    if len(chunk) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return chunk


def load_checkpoint(source) -> ModelCheckpoint:
    """Read a checkpoint container; no partial result on corruption."""
    close = False
    if isinstance(source, str):
        source = open(source, "rb")
        close = True
    elif isinstance(source, bytes):
        source = io.BytesIO(source)
    try:
        magic = _read(source, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read(source, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unknown checkpoint version {version}; expected one of [{CHECKPOINT_VERSION}]")
        (meta_len,) = struct.unpack("<Q", _read(source, 8, "metadata length"))
        try:
            meta = json.loads(_read(source, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt metadata block: {exc}") from None
        (count,) = struct.unpack("<I", _read(source, 4, "array count"))
        manifest = []
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read(source, 2, f"manifest entry {i}"))
            name = _read(source, name_len, f"manifest entry {i} name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read(source, 2, f"manifest entry {i} header"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for array {name!r}")
            shape = struct.unpack(f"<{ndim}I", _read(source, 4 * ndim, f"manifest entry {i} shape"))
            manifest.append((name, _CODE_DTYPES[code], shape))
        params: dict[str, np.ndarray] = {}
        for name, dtype, shape in manifest:
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = _read(source, n_bytes, f"array {name!r}")
            params[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        try:
            encoder_config = EncoderConfig(**meta["encoder_config"])
            dsp_config = DspConfig(**meta["dsp_config"])
            patch_policy = PatchPolicy(**meta["patch_policy"])
            tag_vocab = list(meta["tag_vocab"])
            metadata = dict(meta["metadata"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
        return ModelCheckpoint(
            version=version,
            encoder_config=encoder_config,
            dsp_config=dsp_config,
            patch_policy=patch_policy,
            params=params,
            tag_vocab=tag_vocab,
            metadata=metadata,
        )
    finally:
        if close:
            source.close()


def checkpoint_digest(checkpoint: ModelCheckpoint) -> str:
    """Short stable identity for provenance in evaluation reports."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(checkpoint.params):
        arr = checkpoint.params[name]
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps(checkpoint.tag_vocab).encode())
    return h.hexdigest()[:12]

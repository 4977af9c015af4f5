"""Audio branch: mel-spectrogram patch -> unit-norm point in the joint space.

The encoder is a stack of (conv -> relu -> maxpool) blocks followed by
global average pooling, a dense layer to the joint dimension, and L2
normalization. A whole track is embedded as the renormalized mean of its
patch embeddings (mean pooling is order-invariant, so patch order never
matters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import MelSpectrogram, PatchPolicy, extract_patches
from .layers import LayerSpec, ParameterStore, layer_backward, layer_forward


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the audio branch.

    A patch enters as a single-channel [patch_frames, n_mels] image; each
    block halves (pool_size=2) the spatial extent.
    """

    patch_frames: int = 128
    n_mels: int = 128
    channels: tuple[int, ...] = (16, 32, 64, 64)
    kernel_size: int = 3
    pool_size: int = 2
    embedding_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ValueError("need at least one conv block")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        h, w = self.patch_frames, self.n_mels
        for _ in self.channels:
            h, w = h // self.pool_size, w // self.pool_size
        if h < 1 or w < 1:
            raise ValueError(
                f"input {self.patch_frames}x{self.n_mels} pools to zero extent after {len(self.channels)} blocks"
            )

    def layer_specs(self) -> list[LayerSpec]:
        specs: list[LayerSpec] = []
        in_ch = 1
        for i, out_ch in enumerate(self.channels):
            specs.append(LayerSpec(kind="conv2d", name=f"enc.block{i}.conv", in_channels=in_ch,
                                   out_channels=out_ch, kernel_size=self.kernel_size, stride=1))
            specs.append(LayerSpec(kind="relu", name=f"enc.block{i}.relu"))
            specs.append(LayerSpec(kind="maxpool2d", name=f"enc.block{i}.pool", pool_size=self.pool_size))
            in_ch = out_ch
        specs.append(LayerSpec(kind="global_avg_pool", name="enc.gap"))
        specs.append(LayerSpec(kind="dense", name="enc.head", in_features=self.channels[-1],
                               out_features=self.embedding_dim))
        specs.append(LayerSpec(kind="l2norm", name="enc.out"))
        return specs


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(config: EncoderConfig, seed: int | np.random.SeedSequence) -> ParameterStore:
    """He-uniform conv/dense weights (bound sqrt(6/fan_in)), zero biases.

    Deterministic in `seed`: same seed gives bitwise-identical stores.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for spec in config.layer_specs():
        if not spec.has_params:
            continue
        shapes = spec.param_shapes()
        for name, shape in shapes.items():
            if name.endswith(".bias"):
                store.add(name, np.zeros(shape))
            elif spec.kind == "conv2d":
                fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size
                store.add(name, he_uniform(rng, shape, fan_in))
            else:
                store.add(name, he_uniform(rng, shape, spec.in_features))
    return store


def forward_batch(store: ParameterStore, config: EncoderConfig, patches: np.ndarray,
                  want_cache: bool = False):
    """Embed a (B, patch_frames, n_mels) stack; returns (B, d) unit rows.

    With want_cache=True also returns the per-layer caches needed by
    backward_batch.
    """
    patches = np.asarray(patches)
    if patches.ndim != 3 or patches.shape[1:] != (config.patch_frames, config.n_mels):
        raise ValueError(
            f"patch stack shape {patches.shape} != (B, {config.patch_frames}, {config.n_mels})"
        )
    x = patches[:, None, :, :]
    caches = []
    for spec in config.layer_specs():
        x, cache = layer_forward(spec, store, x)
        if want_cache:
            caches.append((spec, cache))
    return (x, caches) if want_cache else x


def backward_batch(caches, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate (B, d) output gradients; returns parameter gradients."""
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(grad_out)
    for i, (spec, cache) in enumerate(reversed(caches)):
        is_first_layer = i == len(caches) - 1
        g, layer_grads = layer_backward(spec, cache, g, need_input_grad=not is_first_layer)
        for name, value in layer_grads.items():
            grads[name] = grads.get(name, 0.0) + value
    return grads


def encode_patch(store: ParameterStore, config: EncoderConfig, patch: MelSpectrogram | np.ndarray) -> np.ndarray:
    """Embed a single [patch_frames, n_mels] patch as a unit-norm vector."""
    values = patch.values if isinstance(patch, MelSpectrogram) else np.asarray(patch)
    return forward_batch(store, config, values[None])[0]


def mean_embedding(embeddings: np.ndarray) -> np.ndarray:
    """Renormalized mean of unit-norm rows; order-invariant up to rounding."""
    embeddings = np.atleast_2d(np.asarray(embeddings))
    mean = embeddings.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-9:
        raise ValueError("degenerate zero mean embedding (antipodal patches)")
    return mean / norm


def encode_track(store: ParameterStore, config: EncoderConfig, mel: MelSpectrogram,
                 policy: PatchPolicy | None = None) -> np.ndarray:
    """Embed a whole track: mean of per-patch embeddings, renormalized."""
    if policy is None:
        policy = PatchPolicy(frames=config.patch_frames)
    if policy.frames != config.patch_frames:
        raise ValueError(f"patch policy frames {policy.frames} != encoder input {config.patch_frames}")
    patches = extract_patches(mel, policy.frames, policy.stride)
    stack = np.stack([p.values for p in patches])
    return mean_embedding(forward_batch(store, config, stack))

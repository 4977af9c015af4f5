"""Finite-difference verification of every gradient path in the package.

Each layer kind is checked in isolation (treating the layer input as just
another parameter, so grad_input is verified too), and the full composite
(encoder -> joint space <- projection, scored by the triplet hinge) is
checked end to end on a small architecture. Used by the `gradcheck` CLI
subcommand and the acceptance suite.
"""

from __future__ import annotations

import numpy as np

from .encoder import EncoderConfig, backward_batch, forward_batch
from .layers import LayerSpec, ParameterStore, check_gradient, layer_backward, layer_forward
from .training import init_joint_store, projection_specs, triplet_hinge_loss

GRADCHECK_THRESHOLD = 1e-4
GRADCHECK_EPSILON = 1e-5


def _layer_check(spec: LayerSpec, x: np.ndarray, params: dict[str, np.ndarray],
                 rng: np.random.Generator, epsilon: float) -> float:
    store = ParameterStore()
    store.add("input", x)
    for name, value in params.items():
        store.add(name, value)

    probe = None

    def fn(s: ParameterStore):
        nonlocal probe
        y, cache = layer_forward(spec, s, s["input"])
        if probe is None:
            probe = rng.standard_normal(y.shape)
        value = float((y * probe).sum())
        gx, g_params = layer_backward(spec, cache, probe)
        grads = {"input": gx}
        grads.update(g_params)
        return value, grads

    return check_gradient(fn, store, epsilon)


def layer_gradient_checks(seed: int, epsilon: float = GRADCHECK_EPSILON) -> dict[str, float]:
    """Max relative FD error per layer kind, at random small shapes."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    conv = LayerSpec(kind="conv2d", name="c", in_channels=2, out_channels=3, kernel_size=3,
                     stride=int(rng.integers(1, 3)))
    results["conv2d"] = _layer_check(
        conv,
        rng.standard_normal((2, 2, 5, 6)),
        {"c.weight": rng.standard_normal((3, 2, 3, 3)) * 0.5, "c.bias": rng.standard_normal(3) * 0.1},
        rng, epsilon,
    )
    results["relu"] = _layer_check(
        LayerSpec(kind="relu"), rng.standard_normal((3, 7)) + 0.05, {}, rng, epsilon,
    )
    results["maxpool2d"] = _layer_check(
        LayerSpec(kind="maxpool2d", pool_size=2), rng.standard_normal((2, 2, 5, 6)), {}, rng, epsilon,
    )
    results["global_avg_pool"] = _layer_check(
        LayerSpec(kind="global_avg_pool"), rng.standard_normal((2, 3, 4, 5)), {}, rng, epsilon,
    )
    dense = LayerSpec(kind="dense", name="d", in_features=5, out_features=4)
    results["dense"] = _layer_check(
        dense,
        rng.standard_normal((3, 5)),
        {"d.weight": rng.standard_normal((4, 5)) * 0.5, "d.bias": rng.standard_normal(4) * 0.1},
        rng, epsilon,
    )
    x = rng.standard_normal((3, 6))
    x += np.sign(x.sum(axis=1, keepdims=True)) * 0.5  # keep rows away from zero norm
    results["l2norm"] = _layer_check(LayerSpec(kind="l2norm"), x, {}, rng, epsilon)
    return results


_SMALL_ENCODER = EncoderConfig(patch_frames=8, n_mels=8, channels=(2, 3), kernel_size=3,
                               pool_size=2, embedding_dim=4)
_WORD_DIM = 6


def composite_gradient_check(seed: int, epsilon: float = GRADCHECK_EPSILON,
                             margin: float = 1.0, n_negatives: int = 2) -> float:
    """FD check of the whole objective w.r.t. every trainable parameter.

    A large margin keeps all hinges active so gradients actually flow; the
    finite-difference step never crosses the hinge kink at these scales.
    """
    rng = np.random.default_rng(seed)
    store = init_joint_store(_SMALL_ENCODER, _WORD_DIM, seed)
    patch = rng.standard_normal((1, _SMALL_ENCODER.patch_frames, _SMALL_ENCODER.n_mels))
    word_vectors = rng.standard_normal((1 + n_negatives, _WORD_DIM))
    dense_spec, norm_spec = projection_specs(_WORD_DIM, _SMALL_ENCODER.embedding_dim)

    def fn(s: ParameterStore):
        emb, caches = forward_batch(s, _SMALL_ENCODER, patch, want_cache=True)
        pre, dense_cache = layer_forward(dense_spec, s, word_vectors)
        points, norm_cache = layer_forward(norm_spec, None, pre)
        loss, g_anchor, g_pos, g_negs = triplet_hinge_loss(
            emb[0], points[0], [points[1 + j] for j in range(n_negatives)], margin
        )
        grad_points = np.zeros_like(points)
        grad_points[0] = g_pos
        for j, g in enumerate(g_negs):
            grad_points[1 + j] = g
        grad_pre, _ = layer_backward(norm_spec, norm_cache, grad_points)
        _, proj_grads = layer_backward(dense_spec, dense_cache, grad_pre)
        grads = dict(proj_grads)
        grads.update(backward_batch(caches, g_anchor[None]))
        return loss, grads

    return check_gradient(fn, store, epsilon)


def run_gradient_suite(n_seeds: int = 20, base_seed: int = 0,
                       epsilon: float = GRADCHECK_EPSILON) -> tuple[float, dict[str, float]]:
    """Run every check over n_seeds seeds; returns (max error, per-check max)."""
    worst: dict[str, float] = {}
    for i in range(n_seeds):
        seed = base_seed + i
        for kind, err in layer_gradient_checks(seed, epsilon).items():
            worst[kind] = max(worst.get(kind, 0.0), err)
        err = composite_gradient_check(seed, epsilon)
        worst["composite"] = max(worst.get("composite", 0.0), err)
    return max(worst.values()), worst

"""Knowledge-consistent attention.

Per-query score distributions are cosine similarities, box-smoothed over the
query neighborhood, softmaxed over all key locations, then blended with the
previous recurrence's final scores through a learnable sigmoid gate wherever
the query was already valid last recurrence. Scores rebuild the feature map as
a weighted sum over keys, and a 1x1 fusion convolution mixes the rebuilt map
back with the input.

Score tensors live as (n, h*w, h, w): axis 1 indexes flattened key locations,
the trailing axes are query coordinates, and every (query) slice along axis 1
is a probability distribution. Memory is O((h*w)^2), so this runs at the
encoder bottleneck resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import ContractError, ParamStore, Tensor
from .layers import Conv2dLayer

NORM_FLOOR = 1e-8


@dataclass
class KcaConfig:
    """window: odd side of the query-neighborhood smoothing box."""

    window: int = 3


class AttentionState:
    """Scores and validity carried from the previous recurrence."""

    def __init__(self, prev_score, prev_valid, recurrence_index):
        self.prev_score = prev_score
        self.prev_valid = prev_valid
        self.recurrence_index = recurrence_index


def cosine_scores(feats: Tensor) -> Tensor:
    """Pairwise cosine similarity of channel vectors; (n, h*w, h, w) layout."""
    feats = ops.as_tensor(feats)
    n, c, h, w = feats.data.shape
    sq = ops.reduce_sum(ops.mul(feats, feats), axis=1, keepdims=True)
    norm = ops.clamp_min(ops.sqrt(sq), NORM_FLOOR)
    unit = ops.div(feats, norm)
    flat = ops.reshape(unit, (n, c, h * w))
    sim = ops.matmul(ops.swap_last2(flat), flat)
    return ops.reshape(sim, (n, h * w, h, w))


def smooth_and_softmax(sim: Tensor, window: int) -> Tensor:
    """Average each query's similarities over its in-bounds neighborhood, then
    softmax over key locations."""
    if window % 2 != 1:
        raise ContractError(f"smoothing window must be odd, got {window}")
    n, hw, h, w = sim.data.shape
    if window > 1:
        flat = ops.reshape(sim, (n * hw, 1, h, w))
        kernel = ops.as_tensor(np.ones((1, 1, window, window), dtype=sim.data.dtype))
        sums = ops.conv2d(flat, kernel, None, stride=1, padding=window // 2)
        counts = ops.window_valid_count(
            np.ones((1, 1, h, w), dtype=sim.data.dtype), window, 1, window // 2
        )
        smoothed = ops.mul(sums, (1.0 / counts))
        sim = ops.reshape(smoothed, (n, hw, h, w))
    return ops.softmax(sim, axis=1)


def blend_scores(score_prime: Tensor, state, lambda_raw: Tensor) -> Tensor:
    """Gated convex blend with the previous recurrence's scores.

    Queries valid last recurrence get sigmoid(lambda)*current +
    (1-sigmoid(lambda))*previous; fresh queries and recurrence 0 keep the
    current scores unchanged.
    """
    if state is None or state.recurrence_index == 0:
        return score_prime
    if state.prev_score is None:
        raise ContractError(
            f"attention state at recurrence {state.recurrence_index} is missing previous scores"
        )
    prev = state.prev_score
    if prev.data.shape != score_prime.data.shape:
        raise ContractError(
            f"previous score shape {prev.data.shape} does not match current {score_prime.data.shape}"
        )
    gate = ops.sigmoid(lambda_raw)
    keep = ops.sub(1.0, gate)
    delta = ops.mul(ops.sub(prev, score_prime), keep)
    gated = ops.mul(delta, state.prev_valid)
    return ops.add(score_prime, gated)


def reconstruct(feats: Tensor, score: Tensor) -> Tensor:
    """Weighted sum over key locations: rebuilt[q] = sum_k score[k, q] * feats[k]."""
    n, c, h, w = feats.data.shape
    hw = h * w
    flat = ops.reshape(feats, (n, c, hw))
    score2 = ops.reshape(score, (n, hw, hw))
    rebuilt = ops.matmul(flat, score2)
    return ops.reshape(rebuilt, (n, c, h, w))


def reconstruct_and_fuse(feats: Tensor, score: Tensor, fusion: Conv2dLayer) -> Tensor:
    rebuilt = reconstruct(feats, score)
    return fusion(ops.concat([rebuilt, feats], axis=1))


class KcaLayer:
    """Attention layer owning the gate parameter and the 1x1 fusion convolution."""

    def __init__(self, store: ParamStore, name, channels, rng, window=3):
        self.name = name
        self.window = window
        self.lambda_raw = store.add_param(f"{name}.lambda_raw", np.zeros(()))
        self.fusion = Conv2dLayer(store, f"{name}.fusion", 2 * channels, channels, 1, 1, 0, rng)

    def forward(self, feats: Tensor, state, valid: np.ndarray):
        """One attention pass. valid is this recurrence's mask at attention
        resolution; it rides along in the returned state as the validity test
        for the next recurrence's blending."""
        sim = cosine_scores(feats)
        score_prime = smooth_and_softmax(sim, self.window)
        score = blend_scores(score_prime, state, self.lambda_raw)
        out = reconstruct_and_fuse(feats, score, self.fusion)
        next_index = state.recurrence_index + 1 if state is not None else 1
        return out, AttentionState(score, valid, next_index)

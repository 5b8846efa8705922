"""Temporal feature encoding: frame self-attention plus hierarchical blending.

``encode_frames`` runs single-head scaled dot-product attention across the
frames of a sequence and adds the result back onto the input through a
trainable residual scale. ``integrate`` reduces a run of frame features to a
single vector by repeatedly blending consecutive groups of three (tail
groups of two or one) with softmax weights from a per-level scoring network,
then maps the survivor to the context dimension. ``encode_sequence``
produces one context vector per frame from a sliding window centred on it.

Initialization is identity-plus-uniform-blend: value projection = identity,
query/key = zero, residual scale = 0, scorer readouts = zero (uniform
weights), and an identity-tiled final map, so the untrained encoder passes
window-averaged frame features straight through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WINDOW = 9          # frames integrated per context vector
SCORE_HIDDEN = 32

# Fixed multipliers on zero-initialized readouts (blend scorers, attention
# residual): reparametrizations that let the blend weights and the attention
# branch move at a useful scale under the single global learning rate.
SCORE_GAIN = 32.0
ATTN_GAIN = 64.0


@dataclass
class LevelScorer:
    w1: Tensor   # (hidden, F)
    b1: Tensor   # (hidden,)
    w2: Tensor   # (1, hidden)
    b2: Tensor   # (1,)


@dataclass
class EncoderParams:
    feature_dim: int
    context_dim: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    res_scale: Tensor                 # scalar residual weight on the attention branch
    scorers: list[LevelScorer] = field(default_factory=list)
    wc: Tensor = None                 # (C, F) final map
    bc: Tensor = None                 # (C,)

    def named_tensors(self, prefix: str = "encoder/") -> dict[str, Tensor]:
        out = {
            f"{prefix}wq": self.wq, f"{prefix}wk": self.wk, f"{prefix}wv": self.wv,
            f"{prefix}res_scale": self.res_scale,
            f"{prefix}wc": self.wc, f"{prefix}bc": self.bc,
        }
        for i, sc in enumerate(self.scorers):
            out.update({
                f"{prefix}score{i}/w1": sc.w1, f"{prefix}score{i}/b1": sc.b1,
                f"{prefix}score{i}/w2": sc.w2, f"{prefix}score{i}/b2": sc.b2,
            })
        return out

    def load_arrays(self, arrays: dict, prefix: str = "encoder/") -> None:
        for name, tensor in self.named_tensors(prefix).items():
            arr = arrays[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(f"checkpoint entry {name} has shape {arr.shape}, "
                                 f"expected {tensor.data.shape}")
            tensor.data = np.array(arr, dtype=np.float64)


def _levels_for(frames: int) -> int:
    levels = 0
    while frames > 1:
        frames = math.ceil(frames / 3)
        levels += 1
    return max(levels, 1)


def init_encoder(feature_dim: int, context_dim: int, max_frames: int = 81,
                 rng: np.random.Generator | None = None) -> EncoderParams:
    rng = rng or np.random.default_rng(0)
    scorers = []
    for _ in range(_levels_for(max_frames)):
        scorers.append(LevelScorer(
            w1=ad.param(rng.normal(0.0, 1.0 / math.sqrt(feature_dim), size=(SCORE_HIDDEN, feature_dim))),
            b1=ad.param(np.zeros(SCORE_HIDDEN)),
            w2=ad.param(np.zeros((1, SCORE_HIDDEN))),
            b2=ad.param(np.zeros(1)),
        ))
    wc = np.zeros((context_dim, feature_dim))
    for i in range(context_dim):
        wc[i, i % feature_dim] = 1.0
    return EncoderParams(
        feature_dim=feature_dim,
        context_dim=context_dim,
        wq=ad.param(np.zeros((feature_dim, feature_dim))),
        wk=ad.param(np.zeros((feature_dim, feature_dim))),
        wv=ad.param(np.eye(feature_dim)),
        res_scale=ad.param(np.zeros(())),
        scorers=scorers,
        wc=ad.param(wc),
        bc=ad.param(np.zeros(context_dim)),
    )


def encode_frames(features, params: EncoderParams) -> Tensor:
    """Self-attention over frames: (B, T, F) -> (B, T, F) with residual."""
    feats = ad.constant(features)
    if feats.ndim != 3 or feats.shape[2] != params.feature_dim:
        raise ValueError(f"encode_frames: features shape {feats.shape}, expected (B, T, {params.feature_dim})")
    if feats.shape[1] == 0:
        raise ValueError("encode_frames: empty sequence")
    q = ad.matmul(feats, ad.transpose(params.wq))
    k = ad.matmul(feats, ad.transpose(params.wk))
    v = ad.matmul(feats, ad.transpose(params.wv))
    logits = ad.matmul(q, ad.swap_last_axes(k)) * (1.0 / math.sqrt(params.feature_dim))
    attn = ad.softmax(logits, axis=-1)                      # rows sum to 1 over frames
    branch = ad.matmul(attn, v)
    scale = ad.expand(ad.reshape(params.res_scale * ATTN_GAIN, (1, 1, 1)), branch.shape)
    return feats + scale * branch


def attention_rows(features, params: EncoderParams) -> np.ndarray:
    """The frame-attention matrix (B, T, T), for inspection and tests."""
    feats = ad.constant(features)
    with ad.no_grad():
        q = ad.matmul(feats, ad.transpose(params.wq))
        k = ad.matmul(feats, ad.transpose(params.wk))
        logits = ad.matmul(q, ad.swap_last_axes(k)) * (1.0 / math.sqrt(params.feature_dim))
        return ad.softmax(logits, axis=-1).data


def _score(scorer: LevelScorer, feats: Tensor) -> Tensor:
    h = ad.tanh(ad.matmul(feats, ad.transpose(scorer.w1)) + scorer.b1)
    return ad.matmul(h, ad.transpose(scorer.w2)) * SCORE_GAIN + scorer.b2     # (B, n, 1)


def _blend_level(feats: Tensor, scorer: LevelScorer) -> Tensor:
    """One reduction level: (B, n, F) -> (B, ceil(n/3), F) convex blends."""
    b, n, f = feats.shape
    scores = ad.reshape(_score(scorer, feats), (b, n))
    full, tail = divmod(n, 3)
    chunks = []
    if full:
        head = ad.reshape(feats[:, :3 * full], (b, full, 3, f))
        w = ad.softmax(ad.reshape(scores[:, :3 * full], (b, full, 3)), axis=-1)
        w4 = ad.expand(ad.reshape(w, (b, full, 3, 1)), (b, full, 3, f))
        chunks.append(ad.tsum(w4 * head, axis=2))
    if tail:
        tf = feats[:, 3 * full:]
        w = ad.softmax(scores[:, 3 * full:], axis=-1)
        w3 = ad.expand(ad.reshape(w, (b, tail, 1)), (b, tail, f))
        chunks.append(ad.tsum(w3 * tf, axis=1, keepdims=True))
    return chunks[0] if len(chunks) == 1 else ad.concatenate(chunks, axis=1)


def integrate(features, params: EncoderParams) -> Tensor:
    """Reduce (B, n, F) frame features to one context vector per batch row.

    Returns (B, C). The pre-map survivor is a convex combination of the
    inputs: every level's weights are softmax outputs.
    """
    feats = ad.constant(features)
    if feats.ndim != 3:
        raise ValueError(f"integrate: features must be (B, n, F), got {feats.shape}")
    if feats.shape[1] == 0:
        raise ValueError("integrate: empty feature group")
    level = 0
    while feats.shape[1] > 1:
        if level >= len(params.scorers):
            raise ValueError(f"integrate: {features.shape[1]} frames need more than "
                             f"{len(params.scorers)} allocated levels")
        feats = _blend_level(feats, params.scorers[level])
        level += 1
    survivor = ad.reshape(feats, (feats.shape[0], params.feature_dim))
    return ad.matmul(survivor, ad.transpose(params.wc)) + params.bc


def window_starts(frames: int, window: int = WINDOW) -> list[int]:
    """Clamped start index of the integration window for each target frame."""
    win = min(frames, window)
    return [min(max(t - win // 2, 0), frames - win) for t in range(frames)]


def encode_sequence(features, params: EncoderParams, window: int = WINDOW) -> Tensor:
    """Per-frame context vectors: (B, T, F) -> (B, T, C).

    Each frame's context integrates a window of min(T, ``window``) attended
    frames centred on it (clamped at the boundaries), so nearby frames at a
    boundary share a context.
    """
    feats = encode_frames(features, params)
    b, t, _ = feats.shape
    win = min(t, window)
    starts = window_starts(t, window)
    cache: dict[int, Tensor] = {}
    per_frame = []
    for s in starts:
        if s not in cache:
            cache[s] = integrate(feats[:, s:s + win], params)
        per_frame.append(ad.reshape(cache[s], (b, 1, params.context_dim)))
    return ad.concatenate(per_frame, axis=1)

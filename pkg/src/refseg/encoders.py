"""Toy visual and text encoders plus the joint visual-text projection.

The visual encoder honours the backbone contract used downstream (three
per-frame feature levels at strides 4/8/16 with a 1:2:4 channel ratio) with a
minimal patch-embed + merge architecture: no attention, no temporal mixing.
The text encoder maps each token to a frozen pseudo-random unit vector keyed
by a stable 64-bit hash of the token, so it is deterministic across runs and
has no trainable state. The learned projections to the shared width C happen
in ``fuse_project``.
"""

from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tz
from .params import xavier_uniform, zeros_param, ones_param
from .tensor import ShapeError, Tensor

PATCH = 4  # stride of the first embedding; two 2x2 merges give strides 8 and 16

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass
class VisualPyramid:
    """Per-frame token pyramids: f4 (stride 4), f8 (stride 8), f16 (stride 16)."""

    f4: Tensor
    f8: Tensor
    f16: Tensor
    frame_hw: tuple[int, int]

    def grid(self, stride: int) -> tuple[int, int]:
        h, w = self.frame_hw
        return h // stride, w // stride


@dataclass
class EncoderStage:
    ln_gain: Tensor
    ln_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    merge_w: Tensor


@dataclass
class VideoEncoderParams:
    patch_embed: Tensor  # (PATCH*PATCH*3, c1), bias-free
    stages: list


@dataclass
class FuseParams:
    visual_proj: Tensor  # (c3, c), bias-free
    text_proj: Tensor  # (c_text, c), bias-free


def init_video_encoder(rng: np.random.Generator, c1: int) -> VideoEncoderParams:
    stages = []
    for c in (c1, 2 * c1):
        stages.append(EncoderStage(
            ln_gain=ones_param((c,)),
            ln_bias=zeros_param((c,)),
            mlp_w1=xavier_uniform(rng, (c, 2 * c)),
            mlp_b1=zeros_param((2 * c,)),
            mlp_w2=xavier_uniform(rng, (2 * c, c)),
            mlp_b2=zeros_param((c,)),
            merge_w=xavier_uniform(rng, (4 * c, 2 * c)),
        ))
    return VideoEncoderParams(
        patch_embed=xavier_uniform(rng, (PATCH * PATCH * 3, c1)),
        stages=stages,
    )


def init_fuse(rng: np.random.Generator, c3: int, c_text: int, c: int) -> FuseParams:
    return FuseParams(
        visual_proj=xavier_uniform(rng, (c3, c)),
        text_proj=xavier_uniform(rng, (c_text, c)),
    )


def _space_to_patches(x: Tensor, t: int, h: int, w: int, p: int, c: int) -> Tensor:
    """(T, h, w, c) tokens -> (T, h/p * w/p, p*p*c) patch rows, row-major."""
    x = tz.reshape(x, (t, h // p, p, w // p, p, c))
    x = tz.transpose(x, (0, 1, 3, 2, 4, 5))
    return tz.reshape(x, (t, (h // p) * (w // p), p * p * c))


def encode_video(clip: Tensor, params: VideoEncoderParams) -> VisualPyramid:
    """Build the stride-4/8/16 pyramid for a clip of shape (T, H, W, 3).

    Frames are processed independently; H and W must be divisible by 16.
    """
    if clip.ndim != 4 or clip.shape[-1] != 3:
        raise ShapeError(f"clip must be (T, H, W, 3), got {clip.shape}")
    t, h, w, _ = clip.shape
    if h % 16 or w % 16:
        raise ShapeError(f"frame size {h}x{w} not divisible by 16")

    tokens = tz.matmul(_space_to_patches(clip, t, h, w, PATCH, 3), params.patch_embed)
    f4 = tokens
    gh, gw = h // PATCH, w // PATCH
    levels = [f4]
    for stage in params.stages:
        x = tz.layer_norm(tokens, stage.ln_gain, stage.ln_bias)
        x = tz.relu(tz.matmul(x, stage.mlp_w1) + stage.mlp_b1)
        x = tz.matmul(x, stage.mlp_w2) + stage.mlp_b2
        x = tz.reshape(x, (t, gh, gw, x.shape[-1]))
        x = _space_to_patches(x, t, gh, gw, 2, x.shape[-1])
        tokens = tz.matmul(x, stage.merge_w)
        gh, gw = gh // 2, gw // 2
        levels.append(tokens)
    return VisualPyramid(f4=levels[0], f8=levels[1], f16=levels[2], frame_hw=(h, w))


def tokenize(query: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace. Bit-exact contract."""
    return query.lower().translate(_PUNCT_TABLE).split()


@lru_cache(maxsize=4096)
def _token_vector(token: str, width: int) -> bytes:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")
    g = np.random.Generator(np.random.PCG64(seed))
    v = g.normal(size=width)
    v /= np.linalg.norm(v)
    return v.tobytes()


def encode_text(tokens: list[str], width: int, max_tokens: int = 32) -> Tensor:
    """Frozen per-token embedding: (S, width) with unit-norm rows.

    Rows are a pure function of the token string, so repeated tokens produce
    bit-identical rows and no gradient ever reaches this encoder.
    """
    if len(tokens) < 1:
        raise ShapeError("empty query: need at least one token")
    if len(tokens) > max_tokens:
        raise ShapeError(f"query has {len(tokens)} tokens, max is {max_tokens}")
    rows = np.stack([
        np.frombuffer(_token_vector(tok, width), dtype=np.float64) for tok in tokens])
    return Tensor(rows)


def fuse_project(pyr: VisualPyramid, text: Tensor, params: FuseParams) -> Tensor:
    """Project f16 and the text feature to width C and concatenate per frame.

    Output rows are ordered visual block first, then the text block; the text
    rows are replicated across the T frames.
    """
    v = tz.matmul(pyr.f16, params.visual_proj)
    y = tz.matmul(text, params.text_proj)
    y_rep = tz.tile_leading(y, v.shape[0])
    return tz.concat([v, y_rep], axis=1)

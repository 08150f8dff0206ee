"""Cross-modal alignment: transformer encoders over the joint visual-text
feature, transformer decoders over candidate object queries, kernel heads and
the referring-score head.

All attention here is standard multi-head scaled dot product, applied
per frame (the time axis is treated as a batch axis, so no information ever
crosses frames). Layer normalisation follows the post-norm convention:
``x = LN(x + dropout(sublayer(x)))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .params import xavier_uniform, zeros_param, ones_param
from .tensor import ShapeError, Tensor


# -- 2D sine positional encoding ----------------------------------------------


def sine_pos_2d(h: int, w: int, c: int) -> Tensor:
    """Fixed 2D sine/cosine positional encoding, flattened row-major to (h*w, c).

    The first c/2 channels encode the row index, the last c/2 the column
    index; within each half, sine/cosine pairs run at geometric frequencies.
    Parameter-free and deterministic.
    """
    if c % 4 != 0:
        raise ShapeError(f"positional width {c} must be divisible by 4")
    half = c // 2
    freqs = 1.0 / (10000.0 ** (2 * (np.arange(half // 2)) / half))

    def axis_code(n):
        ang = np.arange(n)[:, None] * freqs[None, :]
        code = np.empty((n, half))
        code[:, 0::2] = np.sin(ang)
        code[:, 1::2] = np.cos(ang)
        return code

    rows = axis_code(h)  # (h, half)
    cols = axis_code(w)  # (w, half)
    out = np.empty((h, w, c))
    out[:, :, :half] = rows[:, None, :]
    out[:, :, half:] = cols[None, :, :]
    return Tensor(out.reshape(h * w, c))


# -- parameter containers -------------------------------------------------------


@dataclass
class AttentionParams:
    # no key bias: a constant added to every key shifts all logits of a row
    # equally, which softmax cancels, so such a parameter could never train
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LnParams:
    gain: Tensor
    bias: Tensor


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1: LnParams
    ffn: FfnParams
    ln2: LnParams


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    ln1: LnParams
    cross_attn: AttentionParams
    ln2: LnParams
    ffn: FfnParams
    ln3: LnParams


@dataclass
class MlpHeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class AlignmentParams:
    encoder_layers: list
    decoder_layers: list
    query_embed: Tensor  # (K, C)
    kernel_heads: list  # three MlpHeadParams, one per decoder level
    ref_w: Tensor  # (C, 1)
    ref_b: Tensor  # (1,)
    heads: int


def _init_attention(rng, c: int) -> AttentionParams:
    return AttentionParams(
        wq=xavier_uniform(rng, (c, c)), bq=zeros_param((c,)),
        wk=xavier_uniform(rng, (c, c)),
        wv=xavier_uniform(rng, (c, c)), bv=zeros_param((c,)),
        wo=xavier_uniform(rng, (c, c)), bo=zeros_param((c,)),
    )


def _init_ffn(rng, c: int, hidden: int) -> FfnParams:
    return FfnParams(
        w1=xavier_uniform(rng, (c, hidden)), b1=zeros_param((hidden,)),
        w2=xavier_uniform(rng, (hidden, c)), b2=zeros_param((c,)),
    )


def _init_ln(c: int) -> LnParams:
    return LnParams(gain=ones_param((c,)), bias=zeros_param((c,)))


def init_alignment(rng: np.random.Generator, c: int, k: int, c0: int,
                   heads: int = 8, n_layers: int = 3) -> AlignmentParams:
    if c % heads != 0:
        raise ShapeError(f"width {c} not divisible by {heads} heads")
    hidden = 4 * c
    enc = [EncoderLayerParams(_init_attention(rng, c), _init_ln(c),
                              _init_ffn(rng, c, hidden), _init_ln(c))
           for _ in range(n_layers)]
    dec = [DecoderLayerParams(_init_attention(rng, c), _init_ln(c),
                              _init_attention(rng, c), _init_ln(c),
                              _init_ffn(rng, c, hidden), _init_ln(c))
           for _ in range(n_layers)]
    kernel_heads = [MlpHeadParams(
        w1=xavier_uniform(rng, (c, c)), b1=zeros_param((c,)),
        w2=xavier_uniform(rng, (c, c0)), b2=zeros_param((c0,)),
    ) for _ in range(n_layers)]
    return AlignmentParams(
        encoder_layers=enc,
        decoder_layers=dec,
        query_embed=Tensor(rng.normal(size=(k, c)), requires_grad=True),
        kernel_heads=kernel_heads,
        ref_w=xavier_uniform(rng, (c, 1)),
        ref_b=zeros_param((1,)),
        heads=heads,
    )


# -- attention and layers ---------------------------------------------------------


@dataclass
class Dropout:
    """Inverted dropout; draws masks from ``rng`` only when ``p > 0``."""

    p: float = 0.0
    rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.p <= 0.0 or self.rng is None:
            return x
        keep = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return tz.mul(x, Tensor(keep))


def multi_head_attention(params: AttentionParams, query: Tensor, memory: Tensor,
                         heads: int, return_probs: bool = False):
    """Batched multi-head attention: (..., Lq, C) x (..., Lk, C) -> (..., Lq, C)."""
    c = query.shape[-1]
    if c % heads != 0:
        raise ShapeError(f"width {c} not divisible by {heads} heads")
    d = c // heads
    q = tz.matmul(query, params.wq) + params.bq
    k = tz.matmul(memory, params.wk)
    v = tz.matmul(memory, params.wv) + params.bv

    def split(x, length):
        x = tz.reshape(x, x.shape[:-1] + (heads, d))
        perm = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
        return tz.transpose(x, perm)  # (..., heads, L, d)

    qh = split(q, query.shape[-2])
    kh = split(k, memory.shape[-2])
    vh = split(v, memory.shape[-2])
    logits = tz.mul(tz.matmul(qh, tz.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))),
                    1.0 / math.sqrt(d))
    probs = tz.softmax_last(logits)
    ctx = tz.matmul(probs, vh)  # (..., heads, Lq, d)
    perm = tuple(range(ctx.ndim - 3)) + (ctx.ndim - 2, ctx.ndim - 3, ctx.ndim - 1)
    ctx = tz.transpose(ctx, perm)
    ctx = tz.reshape(ctx, ctx.shape[:-2] + (c,))
    out = tz.matmul(ctx, params.wo) + params.bo
    if return_probs:
        return out, probs
    return out


def _ffn(params: FfnParams, x: Tensor) -> Tensor:
    return tz.matmul(tz.relu(tz.matmul(x, params.w1) + params.b1), params.w2) + params.b2


def _post_norm(ln: LnParams, residual: Tensor, sublayer_out: Tensor, drop: Dropout) -> Tensor:
    return tz.layer_norm(residual + drop(sublayer_out), ln.gain, ln.bias)


def encode_alignment(x: Tensor, pos: Tensor, params: AlignmentParams,
                     n_visual: int, drop: Dropout | None = None) -> Tensor:
    """Run the encoder stack over the joint feature (T, n_visual + S, C).

    The fixed sine positional encoding is added to the visual rows only,
    once, before the first layer. Text rows carry no positional signal.
    """
    drop = drop or Dropout()
    t, n, c = x.shape
    pad = np.zeros((n, c))
    pad[:n_visual] = pos.data
    x = x + Tensor(pad)
    for layer in params.encoder_layers:
        attn = multi_head_attention(layer.attn, x, x, params.heads)
        x = _post_norm(layer.ln1, x, attn, drop)
        x = _post_norm(layer.ln2, x, _ffn(layer.ffn, x), drop)
    return x


def decode_queries(params: AlignmentParams, aligned: Tensor,
                   drop: Dropout | None = None) -> Tensor:
    """Run candidate queries through the decoder stack.

    Queries are shared across frames (replicated along T) and attend over the
    full aligned feature of their own frame. Returns the stacked hidden
    feature (3, T, K, C), coarse to fine.
    """
    drop = drop or Dropout()
    t = aligned.shape[0]
    o = tz.tile_leading(params.query_embed, t)  # (T, K, C)
    levels = []
    for layer in params.decoder_layers:
        sa = multi_head_attention(layer.self_attn, o, o, params.heads)
        o = _post_norm(layer.ln1, o, sa, drop)
        ca = multi_head_attention(layer.cross_attn, o, aligned, params.heads)
        o = _post_norm(layer.ln2, o, ca, drop)
        o = _post_norm(layer.ln3, o, _ffn(layer.ffn, o), drop)
        levels.append(o)
    return tz.stack(levels, axis=0)


def kernel_heads(hidden: Tensor, params: AlignmentParams) -> tuple[Tensor, Tensor, Tensor]:
    """Map each hidden level through its own two-layer ReLU head to (T, K, C0)."""
    outs = []
    for j, head in enumerate(params.kernel_heads):
        h = tz.take(hidden, j, axis=0)
        z = tz.matmul(tz.relu(tz.matmul(h, head.w1) + head.b1), head.w2) + head.b2
        outs.append(z)
    return outs[0], outs[1], outs[2]


def referring_head(hidden: Tensor, params: AlignmentParams) -> Tensor:
    """Per-frame, per-candidate referring probability (T, K) from the finest level."""
    h = tz.take(hidden, hidden.shape[0] - 1, axis=0)  # (T, K, C)
    logits = tz.matmul(h, params.ref_w) + params.ref_b
    return tz.reshape(tz.sigmoid(logits), logits.shape[:-1])

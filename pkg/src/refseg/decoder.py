"""Stacked-transformer mask decoder: two cascaded candidate-gated attention +
grouped-FFN stages, then a final dynamic convolution producing K candidate
mask sequences.

Candidate isolation is structural throughout this module. Every
candidate-indexed quantity lives in its own channel group: the gated cross
attention runs one single-channel attention head per candidate, stage-2
projections that read candidate-grouped channels are stored as per-candidate
blocks (same parameter counts as the equivalent dense matrices), the
feed-forward network is group-wise, and layer normalisation is applied per
candidate group. As a result, permuting the candidate kernels together with
the candidate-indexed parameter groups permutes the output mask channels
bit-exactly - there is no hidden cross-candidate arithmetic anywhere on the
mask path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .encoders import VisualPyramid
from .params import xavier_uniform, zeros_param, ones_param
from .tensor import ShapeError, Tensor

MASK_THRESHOLD = 0.5


@dataclass
class StageParams:
    """One candidate-gated attention + grouped-FFN stage.

    ``w_key``/``w_value``/``w_pix`` are 2-D when the stage input is a shared
    (candidate-free) feature and 3-D ``(K, cin_per_group, cout)`` when the
    stage input is candidate-grouped channels.
    """

    w_query: Tensor  # (cf, K): one query channel per candidate
    w_key: Tensor
    w_value: Tensor
    w_pix: Tensor  # projects stage input to kernel width C0 for the gate
    sffn_w1: Tensor  # (K, a, a)
    sffn_b1: Tensor  # (K*a,)
    sffn_w2: Tensor  # (K, a, a)
    sffn_b2: Tensor  # (K*a,)
    ln1_gain: Tensor  # (K*a,), applied per candidate group
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class MaskDecoderParams:
    stage1: StageParams
    stage2: StageParams
    w_proj: Tensor  # (K, alpha2, C0): per-candidate final projection


def init_stage(rng: np.random.Generator, cf: int, k: int, c0: int,
               a_out: int, cx: int | None = None, a_in: int | None = None) -> StageParams:
    """Initialise one stage. Pass ``cx`` for a shared input or ``a_in`` for a
    candidate-grouped input of ``k`` groups with ``a_in`` channels each."""
    if (cx is None) == (a_in is None):
        raise ValueError("specify exactly one of cx (shared) or a_in (grouped)")
    if cx is not None:
        w_key = xavier_uniform(rng, (cx, k))
        w_value = xavier_uniform(rng, (cx, a_out * k))
        w_pix = xavier_uniform(rng, (cx, c0))
    else:
        w_key = xavier_uniform(rng, (k, a_in, 1))
        w_value = xavier_uniform(rng, (k, a_in, a_out))
        w_pix = xavier_uniform(rng, (k, a_in, c0))
    width = a_out * k
    return StageParams(
        w_query=xavier_uniform(rng, (cf, k)),
        w_key=w_key,
        w_value=w_value,
        w_pix=w_pix,
        sffn_w1=xavier_uniform(rng, (k, a_out, a_out)),
        sffn_b1=zeros_param((width,)),
        sffn_w2=xavier_uniform(rng, (k, a_out, a_out)),
        sffn_b2=zeros_param((width,)),
        ln1_gain=ones_param((width,)),
        ln1_bias=zeros_param((width,)),
        ln2_gain=ones_param((width,)),
        ln2_bias=zeros_param((width,)),
    )


def init_mask_decoder(rng: np.random.Generator, c: int, c1: int, c2: int,
                      k: int, c0: int, alpha: int, alpha2: int) -> MaskDecoderParams:
    return MaskDecoderParams(
        stage1=init_stage(rng, cf=c2, k=k, c0=c0, a_out=alpha, cx=c),
        stage2=init_stage(rng, cf=c1, k=k, c0=c0, a_out=alpha2, a_in=alpha),
        w_proj=xavier_uniform(rng, (k, alpha2, c0)),
    )


# -- building blocks ---------------------------------------------------------


def strip_text(aligned: Tensor, n_visual: int) -> Tensor:
    """Keep the visual rows of the aligned feature, order preserved."""
    return tz.take(aligned, np.arange(n_visual), axis=1)


def _project(x: Tensor, w: Tensor, k: int) -> Tensor:
    """Apply a shared (2-D) or per-candidate-grouped (3-D) projection."""
    if w.ndim == 2:
        return tz.matmul(x, w)
    return tz.grouped_linear(x, w, k)


def _upsample_tokens(x: Tensor, src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> Tensor:
    """Bilinear upsampling on the token axis: (T, h*w, c) -> (T, H*W, c)."""
    t, n, c = x.shape
    h, w = src_hw
    hh, ww = dst_hw
    if n != h * w:
        raise ShapeError(f"token count {n} does not match grid {h}x{w}")
    x = tz.reshape(x, (t, h, w, c))
    x = tz.bilinear_upsample(x, hh, ww)
    return tz.reshape(x, (t, hh * ww, c))


def grouped_layer_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int) -> Tensor:
    """Normalise each candidate's feature block separately, then per-channel affine.

    ``x`` is (T, N, groups*a); the statistics for group g are taken over that
    group's positions-by-channels block of the frame. A full-width norm would
    couple candidates through the shared mean/variance, and a per-position
    norm over tiny groups (a=2 in stage two) degenerates to a sign function
    with vanishing gradients; the per-candidate block norm avoids both.
    """
    if x.ndim != 3:
        raise ShapeError(f"grouped_layer_norm expects (T, N, C), got {x.shape}")
    c = x.shape[-1]
    if c % groups:
        raise ShapeError(f"channels {c} not divisible into {groups} groups")
    a = c // groups
    xg = tz.reshape(x, x.shape[:-1] + (groups, a))
    mu = tz.mean(xg, axis=(1, 3), keepdims=True)
    centered = tz.sub(xg, mu)
    var = tz.mean(tz.mul(centered, centered), axis=(1, 3), keepdims=True)
    normed = tz.div(centered, tz.sqrt(tz.add(var, tz.LAYER_NORM_EPS)))
    flat = tz.reshape(normed, x.shape)
    return tz.add(tz.mul(flat, gain), bias)


def candidate_gate(x_src: Tensor, kernels: Tensor, w_pix: Tensor,
                   src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> Tensor:
    """Per-candidate sigmoid weight map on the destination grid, (T, Nf, K).

    The kernel row of candidate k acts as a 1x1 dynamic convolution over the
    projected source pixels; permuting kernel rows permutes the output
    columns identically.
    """
    t, nx, _ = x_src.shape
    k, c0 = kernels.shape[1], kernels.shape[2]
    pix = _project(x_src, w_pix, k)  # shared: (T, Nx, C0); grouped: (T, Nx, K*C0)
    if w_pix.ndim == 2:
        resp = tz.matmul(pix, tz.transpose(kernels, (0, 2, 1)))  # (T, Nx, K)
    else:
        pixg = tz.reshape(pix, (t, nx, k, c0))
        resp = tz.tensor_sum(tz.mul(pixg, tz.reshape(kernels, (t, 1, k, c0))), axis=-1)
    return tz.sigmoid(_upsample_tokens(resp, src_hw, dst_hw))


def stacked_attention(f: Tensor, x_src: Tensor, kernels: Tensor, params: StageParams,
                      src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> Tensor:
    """Candidate-gated cross attention from a low-resolution source onto a
    higher-resolution query grid.

    Args:
        f: high-resolution appearance feature, (T, Hf*Wf, Cf).
        x_src: lower-resolution source feature, (T, Hx*Wx, Cx).
        kernels: per-frame candidate kernels, (T, K, C0).
        src_hw / dst_hw: source and destination grids; dst must match ``f``.

    Per frame and candidate k: the query channel f @ w_query[:, k] is gated by
    a sigmoid weight map obtained by convolving the kernel row with the
    projected source feature (upsampled to the query grid), then attends over
    the source positions with single-channel logits scaled by 1/sqrt(K), and
    reads that candidate's value group. A residually upsampled value is added.
    Output: (T, Hf*Wf, a*K) with channel group k belonging to candidate k.
    """
    t, nf, _ = f.shape
    k = kernels.shape[1]
    if nf != dst_hw[0] * dst_hw[1]:
        raise ShapeError(f"query grid {dst_hw} does not match feature rows {nf}")
    if x_src.shape[1] != src_hw[0] * src_hw[1]:
        raise ShapeError(f"source grid {src_hw} does not match feature rows {x_src.shape[1]}")

    q2 = tz.matmul(f, params.w_query)  # (T, Nf, K)
    keys = _project(x_src, params.w_key, k)  # (T, Nx, K)
    values = _project(x_src, params.w_value, k)  # (T, Nx, a*K)
    a_out = values.shape[-1] // k

    gate = candidate_gate(x_src, kernels, params.w_pix, src_hw, dst_hw)  # (T, Nf, K)
    q_gated = tz.mul(q2, gate)

    # one single-channel attention head per candidate
    nx = x_src.shape[1]
    qk = tz.reshape(tz.transpose(q_gated, (0, 2, 1)), (t, k, nf, 1))
    kk = tz.reshape(tz.transpose(keys, (0, 2, 1)), (t, k, 1, nx))
    logits = tz.mul(tz.matmul(qk, kk), 1.0 / math.sqrt(k))
    probs = tz.softmax_last(logits)  # (T, K, Nf, Nx)
    vk = tz.transpose(tz.reshape(values, (t, nx, k, a_out)), (0, 2, 1, 3))  # (T, K, Nx, a)
    ctx = tz.matmul(probs, vk)  # (T, K, Nf, a)
    attended = tz.reshape(tz.transpose(ctx, (0, 2, 1, 3)), (t, nf, k * a_out))

    return tz.add(attended, _upsample_tokens(values, src_hw, dst_hw))


def stacked_ffn(x: Tensor, params: StageParams, groups: int, apply_ln: bool = True) -> Tensor:
    """Group-wise two-layer FFN with residual: LN(SFFN(LN(x)) + x).

    ``apply_ln=False`` is a test mode that exposes the pure grouped path.
    """
    if x.shape[-1] % groups:
        raise ShapeError(f"channels {x.shape[-1]} not divisible into {groups} groups")
    inner = grouped_layer_norm(x, params.ln1_gain, params.ln1_bias, groups) if apply_ln else x
    inner = tz.relu(tz.add(tz.grouped_linear(inner, params.sffn_w1, groups), params.sffn_b1))
    inner = tz.add(tz.grouped_linear(inner, params.sffn_w2, groups), params.sffn_b2)
    out = tz.add(inner, x)
    if apply_ln:
        out = grouped_layer_norm(out, params.ln2_gain, params.ln2_bias, groups)
    return out


def decode_masks(x4: Tensor, z3: Tensor, w_proj: Tensor,
                 src_hw: tuple[int, int], out_hw: tuple[int, int]) -> Tensor:
    """Final dynamic convolution: per-candidate projection, kernel dot,
    upsample to full resolution, sigmoid. Returns probabilities (T, K, H, W)."""
    t, n, _ = x4.shape
    k, _, c0 = w_proj.shape
    pix = tz.grouped_linear(x4, w_proj, k)  # (T, N, K*C0)
    pixg = tz.reshape(pix, (t, n, k, c0))
    resp = tz.tensor_sum(tz.mul(pixg, tz.reshape(z3, (t, 1, k, c0))), axis=-1)  # (T, N, K)
    up = _upsample_tokens(resp, src_hw, out_hw)  # (T, H*W, K)
    probs = tz.sigmoid(up)
    h, w = out_hw
    return tz.transpose(tz.reshape(probs, (t, h, w, k)), (0, 3, 1, 2))


def run_decoder(pyr: VisualPyramid, aligned_visual: Tensor,
                kernels: tuple[Tensor, Tensor, Tensor],
                params: MaskDecoderParams, apply_ln: bool = True) -> Tensor:
    """Full mask path: two cascaded stages then the final dynamic convolution.

    Stage 1 queries the stride-8 feature against the aligned visual feature;
    stage 2 queries the stride-4 feature against stage 1's output; the third
    kernel set decodes stage 2's output into (T, K, H, W) mask probabilities.
    """
    z1, z2, z3 = kernels
    k = z1.shape[1]
    g16, g8, g4 = pyr.grid(16), pyr.grid(8), pyr.grid(4)
    x8 = stacked_attention(pyr.f8, aligned_visual, z1, params.stage1, g16, g8)
    x8 = stacked_ffn(x8, params.stage1, k, apply_ln=apply_ln)
    x4 = stacked_attention(pyr.f4, x8, z2, params.stage2, g8, g4)
    x4 = stacked_ffn(x4, params.stage2, k, apply_ln=apply_ln)
    return decode_masks(x4, z3, params.w_proj, g4, pyr.frame_hw)


def binarize(probs: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Probabilities to {0,1} masks; strictly-greater comparison."""
    return (probs > threshold).astype(np.uint8)


# -- structural accounting ------------------------------------------------------


def sffn_weight_count(k: int, a: int) -> int:
    """Weight entries (biases excluded) of the two grouped FFN layers."""
    return 2 * k * a * a


def sffn_param_count(k: int, a: int) -> int:
    """Weights plus biases: K * (2*a*a + 2*a)."""
    return k * (2 * a * a + 2 * a)


def dense_ffn_weight_count(k: int, a: int) -> int:
    """Weight entries of the dense equivalent: two (a*K x a*K) layers."""
    return 2 * (a * k) ** 2


# -- candidate permutation (structural test support) ------------------------------


def _permute_columns(w: Tensor, perm: np.ndarray) -> Tensor:
    # ascontiguousarray matters: BLAS takes a different fold order for
    # F-ordered operands, which would break bit-exact relocation
    return Tensor(np.ascontiguousarray(w.data[:, perm]), requires_grad=w.requires_grad)


def _permute_group_axis(w: Tensor, perm: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(w.data[perm]), requires_grad=w.requires_grad)


def _permute_flat_groups(v: Tensor, perm: np.ndarray, groups: int) -> Tensor:
    a = v.shape[-1] // groups
    return Tensor(np.ascontiguousarray(v.data.reshape(groups, a)[perm].reshape(-1)),
                  requires_grad=v.requires_grad)


def permute_candidates(params: MaskDecoderParams, perm) -> MaskDecoderParams:
    """Return decoder parameters with every candidate-indexed axis permuted.

    Covers the per-candidate query/key/value columns and groups, the gate
    projections, the grouped FFN weights and biases, the grouped LN affines
    and the final projection blocks. Applying this together with the same
    permutation of the kernel rows relocates each candidate's whole
    computation, so the output mask channels permute identically.
    """
    perm = np.asarray(perm)

    def permute_stage(st: StageParams, k: int) -> StageParams:
        w_key = _permute_columns(st.w_key, perm) if st.w_key.ndim == 2 else _permute_group_axis(st.w_key, perm)
        if st.w_value.ndim == 2:
            a = st.w_value.shape[-1] // k
            cols = (perm[:, None] * a + np.arange(a)[None, :]).reshape(-1)
            w_value = _permute_columns(st.w_value, cols)
        else:
            w_value = _permute_group_axis(st.w_value, perm)
        w_pix = st.w_pix if st.w_pix.ndim == 2 else _permute_group_axis(st.w_pix, perm)
        return StageParams(
            w_query=_permute_columns(st.w_query, perm),
            w_key=w_key,
            w_value=w_value,
            w_pix=w_pix,
            sffn_w1=_permute_group_axis(st.sffn_w1, perm),
            sffn_b1=_permute_flat_groups(st.sffn_b1, perm, k),
            sffn_w2=_permute_group_axis(st.sffn_w2, perm),
            sffn_b2=_permute_flat_groups(st.sffn_b2, perm, k),
            ln1_gain=_permute_flat_groups(st.ln1_gain, perm, k),
            ln1_bias=_permute_flat_groups(st.ln1_bias, perm, k),
            ln2_gain=_permute_flat_groups(st.ln2_gain, perm, k),
            ln2_bias=_permute_flat_groups(st.ln2_bias, perm, k),
        )

    k = params.w_proj.shape[0]
    return MaskDecoderParams(
        stage1=permute_stage(params.stage1, k),
        stage2=permute_stage(params.stage2, k),
        w_proj=_permute_group_axis(params.w_proj, perm),
    )

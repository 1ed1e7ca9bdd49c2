"""Text-guided decoding stages.

One guide stage takes visual tokens plus encoded text, projects the text
down to a few tokens, refines the visual tokens with self-attention,
injects text semantics through a gated cross-attention residual, and
merges the result with a skip connection while doubling resolution. A
plain stage is the same merge path without any attention or text, used
for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .encoders import ConvParams, conv_layer, init_conv
from .errors import ShapeError
from .layers import (LinearParams, MhaParams, PosEnc2D, init_linear, init_mha,
                     linear, mhca, mhsa, posenc2d)
from .rng import Rng
from .tensor import (DTYPE, Tensor, as_tensor, concat, layer_norm, mask_fill,
                     matmul, relu, reshape, transpose, upsample_nearest2x)


@dataclass
class GuideDecoderParams:
    w_t: Tensor                 # (D, C_stage) text-to-visual projection matrix
    token_reduce: LinearParams  # token-axis mix: weight (L_max, M), bias (M,)
    self_attn: MhaParams
    cross_attn: MhaParams
    ln_sa_gamma: Tensor
    ln_sa_beta: Tensor
    ln_ca_gamma: Tensor
    ln_ca_beta: Tensor
    alpha: Tensor               # scalar gate on the cross-attention residual
    merge: ConvParams           # 3x3, (C_stage + C_skip) -> C_out
    posenc: PosEnc2D
    grid_h: int
    grid_w: int

    @property
    def c_stage(self) -> int:
        return self.w_t.shape[1]

    @property
    def m_tokens(self) -> int:
        return self.token_reduce.weight.shape[1]


@dataclass
class PlainDecoderParams:
    merge: ConvParams           # 3x3, (C_stage + C_skip) -> C_out


@dataclass
class StageIO:
    """Inputs of one decoder stage; the forward pass returns visual_out."""
    visual_in: Tensor           # (H*W, C_stage) or (B, H*W, C_stage)
    text_in: Tensor             # (L_max, D) or (B, L_max, D)
    text_mask: np.ndarray       # (L_max,) or (B, L_max) bool
    skip: Tensor                # (C_skip, 2H, 2W) or (B, C_skip, 2H, 2W)


def init_guide_decoder(rng: Rng, c_stage: int, c_skip: int, c_out: int,
                       d_text: int, l_max: int, m_tokens: int,
                       grid_h: int, grid_w: int, heads: int = 4) -> GuideDecoderParams:
    if m_tokens >= l_max:
        raise ShapeError(f"token count after reduction ({m_tokens}) must be < l_max ({l_max})")
    bound = 1.0 / math.sqrt(d_text)
    ones = lambda n: Tensor(np.ones(n, dtype=DTYPE), requires_grad=True)
    zeros = lambda n: Tensor(np.zeros(n, dtype=DTYPE), requires_grad=True)
    return GuideDecoderParams(
        w_t=Tensor(rng.uniform((d_text, c_stage), -bound, bound), requires_grad=True),
        token_reduce=init_linear(rng, l_max, m_tokens),
        self_attn=init_mha(rng, c_stage, heads),
        cross_attn=init_mha(rng, c_stage, heads),
        ln_sa_gamma=ones(c_stage), ln_sa_beta=zeros(c_stage),
        ln_ca_gamma=ones(c_stage), ln_ca_beta=zeros(c_stage),
        # gate starts open: a zero-initialized gate gets ~zero gradient into
        # the whole text branch and never opens at this training scale
        alpha=Tensor(np.ones((), dtype=DTYPE), requires_grad=True),
        merge=init_conv(rng, c_stage + c_skip, c_out, 3),
        posenc=posenc2d(grid_h, grid_w, c_stage),
        grid_h=grid_h, grid_w=grid_w,
    )


def init_plain_decoder(rng: Rng, c_stage: int, c_skip: int, c_out: int) -> PlainDecoderParams:
    return PlainDecoderParams(merge=init_conv(rng, c_stage + c_skip, c_out, 3))


def project_text(text, mask, p: GuideDecoderParams) -> Tensor:
    """Align text features with the visual width and reduce their count.

    Per token: D -> C_stage through w_t; then a 1x1 convolution across the
    token axis maps L_max token rows down to M; ReLU last. PAD rows are
    zeroed first so padding cannot inject signal.
    """
    text = as_tensor(text)
    squeeze = text.ndim == 2
    if squeeze:
        text = reshape(text, (1,) + text.shape)
    if text.shape[-1] != p.w_t.shape[0]:
        raise ShapeError(f"project_text: text dim {text.shape[-1]} != {p.w_t.shape[0]}")
    if text.shape[1] != p.token_reduce.weight.shape[0]:
        raise ShapeError(
            f"project_text: {text.shape[1]} tokens, reducer expects "
            f"{p.token_reduce.weight.shape[0]}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, text.shape[:2])
    text = mask_fill(text, ~mask[:, :, None], 0.0)

    h = matmul(text, p.w_t)                       # (B, L, C)
    h = transpose(h, (0, 2, 1))                   # (B, C, L)
    h = linear(h, p.token_reduce)                 # (B, C, M)
    f_t = relu(transpose(h, (0, 2, 1)))           # (B, M, C)
    return reshape(f_t, f_t.shape[1:]) if squeeze else f_t


def evolve_visual(tokens, p: GuideDecoderParams) -> Tensor:
    """Position-encode the visual tokens and refine them with residual MHSA."""
    tokens = as_tensor(tokens)
    n_tokens = tokens.shape[-2]
    if n_tokens != p.grid_h * p.grid_w:
        raise ShapeError(
            f"evolve_visual: {n_tokens} tokens != grid {p.grid_h}x{p.grid_w}")
    if tokens.shape[-1] != p.c_stage:
        raise ShapeError(f"evolve_visual: width {tokens.shape[-1]} != {p.c_stage}")
    encoded = tokens + p.posenc.table
    attended = mhsa(encoded, p.self_attn)
    return encoded + layer_norm(attended, p.ln_sa_gamma, p.ln_sa_beta)


def cross_fuse(f_i, f_t, p: GuideDecoderParams) -> Tensor:
    """Gated cross-attention residual; with alpha == 0 the output is f_i."""
    f_i, f_t = as_tensor(f_i), as_tensor(f_t)
    if f_i.shape[-1] != f_t.shape[-1]:
        raise ShapeError(
            f"cross_fuse: visual width {f_i.shape[-1]} != text width {f_t.shape[-1]}")
    attended = mhca(f_i, f_t, p.cross_attn)
    return f_i + p.alpha * layer_norm(attended, p.ln_ca_gamma, p.ln_ca_beta)


def _merge(tokens, skip, merge: ConvParams, grid_h: int, grid_w: int) -> Tensor:
    tokens, skip = as_tensor(tokens), as_tensor(skip)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = reshape(tokens, (1,) + tokens.shape)
        skip = reshape(skip, (1,) + skip.shape)
    b, n_tokens, c = tokens.shape
    if n_tokens != grid_h * grid_w:
        raise ShapeError(f"decode_merge: {n_tokens} tokens != grid {grid_h}x{grid_w}")
    if skip.shape[-2] != 2 * grid_h or skip.shape[-1] != 2 * grid_w:
        raise ShapeError(
            f"decode_merge: skip spatial {skip.shape[-2:]} != "
            f"({2 * grid_h}, {2 * grid_w})")
    fmap = transpose(reshape(tokens, (b, grid_h, grid_w, c)), (0, 3, 1, 2))
    up = upsample_nearest2x(fmap)
    merged = concat([up, skip], axis=1)
    out = relu(conv_layer(merged, merge, stride=1, pad=1))
    return reshape(out, out.shape[1:]) if squeeze else out


def decode_merge(f_c, skip, p: GuideDecoderParams) -> Tensor:
    """Reshape tokens to a map, upsample 2x, concat the skip, 3x3 conv, ReLU."""
    return _merge(f_c, skip, p.merge, p.grid_h, p.grid_w)


def guide_decoder_forward(io: StageIO, p: GuideDecoderParams) -> Tensor:
    """Full stage: project_text + evolve_visual -> cross_fuse -> decode_merge."""
    f_t = project_text(io.text_in, io.text_mask, p)
    f_i = evolve_visual(io.visual_in, p)
    f_c = cross_fuse(f_i, f_t, p)
    return decode_merge(f_c, io.skip, p)


def plain_decoder_forward(tokens, skip, p: PlainDecoderParams,
                          grid_h: Optional[int] = None,
                          grid_w: Optional[int] = None) -> Tensor:
    """Text-free stage: reshape, upsample 2x, concat skip, 3x3 conv, ReLU."""
    tokens = as_tensor(tokens)
    if grid_h is None:
        side = math.isqrt(tokens.shape[-2])
        grid_h = grid_w = side
    return _merge(tokens, skip, p.merge, grid_h, grid_w)


DecoderParams = Union[GuideDecoderParams, PlainDecoderParams]

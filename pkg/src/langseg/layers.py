"""Linear, multi-head attention, and positional-encoding building blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .rng import Rng
from .tensor import (DTYPE, Tensor, as_tensor, mask_fill, matmul, reshape,
                     softmax, transpose)


@dataclass
class LinearParams:
    weight: Tensor  # (in, out)
    bias: Tensor    # (out,)


def init_linear(rng: Rng, fan_in: int, fan_out: int) -> LinearParams:
    bound = 1.0 / math.sqrt(fan_in)
    return LinearParams(
        weight=Tensor(rng.uniform((fan_in, fan_out), -bound, bound), requires_grad=True),
        bias=Tensor(rng.uniform((fan_out,), -bound, bound), requires_grad=True),
    )


def linear(x, p: LinearParams) -> Tensor:
    x = as_tensor(x)
    if x.data.shape[-1] != p.weight.data.shape[0]:
        raise ShapeError(
            f"linear: input dim {x.data.shape[-1]} != weight rows {p.weight.data.shape[0]}")
    return matmul(x, p.weight) + p.bias


@dataclass
class MhaParams:
    heads: int
    head_dim: int
    q_proj: LinearParams
    k_proj: LinearParams
    v_proj: LinearParams
    out_proj: LinearParams

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim


def init_mha(rng: Rng, dim: int, heads: int = 4) -> MhaParams:
    if dim % heads != 0:
        raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
    return MhaParams(
        heads=heads,
        head_dim=dim // heads,
        q_proj=init_linear(rng, dim, dim),
        k_proj=init_linear(rng, dim, dim),
        v_proj=init_linear(rng, dim, dim),
        out_proj=init_linear(rng, dim, dim),
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    x = reshape(x, (b, n, heads, c // heads))
    return transpose(x, (0, 2, 1, 3))  # (B, h, N, d)


def _attention(q_in: Tensor, kv_in: Tensor, p: MhaParams, kv_mask, return_attn: bool):
    squeeze = q_in.ndim == 2
    if squeeze:
        q_in = reshape(q_in, (1,) + q_in.shape)
        kv_in = reshape(kv_in, (1,) + kv_in.shape)
    b, n, c = q_in.shape
    m = kv_in.shape[1]
    if c != p.model_dim or kv_in.shape[-1] != p.model_dim:
        raise ShapeError(f"attention: feature dim {c} != model dim {p.model_dim}")

    if kv_mask is not None:
        kv_mask = np.asarray(kv_mask, dtype=bool)
        if kv_mask.ndim == 1:
            kv_mask = np.broadcast_to(kv_mask, (b, m))
        if kv_mask.shape != (b, m):
            raise ShapeError(f"attention mask shape {kv_mask.shape} != ({b}, {m})")
        if not kv_mask.any(axis=-1).all():
            raise ContractError("attention: a query would see only masked keys")

    q = _split_heads(linear(q_in, p.q_proj), p.heads)
    k = _split_heads(linear(kv_in, p.k_proj), p.heads)
    v = _split_heads(linear(kv_in, p.v_proj), p.heads)

    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(p.head_dim))
    if kv_mask is not None:
        # -1e9 underflows to exactly zero weight after the stabilized softmax
        scores = mask_fill(scores, ~kv_mask[:, None, None, :], -1e9)
    attn = softmax(scores, -1)

    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))  # (B, N, h, d)
    out = linear(reshape(ctx, (b, n, c)), p.out_proj)
    if squeeze:
        out = reshape(out, out.shape[1:])
    if return_attn:
        w = attn.data[0] if squeeze else attn.data
        return out, w
    return out


def mhsa(x, p: MhaParams, mask=None, return_attn: bool = False):
    """Multi-head self-attention over token rows (no positional term inside)."""
    x = as_tensor(x)
    return _attention(x, x, p, mask, return_attn)


def mhca(q, kv, p: MhaParams, kv_mask=None, return_attn: bool = False):
    """Multi-head cross-attention: queries from q, keys/values from kv."""
    q, kv = as_tensor(q), as_tensor(kv)
    if q.data.shape[-1] != kv.data.shape[-1]:
        raise ShapeError(
            f"mhca: query dim {q.data.shape[-1]} != key/value dim {kv.data.shape[-1]}")
    return _attention(q, kv, p, kv_mask, return_attn)


@dataclass
class PosEnc2D:
    height: int
    width: int
    channels: int
    table: Tensor  # ((H*W), C), constant


def posenc2d(height: int, width: int, channels: int) -> PosEnc2D:
    """Fixed 2D sinusoidal encoding: half the channels carry the row phase,
    half the column phase, as interleaved sin/cos at geometric frequencies."""
    if channels % 4 != 0:
        raise ConfigError(f"posenc2d channels must be divisible by 4, got {channels}")
    quarter = channels // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)

    def phase(pos):  # (P,) -> (P, 2*quarter) interleaved sin/cos
        ang = pos[:, None] * freqs[None, :]
        enc = np.empty((pos.size, 2 * quarter))
        enc[:, 0::2] = np.sin(ang)
        enc[:, 1::2] = np.cos(ang)
        return enc

    row_enc = phase(rows)                               # (H, C/2)
    col_enc = phase(cols)                               # (W, C/2)
    table = np.empty((height * width, channels), dtype=DTYPE)
    table[:, :channels // 2] = np.repeat(row_enc, width, axis=0)
    table[:, channels // 2:] = np.tile(col_enc, (height, 1))
    return PosEnc2D(height=height, width=width, channels=channels,
                    table=Tensor(table))


def posenc1d(length: int, channels: int) -> Tensor:
    """Sinusoidal table for a token sequence, via the 2D encoder with width 1."""
    return posenc2d(length, 1, channels).table

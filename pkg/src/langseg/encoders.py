"""Toy-scale image and text encoders.

The image encoder is a 4-stage convolutional pyramid (strides 4/8/16/32,
widths 16/32/64/128 by default); the text encoder is a 2-block pre-norm
transformer over a fixed-grammar vocabulary. Both expose the same
interfaces a pretrained backbone pair would: a feature pyramid and
per-token text features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import LinearParams, MhaParams, init_linear, init_mha, linear, mhsa, posenc1d
from .rng import Rng
from .tensor import DTYPE, Tensor, as_tensor, conv2d, embedding, layer_norm, relu, reshape, transpose

PAD_ID, UNK_ID, CLS_ID = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<unk>", "<cls>")


@dataclass
class Vocab:
    words: tuple
    index: dict

    def __len__(self) -> int:
        return len(self.words)


def build_vocab(grammar_words) -> Vocab:
    """Specials first (PAD=0, UNK=1, CLS=2), then grammar words in order."""
    grammar_words = list(grammar_words)
    if len(set(grammar_words)) != len(grammar_words):
        raise ConfigError("build_vocab: duplicate words in grammar")
    if any(w in SPECIAL_TOKENS for w in grammar_words):
        raise ConfigError("build_vocab: grammar reuses a special token")
    words = SPECIAL_TOKENS + tuple(grammar_words)
    return Vocab(words=words, index={w: i for i, w in enumerate(words)})


@dataclass
class TokenizedPrompt:
    ids: np.ndarray   # (L_max,) int64
    mask: np.ndarray  # (L_max,) bool, True on real (non-PAD) positions


def tokenize(prompt: str, vocab: Vocab, l_max: int) -> TokenizedPrompt:
    """Lowercase, split on whitespace/commas, prepend CLS, pad or truncate."""
    if l_max < 2:
        raise ConfigError(f"tokenize: l_max must be >= 2, got {l_max}")
    words = prompt.lower().replace(",", " ").split()
    ids = [CLS_ID] + [vocab.index.get(w, UNK_ID) for w in words]
    ids = ids[:l_max]
    n_real = len(ids)
    ids = ids + [PAD_ID] * (l_max - n_real)
    mask = np.zeros(l_max, dtype=bool)
    mask[:n_real] = True
    return TokenizedPrompt(ids=np.asarray(ids, dtype=np.int64), mask=mask)


def words_of(ids, vocab: Vocab) -> list:
    """Inverse of the id map, skipping specials."""
    return [vocab.words[i] for i in ids if i not in (PAD_ID, CLS_ID)]


# ---------------------------------------------------------------------------
# image encoder
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    weight: Tensor  # (Cout, Cin, kh, kw)
    bias: Tensor    # (Cout,)


def init_conv(rng: Rng, cin: int, cout: int, k: int) -> ConvParams:
    bound = 1.0 / math.sqrt(cin * k * k)
    return ConvParams(
        weight=Tensor(rng.uniform((cout, cin, k, k), -bound, bound), requires_grad=True),
        bias=Tensor(rng.uniform((cout,), -bound, bound), requires_grad=True),
    )


@dataclass
class ConvBlock:
    conv: ConvParams
    ln_gamma: Tensor
    ln_beta: Tensor


@dataclass
class EncoderStage:
    down: ConvParams   # strided reduction conv
    stride: int
    blocks: list       # two ConvBlocks


@dataclass
class ImageEncoder:
    stages: list
    in_channels: int = 1

    @property
    def widths(self) -> tuple:
        return tuple(s.down.weight.shape[0] for s in self.stages)

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.stages:
            out *= s.stride
        return out


def _ln_affine(c: int):
    return (Tensor(np.ones(c, dtype=DTYPE), requires_grad=True),
            Tensor(np.zeros(c, dtype=DTYPE), requires_grad=True))


def init_image_encoder(rng: Rng, in_channels: int = 1,
                       widths=(16, 32, 64, 128), stem_stride: int = 4) -> ImageEncoder:
    stages = []
    cin = in_channels
    for i, cout in enumerate(widths):
        stride = stem_stride if i == 0 else 2
        down = init_conv(rng, cin, cout, stride)
        blocks = []
        for _ in range(2):
            g, b = _ln_affine(cout)
            blocks.append(ConvBlock(conv=init_conv(rng, cout, cout, 3),
                                    ln_gamma=g, ln_beta=b))
        stages.append(EncoderStage(down=down, stride=stride, blocks=blocks))
        cin = cout
    return ImageEncoder(stages=stages, in_channels=in_channels)


def conv_layer(x, p: ConvParams, stride: int = 1, pad: int = 0) -> Tensor:
    out = conv2d(x, p.weight, stride=stride, pad=pad)
    bias = reshape(p.bias, (p.bias.shape[0], 1, 1))
    return out + bias


def channel_layer_norm(x, gamma: Tensor, beta: Tensor) -> Tensor:
    """Layer norm over the channel axis of a (..,C,H,W) feature map."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    y = transpose(x, (0, 2, 3, 1))
    y = layer_norm(y, gamma, beta)
    y = transpose(y, (0, 3, 1, 2))
    return reshape(y, y.shape[1:]) if squeeze else y


def encode_image(image, enc: ImageEncoder):
    """Run the pyramid; returns one feature map per stage, shallow to deep."""
    x = as_tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != enc.in_channels:
        raise ShapeError(f"encode_image: expected (N,{enc.in_channels},H,W), got {x.shape}")
    _, _, h, w = x.shape
    if h != w:
        raise ShapeError(f"encode_image: input must be square, got {h}x{w}")
    if h % enc.total_stride != 0:
        raise ShapeError(
            f"encode_image: side {h} not divisible by total stride {enc.total_stride}")

    feats = []
    for stage in enc.stages:
        x = conv_layer(x, stage.down, stride=stage.stride, pad=0)
        for block in stage.blocks:
            x = conv_layer(x, block.conv, stride=1, pad=1)
            x = channel_layer_norm(x, block.ln_gamma, block.ln_beta)
            x = relu(x)
        feats.append(x)
    if squeeze:
        feats = [reshape(f, f.shape[1:]) for f in feats]
    return tuple(feats)


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------

@dataclass
class FeedForward:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class TextBlock:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: MhaParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ff: FeedForward


@dataclass
class TextEncoder:
    embed: Tensor       # (V, D)
    blocks: list
    l_max: int
    pos_table: Tensor = field(repr=False, default=None)  # (L_max, D), constant

    @property
    def dim(self) -> int:
        return self.embed.shape[1]


def init_text_encoder(rng: Rng, vocab_size: int, dim: int = 32,
                      l_max: int = 24, n_blocks: int = 2, heads: int = 4,
                      ff_hidden: int = 64) -> TextEncoder:
    bound = 1.0 / math.sqrt(dim)
    embed = Tensor(rng.uniform((vocab_size, dim), -bound, bound), requires_grad=True)
    blocks = []
    for _ in range(n_blocks):
        g1, b1 = _ln_affine(dim)
        g2, b2 = _ln_affine(dim)
        blocks.append(TextBlock(
            ln1_gamma=g1, ln1_beta=b1,
            attn=init_mha(rng, dim, heads),
            ln2_gamma=g2, ln2_beta=b2,
            ff=FeedForward(fc1=init_linear(rng, dim, ff_hidden),
                           fc2=init_linear(rng, ff_hidden, dim)),
        ))
    return TextEncoder(embed=embed, blocks=blocks, l_max=l_max,
                       pos_table=posenc1d(l_max, dim))


def encode_tokens(ids: np.ndarray, mask: np.ndarray, enc: TextEncoder) -> Tensor:
    """Per-token features for id arrays of shape (L,) or (B, L).

    PAD keys are masked inside every attention block; PAD positions still
    carry values through so the caller decides how to drop them.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    length = ids.shape[-1]
    if length > enc.l_max:
        raise ShapeError(f"encode_tokens: sequence {length} longer than l_max {enc.l_max}")
    x = embedding(enc.embed, ids)
    pos = Tensor(enc.pos_table.data[:length])
    x = x + pos
    for block in enc.blocks:
        attended = mhsa(layer_norm(x, block.ln1_gamma, block.ln1_beta),
                        block.attn, mask=mask)
        x = x + attended
        h = layer_norm(x, block.ln2_gamma, block.ln2_beta)
        x = x + linear(relu(linear(h, block.ff.fc1)), block.ff.fc2)
    return x


def encode_text(t: TokenizedPrompt, enc: TextEncoder) -> Tensor:
    """Features for one tokenized prompt: (L_max, D)."""
    return encode_tokens(t.ids, t.mask, enc)

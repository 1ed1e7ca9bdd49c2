"""Full segmentation model, training losses, and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .decoder import (GuideDecoderParams, StageIO, guide_decoder_forward,
                      init_guide_decoder, init_plain_decoder,
                      plain_decoder_forward)
from .encoders import (ConvParams, ImageEncoder, TextEncoder, Vocab,
                       conv_layer, encode_image, encode_tokens, init_conv,
                       init_image_encoder, init_text_encoder, tokenize)
from .errors import ConfigError, ContractError, InputError, ShapeError
from .rng import Rng
from .tensor import (DTYPE, Tensor, as_tensor, clip, log, mul, reshape,
                     sigmoid, transpose, tsum, upsample_nearest2x)

PROMPT_MODES = ("none", "s12", "s3", "s123")


@dataclass
class ModelArch:
    """Structural hyperparameters; the defaults are the desk-scale model."""
    image_side: int = 64
    widths: tuple = (16, 32, 64, 128)
    stem_stride: int = 4
    text_dim: int = 32
    l_max: int = 24
    m_tokens: int = 4
    heads: int = 4
    text_blocks: int = 2
    ff_hidden: int = 64


@dataclass
class SegModel:
    image_enc: ImageEncoder
    text_enc: TextEncoder
    stages: list                  # deepest first; guide or plain params each
    head: ConvParams              # 1x1 conv, shallowest width -> 1 logit channel
    prompt_mode: str
    vocab: Vocab
    arch: ModelArch
    guide_count: int


@dataclass
class Prediction:
    logits: Tensor
    probabilities: Tensor
    mask: np.ndarray              # probabilities > 0.5


def build_model(rng: Rng, vocab: Vocab, prompt_mode: str = "s123",
                guide_decoders: int = 3, arch: Optional[ModelArch] = None) -> SegModel:
    """Assemble encoders, a 3-slot decoder stack, and the segmentation head.

    With k guide decoders the k deepest slots run the guided path and the
    rest the plain path; prompt_mode "none" forces an all-plain stack.
    """
    arch = arch or ModelArch()
    if prompt_mode not in PROMPT_MODES:
        raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}, got {prompt_mode!r}")
    n_slots = len(arch.widths) - 1
    if not 0 <= guide_decoders <= n_slots:
        raise ConfigError(f"guide_decoders must be in [0, {n_slots}], got {guide_decoders}")
    if prompt_mode == "none":
        guide_decoders = 0

    image_enc = init_image_encoder(rng, in_channels=1, widths=arch.widths,
                                   stem_stride=arch.stem_stride)
    text_enc = init_text_encoder(rng, vocab_size=len(vocab), dim=arch.text_dim,
                                 l_max=arch.l_max, n_blocks=arch.text_blocks,
                                 heads=arch.heads, ff_hidden=arch.ff_hidden)

    strides = [arch.stem_stride * (2 ** i) for i in range(len(arch.widths))]
    stages = []
    for slot in range(n_slots):
        c_stage = arch.widths[-1 - slot]
        c_skip = arch.widths[-2 - slot]
        grid = arch.image_side // strides[-1 - slot]
        if slot < guide_decoders:
            stages.append(init_guide_decoder(
                rng, c_stage=c_stage, c_skip=c_skip, c_out=c_skip,
                d_text=arch.text_dim, l_max=arch.l_max, m_tokens=arch.m_tokens,
                grid_h=grid, grid_w=grid, heads=arch.heads))
        else:
            stages.append(init_plain_decoder(rng, c_stage=c_stage,
                                             c_skip=c_skip, c_out=c_skip))
    head = init_conv(rng, arch.widths[0], 1, 1)
    return SegModel(image_enc=image_enc, text_enc=text_enc, stages=stages,
                    head=head, prompt_mode=prompt_mode, vocab=vocab,
                    arch=arch, guide_count=guide_decoders)


def assemble_prompt(stages, mode: str) -> str:
    """Join the selected prompt stages with commas; "" for mode none."""
    if mode not in PROMPT_MODES:
        raise ConfigError(f"unknown prompt mode {mode!r}")
    if mode == "none":
        return ""
    stage1, stage2, stage3 = stages
    wanted = {"s12": (stage1, stage2), "s3": (stage3,),
              "s123": (stage1, stage2, stage3)}[mode]
    if any(not s for s in wanted):
        raise InputError(f"prompt mode {mode!r} needs non-empty stages")
    return ", ".join(wanted)


def _tokens_of_map(fmap: Tensor) -> Tensor:
    """(B,C,H,W) feature map -> (B, H*W, C) row-major token rows."""
    b, c, h, w = fmap.shape
    return reshape(transpose(fmap, (0, 2, 3, 1)), (b, h * w, c))


def model_forward(image, prompt_stages, m: SegModel) -> Prediction:
    """Predict a full-resolution mask for one image or a batch.

    image: (1,S,S) or (B,1,S,S); prompt_stages: one (stage1,stage2,stage3)
    triple or a list of them for a batch. The prompt is assembled per the
    model's prompt_mode, encoded once, and shared by all guide stages.
    """
    x = as_tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b = x.shape[0]
    side = x.shape[-1]
    if side % m.image_enc.total_stride != 0:
        raise ShapeError(
            f"model_forward: side {side} not divisible by {m.image_enc.total_stride}")

    feats = encode_image(x, m.image_enc)

    text = None
    text_mask = None
    if m.prompt_mode != "none":
        if not prompt_stages:
            raise InputError(f"prompt mode {m.prompt_mode!r} needs prompt stages")
        if isinstance(prompt_stages[0], str):
            prompt_stages = [prompt_stages]
        if len(prompt_stages) != b:
            raise InputError(f"got {len(prompt_stages)} prompts for batch of {b}")
        toks = [tokenize(assemble_prompt(s, m.prompt_mode), m.vocab, m.arch.l_max)
                for s in prompt_stages]
        ids = np.stack([t.ids for t in toks])
        text_mask = np.stack([t.mask for t in toks])
        text = encode_tokens(ids, text_mask, m.text_enc)

    tokens = _tokens_of_map(feats[-1])
    for slot, stage in enumerate(m.stages):
        skip = feats[-2 - slot]
        if isinstance(stage, GuideDecoderParams):
            out = guide_decoder_forward(
                StageIO(visual_in=tokens, text_in=text, text_mask=text_mask,
                        skip=skip), stage)
        else:
            grid = feats[-1 - slot].shape[-1]
            out = plain_decoder_forward(tokens, skip, stage, grid, grid)
        tokens = _tokens_of_map(out)

    up = out
    remaining = side // out.shape[-1]
    while remaining > 1:
        up = upsample_nearest2x(up)
        remaining //= 2
    logits = conv_layer(up, m.head, stride=1, pad=0)
    if squeeze:
        logits = reshape(logits, logits.shape[1:])
    probs = sigmoid(logits)
    return Prediction(logits=logits, probabilities=probs,
                      mask=(probs.data > 0.5).astype(np.uint8))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_target(probs: Tensor, target) -> np.ndarray:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if target.shape != probs.shape:
        raise ShapeError(f"loss: target shape {target.shape} != probs shape {probs.shape}")
    if not ((target == 0.0) | (target == 1.0)).all():
        raise ContractError("loss: target must be binary")
    return target.astype(DTYPE)


def dice_loss(probs, target, eps: float = 1.0) -> Tensor:
    """1 - (2*intersection + eps) / (sum(p) + sum(t) + eps), over all pixels."""
    probs = as_tensor(probs)
    target = _check_target(probs, target)
    inter = tsum(mul(probs, target))
    denom = tsum(probs) + float(target.sum())
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def bce_loss(probs, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    probs = as_tensor(probs)
    target = _check_target(probs, target)
    p = clip(probs, 1e-7, 1.0 - 1e-7)
    per_pixel = -(target * log(p) + (1.0 - target) * log(1.0 - p))
    return per_pixel.mean()


def combined_loss(probs, target) -> Tensor:
    """Dice plus binary cross-entropy with equal unit weights."""
    return dice_loss(probs, target) + bce_loss(probs, target)


def batch_combined_loss(probs: Tensor, targets, eps: float = 1.0) -> Tensor:
    """Mean over a batch of per-sample dice, plus overall mean BCE."""
    probs = as_tensor(probs)
    targets = _check_target(probs, targets)
    axes = tuple(range(1, probs.ndim))
    inter = tsum(mul(probs, targets), axis=axes)
    denom = tsum(probs, axis=axes) + Tensor(targets.sum(axis=axes))
    dice = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return dice.mean() + bce_loss(probs, targets)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def metrics(pred_mask, target) -> tuple:
    """(accuracy, dice, jaccard) for two binary masks of equal shape.

    Two empty masks count as a perfect match (dice = jaccard = 1).
    """
    pred = np.asarray(pred_mask)
    tgt = np.asarray(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"metrics: shapes {pred.shape} != {tgt.shape}")
    for arr, name in ((pred, "prediction"), (tgt, "target")):
        if not np.isin(arr, (0, 1)).all():
            raise ContractError(f"metrics: {name} mask must be binary")
    pred = pred.astype(bool)
    tgt = tgt.astype(bool)
    tp = int((pred & tgt).sum())
    fp = int((pred & ~tgt).sum())
    fn = int((~pred & tgt).sum())
    tn = int((~pred & ~tgt).sum())
    acc = (tp + tn) / pred.size
    if tp + fp + fn == 0:
        return acc, 1.0, 1.0
    dice = 2 * tp / (2 * tp + fp + fn)
    jaccard = tp / (tp + fp + fn)
    return acc, dice, jaccard

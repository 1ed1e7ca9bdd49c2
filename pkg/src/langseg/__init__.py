"""Language-guided lesion segmentation at desk scale.

A numpy-backed library: float32 tensors with reverse-mode autodiff,
attention building blocks, toy image/text encoders, text-guided decoder
stages, a synthetic ambiguous-scene dataset, and an AdamW training and
evaluation harness.
"""

from .rng import Rng
from .tensor import (Tensor, backward, conv2d, grad_check, layer_norm, matmul,
                     relu, sigmoid, softmax, tape, upsample_nearest2x)
from .layers import (LinearParams, MhaParams, PosEnc2D, init_linear, init_mha,
                     linear, mhca, mhsa, posenc2d)
from .encoders import (ImageEncoder, TextEncoder, TokenizedPrompt, Vocab,
                       build_vocab, encode_image, encode_text, tokenize)
from .decoder import (GuideDecoderParams, PlainDecoderParams, StageIO,
                      cross_fuse, decode_merge, evolve_visual,
                      guide_decoder_forward, init_guide_decoder,
                      init_plain_decoder, plain_decoder_forward, project_text)
from .model import (ModelArch, Prediction, SegModel, bce_loss, build_model,
                    combined_loss, dice_loss, metrics, model_forward)
from .data import (ANCHORS, DataConfig, GRAMMAR_WORDS, Manifest, SampleRecord,
                   SceneSpec, gen_prompt, gen_scene, generate_dataset,
                   load_dataset, random_zoom, read_pgm, render_sample,
                   split_dataset, write_pgm)
from .training import (AdamWState, TrainConfig, adamw_step, cosine_lr,
                       evaluate, load_checkpoint, named_params,
                       save_checkpoint, train, train_epoch)

__version__ = "0.1.0"

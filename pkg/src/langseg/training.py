"""AdamW training loop with cosine-annealed learning rate and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import random_zoom
from .errors import (ConfigError, ContractError, CorruptionError, FormatError,
                     InputError, ShapeError, VersionError)
from .encoders import build_vocab
from .model import (ModelArch, SegModel, batch_combined_loss, build_model,
                    metrics, model_forward)
from .rng import Rng
from .tensor import DTYPE, Tensor, backward

CHECKPOINT_MAGIC = b"LGSD"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    prompt_mode: str = "s123"
    guide_decoders: int = 3
    data_fraction: float = 1.0
    zoom_prob: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"need lr_min < lr_max, got {self.lr_min} / {self.lr_max}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class MetricsRecord:
    acc: float
    dice: float
    jaccard: float
    n: int


def named_params(obj, prefix: str = "") -> dict:
    """All requires_grad tensors under a dataclass tree, by dotted path."""
    out: dict = {}
    _walk(obj, prefix, out)
    return out


def _walk(obj, prefix, out):
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out[prefix] = obj
        return
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            _walk(getattr(obj, f.name), name, out)
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _walk(item, f"{prefix}[{i}]", out)


def init_adamw_state(params: dict) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
        t=0,
    )


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update; increments state.t once.

    A missing gradient counts as zero: the moment update is a no-op but the
    decay still applies.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    decay = DTYPE(1.0 - lr * cfg.weight_decay)
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.data.shape:
            raise ShapeError(f"adamw_step: grad shape {g.shape} != param {p.data.shape} "
                             f"for {name}")
        p.data *= decay
        m = state.m[name]
        v = state.v[name]
        if g is None:
            g = np.zeros_like(p.data)
        m *= DTYPE(cfg.beta1)
        m += DTYPE(1.0 - cfg.beta1) * g
        v *= DTYPE(cfg.beta2)
        v += DTYPE(1.0 - cfg.beta2) * (g * g)
        m_hat = m / DTYPE(bc1)
        v_hat = v / DTYPE(bc2)
        p.data -= DTYPE(lr) * m_hat / (np.sqrt(v_hat) + DTYPE(cfg.adam_eps))


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total_steps)) / 2."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    cos = math.cos(math.pi * step / total_steps)
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 + cos) / 2.0


def _batches(n: int, batch_size: int):
    """Index ranges covering n items; the last partial batch is kept."""
    return [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]


def _forward_batch(model: SegModel, samples: list):
    images = np.stack([s.image for s in samples])[:, None]
    targets = np.stack([s.mask for s in samples])[:, None]
    prompts = [(s.stage1, s.stage2, s.stage3) for s in samples]
    pred = model_forward(images, prompts, model)
    return pred, targets


def train_epoch(model: SegModel, records: list, cfg: TrainConfig, rng: Rng,
                state: AdamWState, start_step: int = 0,
                total_steps: int = None) -> dict:
    """One pass over records: shuffle, augment, forward, backward, AdamW.

    Returns per-batch losses and their mean; the batch order and the zoom
    draws come from rng, so the whole epoch is a pure function of its state.
    """
    if not records:
        raise InputError("train_epoch: empty split")
    params = named_params(model)
    order = list(range(len(records)))
    rng.shuffle(order)
    spans = _batches(len(records), cfg.batch_size)
    if total_steps is None:
        total_steps = len(spans)
    losses = []
    for i, (lo, hi) in enumerate(spans):
        samples = [random_zoom(records[order[j]], rng, cfg.zoom_prob)
                   for j in range(lo, hi)]
        pred, targets = _forward_batch(model, samples)
        loss = batch_combined_loss(pred.probabilities, targets)
        for p in params.values():
            p.grad = None
        backward(loss)
        lr = cosine_lr(min(start_step + i, total_steps), total_steps, cfg)
        adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr, cfg)
        losses.append(float(loss.data))
    return {"losses": losses, "loss": float(np.mean(losses)), "batches": len(spans)}


def evaluate(model: SegModel, records: list, batch_size: int = 32) -> MetricsRecord:
    """Mean per-sample metrics over a split, without augmentation."""
    if not records:
        raise InputError("evaluate: empty split")
    accs, dices, jaccards = [], [], []
    for lo, hi in _batches(len(records), batch_size):
        chunk = records[lo:hi]
        pred, targets = _forward_batch(model, chunk)
        for i in range(len(chunk)):
            a, d, j = metrics(pred.mask[i, 0], targets[i, 0].astype(np.uint8))
            accs.append(a)
            dices.append(d)
            jaccards.append(j)
    return MetricsRecord(acc=float(np.mean(accs)), dice=float(np.mean(dices)),
                         jaccard=float(np.mean(jaccards)), n=len(records))


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_dice: float
    state: AdamWState
    rng: Rng


def apply_fraction(train_records: list, fraction: float) -> list:
    """Leading slice of an already-shuffled train split; at least one sample."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"data fraction must be in (0, 1], got {fraction}")
    keep = max(1, int(round(fraction * len(train_records))))
    return train_records[:keep]


def step_matched_epochs(epochs: int, n_full: int, n_kept: int,
                        batch_size: int) -> int:
    """Epochs giving a reduced-data run the full-data run's step budget.

    Comparisons across data fractions hold the optimizer-step count (and
    with it the cosine schedule span) fixed rather than the pass count.
    """
    steps_full = epochs * math.ceil(n_full / batch_size)
    batches_kept = math.ceil(n_kept / batch_size)
    return max(epochs, round(steps_full / batches_kept))


def train(model: SegModel, train_records: list, val_records: list,
          cfg: TrainConfig, state: AdamWState = None, rng: Rng = None,
          start_epoch: int = 0, ckpt_path: str = None,
          log_path: str = None) -> TrainResult:
    """Epoch loop with per-epoch validation; keeps the best-val-dice model.

    Pass state/rng/start_epoch from a loaded checkpoint to resume: the
    remaining epochs reproduce an uninterrupted run bitwise.
    """
    if not train_records:
        raise InputError("train: empty training split")
    params = named_params(model)
    if state is None:
        state = init_adamw_state(params)
    if rng is None:
        rng = Rng(cfg.seed).split(1)
    batches_per_epoch = len(_batches(len(train_records), cfg.batch_size))
    total_steps = cfg.epochs * batches_per_epoch

    history = []
    best_val_dice = -1.0
    best_epoch = -1
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            stats = train_epoch(model, train_records, cfg, rng, state,
                                start_step=epoch * batches_per_epoch,
                                total_steps=total_steps)
            row = {"epoch": epoch, "loss": stats["loss"]}
            if val_records:
                val = evaluate(model, val_records, cfg.batch_size)
                row.update(val_dice=val.dice, val_acc=val.acc, val_jaccard=val.jaccard)
                if val.dice > best_val_dice:
                    best_val_dice = val.dice
                    best_epoch = epoch
                    if ckpt_path:
                        save_checkpoint(model, state, ckpt_path, cfg=cfg,
                                        epoch=epoch, rng=rng,
                                        extra={"best_val_dice": best_val_dice})
            history.append(row)
            if log_file:
                log_file.write(json.dumps(row) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    if ckpt_path and best_epoch < 0:
        save_checkpoint(model, state, ckpt_path, cfg=cfg,
                        epoch=cfg.epochs - 1, rng=rng, extra={})
    return TrainResult(history=history, best_epoch=best_epoch,
                       best_val_dice=best_val_dice, state=state, rng=rng)


# ---------------------------------------------------------------------------
# checkpoint format: magic | version | named tensors | metadata JSON
# ---------------------------------------------------------------------------

def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    dims = arr.shape
    head = struct.pack("<I", len(encoded)) + encoded
    head += struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + arr.astype("<f4").tobytes()


def save_checkpoint(model: SegModel, state: AdamWState, path: str,
                    cfg: TrainConfig = None, epoch: int = -1,
                    rng: Rng = None, extra: dict = None) -> None:
    """Write every model parameter and optimizer moment, plus metadata."""
    params = named_params(model)
    tensors = [(name, p.data) for name, p in params.items()]
    tensors += [(f"opt.m.{name}", state.m[name]) for name in params]
    tensors += [(f"opt.v.{name}", state.v[name]) for name in params]

    meta = {
        "format": "langseg-checkpoint",
        "config": dataclasses.asdict(cfg) if cfg else None,
        "epoch": epoch,
        "t": state.t,
        "rng": rng.state() if rng else None,
        "arch": dataclasses.asdict(model.arch),
        "prompt_mode": model.prompt_mode,
        "guide_count": model.guide_count,
        "grammar": list(model.vocab.words[3:]),
    }
    meta.update(extra or {})
    meta_bytes = json.dumps(meta).encode("utf-8")

    blob = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        blob += _pack_tensor(name, arr)
    blob += struct.pack("<I", len(meta_bytes)) + meta_bytes
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(
                f"checkpoint truncated at byte {self.pos}: wanted {n} more bytes")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path: str):
    """Parse a checkpoint file into (tensors: name -> array, metadata)."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic at byte 0 in {path}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    n_tensors = r.u32()
    tensors = {}
    for _ in range(n_tensors):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(data):
        raise CorruptionError(f"{len(data) - r.pos} trailing bytes after metadata")
    return tensors, meta


def load_checkpoint(path: str):
    """Rebuild (model, state, meta) from a checkpoint, bitwise."""
    tensors, meta = read_checkpoint(path)
    vocab = build_vocab(meta["grammar"])
    arch = ModelArch(**{k: tuple(v) if isinstance(v, list) else v
                        for k, v in meta["arch"].items()})
    model = build_model(Rng(0), vocab, prompt_mode=meta["prompt_mode"],
                        guide_decoders=meta["guide_count"], arch=arch)
    params = named_params(model)

    expected = set(params) | {f"opt.m.{n}" for n in params} | {f"opt.v.{n}" for n in params}
    if expected != set(tensors):
        missing = sorted(expected - set(tensors))[:3]
        surplus = sorted(set(tensors) - expected)[:3]
        raise CorruptionError(
            f"checkpoint tensor names do not match the model: missing {missing}, "
            f"unexpected {surplus}")
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise CorruptionError(
                f"checkpoint tensor {name} has shape {tensors[name].shape}, "
                f"expected {p.data.shape}")
        p.data = tensors[name].astype(DTYPE)
    state = AdamWState(
        m={n: tensors[f"opt.m.{n}"].astype(DTYPE) for n in params},
        v={n: tensors[f"opt.v.{n}"].astype(DTYPE) for n in params},
        t=meta["t"],
    )
    return model, state, meta

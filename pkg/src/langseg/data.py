"""Synthetic image/mask/prompt generation, file formats, split, augmentation.

Scenes place 2-4 visually identical elliptical blobs into four quadrant
anchors; only a subset is "infected" (mask-positive). Distractor blobs
share the exact intensity distribution, so images alone cannot say which
blobs belong in the mask - the three-stage text prompt can.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, FormatError, InputError
from .rng import Rng

IMAGE_SIDE = 64

# anchors in fixed order; stage3 lists infected anchors in this order
ANCHORS = ("left upper", "left lower", "right upper", "right lower")
_ANCHOR_CENTERS = {
    "left upper": (16, 16),
    "left lower": (48, 16),
    "right upper": (16, 48),
    "right lower": (48, 48),
}
_NUM_WORDS = {1: "one", 2: "two", 3: "three"}

GRAMMAR_WORDS = (
    "unilateral", "bilateral", "pulmonary", "infection",
    "one", "two", "three", "infected", "areas",
    "located", "at", "left", "right", "upper", "lower", "lung",
)


@dataclass
class DataConfig:
    # infected is sampled within [infected_lo, min(infected_hi, blobs)], so
    # most scenes carry distractor blobs an image-only model cannot reject;
    # guarantee_distractor forces a proper subset in every scene
    side: int = IMAGE_SIDE
    blobs_lo: int = 2
    blobs_hi: int = 4
    infected_lo: int = 1
    infected_hi: int = 3
    guarantee_distractor: bool = False
    radius_lo: float = 5.0
    radius_hi: float = 9.0
    center_jitter: int = 4
    blob_brightness: tuple = (0.60, 0.85)
    background: float = 0.10
    noise: float = 0.03


def _validate_config(cfg: DataConfig) -> None:
    if not (1 <= cfg.blobs_lo <= cfg.blobs_hi <= len(ANCHORS)):
        raise ConfigError(f"blob count bounds [{cfg.blobs_lo}, {cfg.blobs_hi}] invalid")
    if not (1 <= cfg.infected_lo <= cfg.infected_hi):
        raise ConfigError(
            f"infected count bounds [{cfg.infected_lo}, {cfg.infected_hi}] invalid")
    if cfg.infected_lo > cfg.blobs_hi:
        raise ConfigError("infected_lo exceeds the largest possible blob count")
    if cfg.radius_lo > cfg.radius_hi or cfg.radius_lo <= 0:
        raise ConfigError("radius bounds invalid")


@dataclass
class Blob:
    anchor: str
    cy: int
    cx: int
    ry: float
    rx: float
    brightness: float


@dataclass
class SceneSpec:
    blobs: tuple          # Blob per occupied anchor
    infected: tuple       # anchor names, canonical order, nonempty subset
    noise_seed: int
    side: int = IMAGE_SIDE


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray     # (side, side) float32 in [0, 1]
    mask: np.ndarray      # (side, side) float32 in {0, 1}
    stage1: str
    stage2: str
    stage3: str


@dataclass
class Manifest:
    records: list                       # SampleRecord, file order
    pools: dict = field(default_factory=dict)  # id -> "train" | "test"


def gen_scene(rng: Rng, cfg: DataConfig = DataConfig()) -> SceneSpec:
    """Sample anchors, blob geometry, and the infected subset from rng."""
    _validate_config(cfg)
    n_blobs = rng.randint(cfg.blobs_lo, cfg.blobs_hi)
    anchors = list(ANCHORS)
    rng.shuffle(anchors)
    chosen = sorted(anchors[:n_blobs], key=ANCHORS.index)

    blobs = []
    for anchor in chosen:
        cy0, cx0 = _ANCHOR_CENTERS[anchor]
        blobs.append(Blob(
            anchor=anchor,
            cy=cy0 + rng.randint(-cfg.center_jitter, cfg.center_jitter),
            cx=cx0 + rng.randint(-cfg.center_jitter, cfg.center_jitter),
            ry=cfg.radius_lo + (cfg.radius_hi - cfg.radius_lo) * rng.random(),
            rx=cfg.radius_lo + (cfg.radius_hi - cfg.radius_lo) * rng.random(),
            brightness=cfg.blob_brightness[0]
            + (cfg.blob_brightness[1] - cfg.blob_brightness[0]) * rng.random(),
        ))

    cap = n_blobs - 1 if cfg.guarantee_distractor else n_blobs
    n_infected = rng.randint(cfg.infected_lo, max(cfg.infected_lo,
                                                  min(cfg.infected_hi, cap)))
    pool = [b.anchor for b in blobs]
    rng.shuffle(pool)
    infected = tuple(sorted(pool[:n_infected], key=ANCHORS.index))
    return SceneSpec(blobs=tuple(blobs), infected=infected,
                     noise_seed=int(rng.u64(1)[0]), side=cfg.side)


def _ellipse_support(blob: Blob, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    return (((yy - blob.cy) / blob.ry) ** 2 + ((xx - blob.cx) / blob.rx) ** 2) <= 1.0


def render_sample(scene: SceneSpec, cfg: DataConfig = DataConfig()):
    """Render (image, mask). All blobs look identical; only infected ones
    appear in the mask."""
    noise_rng = Rng(scene.noise_seed)
    side = scene.side
    image = np.full((side, side), cfg.background, dtype=np.float32)
    mask = np.zeros((side, side), dtype=np.float32)
    for blob in scene.blobs:
        support = _ellipse_support(blob, side)
        image[support] = blob.brightness
        if blob.anchor in scene.infected:
            mask[support] = 1.0
    image += cfg.noise * noise_rng.uniform((side, side), -1.0, 1.0)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def gen_prompt(scene: SceneSpec) -> tuple:
    """Three prompt stages with increasingly precise position information."""
    if not scene.infected:
        raise ContractError("gen_prompt: infected set must be nonempty")
    sides = {anchor.split()[0] for anchor in scene.infected}
    stage1 = ("bilateral" if sides == {"left", "right"} else "unilateral") \
        + " pulmonary infection"
    stage2 = f"{_NUM_WORDS[len(scene.infected)]} infected areas"
    stage3 = "located at " + ", ".join(f"{a} lung" for a in scene.infected)
    return stage1, stage2, stage3


def make_sample(sample_id: str, rng: Rng, cfg: DataConfig = DataConfig()) -> SampleRecord:
    scene = gen_scene(rng, cfg)
    image, mask = render_sample(scene, cfg)
    stage1, stage2, stage3 = gen_prompt(scene)
    return SampleRecord(id=sample_id, image=image, mask=mask,
                        stage1=stage1, stage2=stage2, stage3=stage3)


# ---------------------------------------------------------------------------
# PGM and manifest formats
# ---------------------------------------------------------------------------

def write_pgm(arr: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255); values in [0,1] quantize to round(v*255)."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise FormatError(f"write_pgm expects a 2D array, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise FormatError("write_pgm expects values in [0, 1]")
    h, w = arr.shape
    payload = np.round(arr * 255.0).astype(np.uint8).tobytes()
    return f"P5\n{w} {h}\n255\n".encode("ascii") + payload


def read_pgm(data: bytes) -> np.ndarray:
    """Parse a binary PGM into float32 values in [0, 1]."""
    if data[:2] != b"P5":
        raise FormatError(f"not a binary PGM: bad magic at byte 0 ({data[:2]!r})")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"malformed PGM header at byte {start}")
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} at byte {pos}")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos:]
    if len(payload) != w * h:
        raise FormatError(
            f"PGM payload truncated at byte {pos + len(payload)}: "
            f"expected {w * h} bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return (values.astype(np.float32) / 255.0)


def write_pgm_file(arr: np.ndarray, path: str) -> None:
    with open(path, "wb") as f:
        f.write(write_pgm(arr))


def read_pgm_file(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return read_pgm(f.read())


def generate_dataset(out_dir: str, n_train: int, n_test: int, seed: int,
                     cfg: DataConfig = DataConfig()) -> Manifest:
    """Write images/, masks/, and manifest.jsonl under out_dir.

    Sample i draws from an independent child stream of the seed, so
    generation is order-independent and byte-reproducible. Pool membership
    is carried by the id prefix (train-/test-).
    """
    if n_train < 1:
        raise InputError(f"n_train must be >= 1, got {n_train}")
    if n_test < 0:
        raise InputError(f"n_test must be >= 0, got {n_test}")
    _validate_config(cfg)
    base = Rng(seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)

    records = []
    pools = {}
    plan = [("train", i, i) for i in range(n_train)] + \
           [("test", i, (1 << 32) + i) for i in range(n_test)]
    for pool, i, stream in plan:
        sample_id = f"{pool}-{i:04d}"
        rec = make_sample(sample_id, base.split(stream), cfg)
        write_pgm_file(rec.image, os.path.join(out_dir, "images", sample_id + ".pgm"))
        write_pgm_file(rec.mask, os.path.join(out_dir, "masks", sample_id + ".pgm"))
        records.append(rec)
        pools[sample_id] = pool

    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({
                "id": rec.id,
                "image": f"images/{rec.id}.pgm",
                "mask": f"masks/{rec.id}.pgm",
                "stage1": rec.stage1,
                "stage2": rec.stage2,
                "stage3": rec.stage3,
            }) + "\n")
    return Manifest(records=records, pools=pools)


def load_dataset(data_dir: str) -> Manifest:
    """Read manifest.jsonl and every referenced PGM back into memory."""
    manifest_path = os.path.join(data_dir, "manifest.jsonl")
    if not os.path.exists(manifest_path):
        raise InputError(f"no manifest.jsonl under {data_dir}")
    records = []
    pools = {}
    with open(manifest_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"manifest line {line_no} is not valid JSON: {exc}")
            missing = {"id", "image", "mask", "stage1", "stage2", "stage3"} - row.keys()
            if missing:
                raise FormatError(f"manifest line {line_no} missing keys {sorted(missing)}")
            image = read_pgm_file(os.path.join(data_dir, row["image"]))
            mask = read_pgm_file(os.path.join(data_dir, row["mask"]))
            records.append(SampleRecord(
                id=row["id"], image=image.astype(np.float32),
                mask=mask.astype(np.float32),
                stage1=row["stage1"], stage2=row["stage2"], stage3=row["stage3"]))
            pools[row["id"]] = "test" if row["id"].startswith("test") else "train"
    if not records:
        raise InputError(f"manifest under {data_dir} is empty")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise FormatError("manifest contains duplicate ids")
    return Manifest(records=records, pools=pools)


def split_dataset(manifest: Manifest, seed: int):
    """Deterministic 80/20 train/val split of the train pool; test untouched."""
    if not manifest.records:
        raise InputError("split_dataset: manifest is empty")
    train_pool = [r for r in manifest.records if manifest.pools[r.id] == "train"]
    test = [r for r in manifest.records if manifest.pools[r.id] == "test"]
    rng = Rng(seed)
    order = list(range(len(train_pool)))
    rng.shuffle(order)
    n_train = int(len(train_pool) * 0.8)
    train = [train_pool[i] for i in order[:n_train]]
    val = [train_pool[i] for i in order[n_train:]]
    return train, val, test


def zoom_arrays(image: np.ndarray, mask: np.ndarray, scale: float):
    """Rescale both arrays about the center by nearest resampling; shrinking
    zero-pads, magnifying center-crops. Shapes are preserved and a binary
    mask stays binary."""
    side = image.shape[0]
    center = (side - 1) / 2.0
    coords = np.round(center + (np.arange(side) - center) / scale).astype(int)
    valid = (coords >= 0) & (coords < side)
    cc = np.clip(coords, 0, side - 1)
    window = np.outer(valid, valid)

    def remap(arr):
        return (arr[np.ix_(cc, cc)] * window).astype(np.float32)

    return remap(image), remap(mask)


def random_zoom(sample: SampleRecord, rng: Rng, p: float = 0.1) -> SampleRecord:
    """With probability p, rescale by a factor in [0.9, 1.1]; otherwise
    return the sample unchanged."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"random_zoom probability must be in [0,1], got {p}")
    if rng.random() >= p:
        return sample
    scale = 0.9 + 0.2 * rng.random()
    image, mask = zoom_arrays(sample.image, sample.mask, scale)
    return replace(sample, image=image, mask=mask)

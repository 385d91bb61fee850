"""Data provisioning: IDX ingestion, synthetic colored digits, partitioning, pools.

The synthetic generator draws seven-segment digit glyphs on solid colored
backgrounds. Each class c has an assigned background ``c mod B``; with
probability ``train_correlation`` a training sample uses it, otherwise the
background follows ``ood_policy``. This makes the background <-> label
shortcut explicit and tunable.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import crl

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

GLYPH_SIZE = 28
OOD_POLICIES = ("uniform", "anti")

# Saturated, mutually distinct colors. Every palette luminance stays below
# 0.45 so a bright glyph always stands out from its background.
PALETTE = np.array([
    [0.70, 0.00, 0.00],
    [0.00, 0.50, 0.00],
    [0.00, 0.00, 0.80],
    [0.45, 0.40, 0.00],
    [0.50, 0.00, 0.55],
    [0.00, 0.42, 0.48],
    [0.75, 0.30, 0.00],
    [0.30, 0.30, 0.30],
    [0.00, 0.00, 0.00],
    [0.32, 0.18, 0.45],
])

# seven-segment layout with 2 px strokes: a top, b upper-right, c lower-right,
# d bottom, e lower-left, f upper-left, g middle; (row0, row1, col0, col1) inclusive
_SEGMENTS = {
    "a": (4, 5, 8, 19),
    "b": (4, 14, 18, 19),
    "c": (13, 23, 18, 19),
    "d": (22, 23, 8, 19),
    "e": (13, 23, 8, 9),
    "f": (4, 14, 8, 9),
    "g": (13, 14, 8, 19),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: {message} (byte offset {offset})")


class PartitionError(RuntimeError):
    pass


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, C) in [0, 1]
    label: int
    background_id: Optional[int] = None
    uid: str = ""


@dataclass
class SpuriousSpec:
    num_classes: int = 10
    num_backgrounds: int = 10
    train_correlation: float = 0.95
    ood_policy: str = "uniform"

    def __post_init__(self):
        if not 1 <= self.num_classes <= 10:
            raise ValueError("num_classes must be in [1, 10]")
        if not 2 <= self.num_backgrounds <= len(PALETTE):
            raise ValueError(f"num_backgrounds must be in [2, {len(PALETTE)}]")
        if not 0.0 <= self.train_correlation <= 1.0:
            raise ValueError("train_correlation must lie in [0, 1]")
        if self.ood_policy not in OOD_POLICIES:
            raise ValueError(f"ood_policy must be one of {OOD_POLICIES}")

    def assigned_background(self, label: int) -> int:
        return label % self.num_backgrounds


@dataclass
class ClientShard:
    client_id: int
    samples: List[LabeledImage]
    background_pool: List[np.ndarray] = field(default_factory=list)
    # uid of the sample each pool entry was cut from
    pool_sources: List[str] = field(default_factory=list)
    # cached CRL output per sample: sharpened objects and masks
    objects: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.samples)


@dataclass
class LabeledBatch:
    x: np.ndarray  # (N, C, H, W)
    y: np.ndarray
    background_ids: np.ndarray  # -1 where unknown

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledImage]) -> "LabeledBatch":
        if len(samples) == 0:
            raise ValueError("need at least one sample")
        x = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
        y = np.array([s.label for s in samples], dtype=np.int64)
        bg = np.array([-1 if s.background_id is None else s.background_id for s in samples], dtype=np.int64)
        return cls(np.ascontiguousarray(x), y, bg)

    def __len__(self):
        return len(self.y)


def as_batch(samples) -> LabeledBatch:
    return samples if isinstance(samples, LabeledBatch) else LabeledBatch.from_samples(samples)


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


# -- IDX --------------------------------------------------------------------

def _read_idx(path, magic: int, ndims: int):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(path, 0, "truncated header")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndims
    if len(data) < head:
        raise IdxFormatError(path, len(data), "truncated dimension header")
    dims = struct.unpack(f">{ndims}I", data[4:head])
    size = int(np.prod(dims))
    if len(data) < head + size:
        raise IdxFormatError(path, len(data), f"truncated payload: expected {size} bytes after offset {head}")
    if len(data) > head + size:
        raise IdxFormatError(path, head + size, "trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> List[LabeledImage]:
    """Parse an IDX image/label file pair (u8 pixels scaled to [0, 1])."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(labels_path, 4, f"count mismatch: {len(images)} images vs {len(labels)} labels")
    out = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        out.append(LabeledImage(img[:, :, None].astype(np.float64) / 255.0, int(lab), None, f"idx:{i}"))
    return out


def write_idx(images_path, labels_path, images: np.ndarray, labels: Sequence[int]) -> None:
    """Inverse of ``load_idx`` for uint8 (N, H, W) arrays."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def colorize(samples: Sequence[LabeledImage], spec: SpuriousSpec, seed: int,
             correlation: Optional[float] = None, prefix: str = "color") -> List[LabeledImage]:
    """Put grayscale digits (e.g. from IDX) on palette backgrounds per ``spec``."""
    rng = np.random.default_rng(seed)
    rho = spec.train_correlation if correlation is None else correlation
    out = []
    for i, s in enumerate(samples):
        if s.label >= spec.num_classes:
            raise ValueError(f"label {s.label} >= num_classes {spec.num_classes}")
        bg = _draw_background(rng, spec, s.label, rho)
        g = s.image[:, :, :1]
        rgb = g + (1.0 - g) * PALETTE[bg]
        out.append(LabeledImage(np.clip(rgb, 0.0, 1.0), s.label, bg, f"{prefix}:{i}"))
    return out


# -- synthetic digits --------------------------------------------------------

def glyph(digit: int) -> np.ndarray:
    """28x28 binary seven-segment glyph for ``digit``."""
    g = np.zeros((GLYPH_SIZE, GLYPH_SIZE), dtype=bool)
    for seg in _DIGITS[digit]:
        r0, r1, c0, c1 = _SEGMENTS[seg]
        g[r0:r1 + 1, c0:c1 + 1] = True
    return g


def _draw_background(rng: np.random.Generator, spec: SpuriousSpec, label: int, rho: float) -> int:
    assigned = spec.assigned_background(label)
    if rng.random() < rho:
        return assigned
    if spec.ood_policy == "uniform":
        return int(rng.integers(spec.num_backgrounds))
    other = int(rng.integers(spec.num_backgrounds - 1))
    return other + (other >= assigned)


def render_digit(digit: int, background: int, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(-2, 3, size=2)
    g = np.roll(glyph(digit), (int(dy), int(dx)), axis=(0, 1))
    ink = np.clip(0.95 + rng.normal(0.0, 0.05, size=g.shape), 0.0, 1.0)
    img = np.broadcast_to(PALETTE[background], (GLYPH_SIZE, GLYPH_SIZE, 3)).copy()
    img[g] = ink[g][:, None]
    return img


def _generate(spec: SpuriousSpec, n_per_class: int, seed: int, rho: float, prefix: str) -> List[LabeledImage]:
    rng = np.random.default_rng(seed)
    out = []
    for c in range(spec.num_classes):
        for _ in range(n_per_class):
            bg = _draw_background(rng, spec, c, rho)
            out.append(LabeledImage(render_digit(c, bg, rng), c, bg, f"{prefix}:{seed}:{len(out)}"))
    return out


def synth_colored_digits(spec: SpuriousSpec, n_per_class: int, seed: int) -> List[LabeledImage]:
    """Training-distribution samples, class-major order, deterministic per seed."""
    return _generate(spec, n_per_class, seed, spec.train_correlation, "train")


def make_ood_test_split(spec: SpuriousSpec, n_per_class: int, seed: int) -> List[LabeledImage]:
    """Same glyphs, backgrounds drawn purely by ``spec.ood_policy``."""
    return _generate(spec, n_per_class, seed, 0.0, "ood")


# -- partitioning ------------------------------------------------------------

def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def dirichlet_partition(samples: Sequence[LabeledImage], num_clients: int, beta: float, seed: int,
                        max_retries: int = 100) -> List[ClientShard]:
    """Split each class over clients with proportions ~ Dirichlet(beta * 1_K).

    Draws are repeated (up to ``max_retries``) until every client holds at
    least one sample.
    """
    if num_clients < 2:
        raise ValueError("num_clients must be >= 2")
    if beta <= 0:
        raise ValueError("beta must be positive")
    labels = np.array([s.label for s in samples])
    classes = np.unique(labels)
    for c in classes:
        if (labels == c).sum() < num_clients:
            raise ValueError(f"class {c} has fewer than {num_clients} samples")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        assignment = np.empty(len(samples), dtype=int)
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            p = rng.dirichlet(np.full(num_clients, float(beta)))
            if not np.isfinite(p).all():
                break
            counts = _largest_remainder(p, len(idx))
            assignment[idx] = np.repeat(np.arange(num_clients), counts)
        else:
            sizes = np.bincount(assignment, minlength=num_clients)
            if sizes.min() >= 1:
                return [
                    ClientShard(k, [samples[i] for i in np.flatnonzero(assignment == k)])
                    for k in range(num_clients)
                ]
    raise PartitionError(
        f"could not give every one of {num_clients} clients a sample in {max_retries} Dirichlet draws (beta={beta})"
    )


def build_background_pool(shard: ClientShard, cfg: crl.CRLConfig = crl.CRLConfig()) -> ClientShard:
    """Run CRL on every sample of the shard and fill its background pool.

    Only this shard's own images are read. The sharpened objects and masks are
    cached on the returned shard for compositing.
    """
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has no samples")
    pool, sources, objects, masks = [], [], [], []
    for s in shard.samples:
        sharpened, region, obj = crl.process(s.image, cfg)
        pool.append(crl.fill_background(sharpened, region))
        sources.append(s.uid)
        objects.append(obj)
        masks.append(region.mask)
    return replace(shard, background_pool=pool, pool_sources=sources,
                   objects=np.stack(objects), masks=np.stack(masks))


# -- manifest ----------------------------------------------------------------

def manifest_records(samples: Iterable[LabeledImage], split: str, client_id: Optional[int] = None,
                     start: int = 0) -> List[Dict]:
    return [
        {"index": start + i, "label": int(s.label), "background_id": s.background_id,
         "split": split, "client_id": client_id}
        for i, s in enumerate(samples)
    ]


def write_manifest(path, records: Iterable[Dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

"""Bags of instances: generation, normalization, perturbation, on-disk formats.

A bag is a variable-size collection of d-dimensional feature vectors carrying
one binary label. Instance-level labels, when known (generated data), follow
the standard weak-supervision rule: a bag is positive iff it contains at
least one positive instance.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import substream

BAGS_MAGIC = b"MILB"
BAGS_VERSION = 1
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    """A binary file does not match its declared format."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def bag_label_from_instances(instance_labels) -> int:
    """Bag label from instance labels: 1 iff at least one instance is positive."""
    labels = np.asarray(instance_labels)
    if labels.size == 0:
        raise ValueError("empty bag")
    return int((labels == 1).any())


def _frozen_array(values, dtype) -> np.ndarray:
    out = np.array(values, dtype=dtype, order="C", copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Bag:
    """One sample: an (n, d) matrix whose rows are instances, plus a binary label.

    ``instance_labels`` is present only for generated data where ground truth
    is known; when present it must be consistent with ``label``.
    """

    id: int
    instances: np.ndarray
    label: int
    instance_labels: np.ndarray | None = None

    def __post_init__(self):
        inst = np.array(self.instances, dtype=np.float64, order="C", copy=True)
        if inst.ndim != 2 or inst.shape[0] < 1 or inst.shape[1] < 1:
            raise ValueError(f"bag {self.id}: instances must form a non-empty (n, d) matrix")
        if not np.isfinite(inst).all():
            raise ValueError(f"bag {self.id}: instances contain non-finite values")
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.id}: label must be 0 or 1, got {self.label!r}")
        inst.flags.writeable = False
        object.__setattr__(self, "instances", inst)
        if self.instance_labels is not None:
            il = np.array(self.instance_labels, dtype=np.uint8, copy=True)
            if il.shape != (inst.shape[0],):
                raise ValueError(f"bag {self.id}: instance_labels length {il.shape} != {inst.shape[0]}")
            if not np.isin(il, (0, 1)).all():
                raise ValueError(f"bag {self.id}: instance labels must be 0 or 1")
            if bag_label_from_instances(il) != self.label:
                raise ValueError(f"bag {self.id}: label inconsistent with instance labels")
            il.flags.writeable = False
            object.__setattr__(self, "instance_labels", il)

    @property
    def n_instances(self) -> int:
        return self.instances.shape[0]

    @property
    def dimension(self) -> int:
        return self.instances.shape[1]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature min and max used for [0, 1] scaling."""

    feature_min: np.ndarray
    feature_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "feature_min", _frozen_array(self.feature_min, np.float64))
        object.__setattr__(self, "feature_max", _frozen_array(self.feature_max, np.float64))


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for bag construction (synthetic clusters or image sampling)."""

    n_bags: int
    bag_size_min: int = 5
    bag_size_max: int = 10
    target_class: int = 9
    seed: int = 0
    positive_bag_fraction: float = 0.5  # synthetic mode only
    cluster_separation: float = 4.0     # synthetic mode only
    dimension: int = 10                 # synthetic mode only

    def validate(self) -> None:
        if self.n_bags < 2:
            raise ValueError(f"n_bags must be at least 2, got {self.n_bags}")
        if not 1 <= self.bag_size_min <= self.bag_size_max:
            raise ValueError(
                f"need 1 <= bag_size_min <= bag_size_max, got [{self.bag_size_min}, {self.bag_size_max}]"
            )
        if not 0.0 < self.positive_bag_fraction < 1.0:
            raise ValueError("positive_bag_fraction must lie in (0, 1)")
        if self.cluster_separation <= 0:
            raise ValueError("cluster_separation must be positive")
        if self.dimension < 1:
            raise ValueError("dimension must be at least 1")


@dataclass(frozen=True)
class BagDataset:
    """A collection of bags sharing one instance dimension."""

    bags: tuple[Bag, ...]
    dimension: int
    normalization_stats: NormalizationStats | None = None
    seed: int | None = None
    generation: GenerationConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        if not self.bags:
            raise ValueError("dataset must contain at least one bag")
        for bag in self.bags:
            if bag.dimension != self.dimension:
                raise ValueError(f"bag {bag.id}: dimension {bag.dimension} != dataset dimension {self.dimension}")
        ids = [bag.id for bag in self.bags]
        if len(set(ids)) != len(ids):
            raise ValueError("bag ids must be unique")

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    @property
    def labels(self) -> np.ndarray:
        return np.array([bag.label for bag in self.bags], dtype=np.int64)


def as_instance_matrix(bag) -> np.ndarray:
    """The (n, d) instance matrix of a bag, or a bare matrix passed through."""
    x = np.asarray(getattr(bag, "instances", bag), dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an (n, d) instance matrix, got shape {x.shape}")
    return x


def generate_synthetic_dataset(config: GenerationConfig) -> BagDataset:
    """Two-Gaussian synthetic bags with known instance labels.

    Negative instances come from a unit Gaussian at the origin, positive
    instances from a unit Gaussian offset by ``cluster_separation`` along
    every axis. Each positive bag holds exactly one positive instance, so
    attention has a single trigger to find. Deterministic for a fixed seed.
    """
    config.validate()
    rng = substream(config.seed, "data")
    n_pos = int(round(config.n_bags * config.positive_bag_fraction))
    n_pos = min(max(n_pos, 1), config.n_bags - 1)
    labels = np.zeros(config.n_bags, dtype=np.int64)
    labels[:n_pos] = 1
    rng.shuffle(labels)
    sizes = rng.integers(config.bag_size_min, config.bag_size_max + 1, size=config.n_bags)
    bags = []
    for i in range(config.n_bags):
        n = int(sizes[i])
        x = rng.standard_normal((n, config.dimension))
        inst_labels = np.zeros(n, dtype=np.uint8)
        if labels[i] == 1:
            pos_at = int(rng.integers(n))
            x[pos_at] += config.cluster_separation
            inst_labels[pos_at] = 1
        bags.append(Bag(id=i, instances=x, label=int(labels[i]), instance_labels=inst_labels))
    return BagDataset(bags=tuple(bags), dimension=config.dimension, seed=config.seed, generation=config)


def build_image_bags(images, labels, config: GenerationConfig) -> BagDataset:
    """Assemble bags by sampling images; presence of the target class sets the label.

    Half the bags are built positive (one target-class image is always
    included, the rest drawn from the full pool) and half negative (drawn from
    non-target images only). Sampling is with replacement.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 2:
        raise ValueError(f"images must be flattened to (count, d), got shape {images.shape}")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"images ({images.shape[0]}) and labels ({labels.shape[0]}) counts differ")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError("pixel values must already be scaled to [0, 1]")
    config.validate()

    rng = substream(config.seed, "data")
    target_pool = np.flatnonzero(labels == config.target_class)
    other_pool = np.flatnonzero(labels != config.target_class)
    n_pos = config.n_bags // 2
    is_positive = np.zeros(config.n_bags, dtype=bool)
    is_positive[:n_pos] = True
    rng.shuffle(is_positive)
    if is_positive.any() and target_pool.size == 0:
        raise ValueError(f"positive bag required but the pool has no image of class {config.target_class}")
    if (~is_positive).any() and other_pool.size == 0:
        raise ValueError(f"negative bag required but the pool only has class {config.target_class}")

    sizes = rng.integers(config.bag_size_min, config.bag_size_max + 1, size=config.n_bags)
    bags = []
    for i in range(config.n_bags):
        n = int(sizes[i])
        if is_positive[i]:
            forced = target_pool[int(rng.integers(target_pool.size))]
            rest = rng.integers(images.shape[0], size=n - 1)
            idx = np.concatenate([[forced], rest]).astype(np.int64)
            rng.shuffle(idx)
        else:
            idx = other_pool[rng.integers(other_pool.size, size=n)]
        inst_labels = (labels[idx] == config.target_class).astype(np.uint8)
        bags.append(
            Bag(
                id=i,
                instances=images[idx],
                label=bag_label_from_instances(inst_labels),
                instance_labels=inst_labels,
            )
        )
    return BagDataset(bags=tuple(bags), dimension=images.shape[1], seed=config.seed, generation=config)


def _read_exact(f, count: int, path, what: str) -> bytes:
    start = f.tell()
    data = f.read(count)
    if len(data) != count:
        raise FormatError(path, start, f"truncated {what}: wanted {count} bytes, got {len(data)}")
    return data


def load_idx_images(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label file pair into flat [0, 1] vectors and class labels.

    Both files are big-endian: images carry magic 0x00000803 and three
    dimension words, labels carry magic 0x00000801 and one count word.
    Raw bytes are scaled by 1/255.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(images_path, 0, f"expected image magic 0x{IDX_IMAGE_MAGIC:08x}, got 0x{magic:08x}")
        pixels = np.frombuffer(_read_exact(f, count * rows * cols, images_path, "pixel data"), dtype=np.uint8)
        if f.read(1):
            raise FormatError(images_path, 16 + pixels.size, "trailing data after pixel block")
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(labels_path, 0, f"expected label magic 0x{IDX_LABEL_MAGIC:08x}, got 0x{magic:08x}")
        raw = _read_exact(f, label_count, labels_path, "label data")
        if f.read(1):
            raise FormatError(labels_path, 8 + label_count, "trailing data after label block")
    if label_count != count:
        raise FormatError(labels_path, 4, f"count mismatch: {count} images vs {label_count} labels")
    images = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return images, np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def save_idx_images(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write raw uint8 images of shape (count, rows, cols) as an IDX file pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    if images.ndim != 3:
        raise ValueError(f"images must have shape (count, rows, cols), got {images.shape}")
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels counts differ")
    count, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols))
        f.write(images.tobytes(order="C"))
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, count))
        f.write(labels.astype(np.uint8).tobytes())


def normalize(dataset: BagDataset) -> BagDataset:
    """Min-max scale every feature to [0, 1] over all instances of all bags.

    Constant features map to 0. The stats used are kept on the returned
    dataset so the same scaling can be replayed.
    """
    stacked = np.concatenate([bag.instances for bag in dataset.bags], axis=0)
    fmin = stacked.min(axis=0)
    fmax = stacked.max(axis=0)
    span = fmax - fmin
    safe_span = np.where(span > 0, span, 1.0)
    bags = tuple(
        Bag(bag.id, (bag.instances - fmin) / safe_span, bag.label, bag.instance_labels)
        for bag in dataset.bags
    )
    return BagDataset(
        bags=bags,
        dimension=dataset.dimension,
        normalization_stats=NormalizationStats(fmin, fmax),
        seed=dataset.seed,
        generation=dataset.generation,
    )


def apply_perturbation(bag: Bag, epsilon, clip_unit: bool = False) -> Bag:
    """Add one perturbation vector to every instance of the bag.

    ``epsilon`` may be a bare vector or any object with an ``epsilon``
    attribute. Values are not clipped unless ``clip_unit`` is set (image
    export only); plain addition is what the attacks assume.
    """
    eps = np.asarray(getattr(epsilon, "epsilon", epsilon), dtype=np.float64)
    if eps.shape != (bag.dimension,):
        raise ValueError(f"perturbation shape {eps.shape} does not match bag dimension {bag.dimension}")
    perturbed = bag.instances + eps
    if clip_unit:
        perturbed = np.clip(perturbed, 0.0, 1.0)
    return Bag(bag.id, perturbed, bag.label, bag.instance_labels)


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".manifest.json")


def save_bags(dataset: BagDataset, path) -> Path:
    """Write the binary bag container plus its JSON manifest; returns the container path."""
    path = Path(path)
    if path.suffix != ".bags":
        path = path.with_suffix(".bags")
    buf = bytearray()
    buf += BAGS_MAGIC
    buf += struct.pack("<III", BAGS_VERSION, len(dataset.bags), dataset.dimension)
    for bag in dataset.bags:
        has_il = bag.instance_labels is not None
        buf += struct.pack("<QBBI", bag.id, bag.label, int(has_il), bag.n_instances)
        buf += bag.instances.astype("<f8").tobytes(order="C")
        if has_il:
            buf += bag.instance_labels.tobytes()
    path.write_bytes(bytes(buf))

    stats = dataset.normalization_stats
    manifest = {
        "format": "MILB",
        "version": BAGS_VERSION,
        "n_bags": len(dataset.bags),
        "dimension": dataset.dimension,
        "seed": dataset.seed,
        "generation_config": dataclasses.asdict(dataset.generation) if dataset.generation else None,
        "normalization_stats": (
            {"feature_min": stats.feature_min.tolist(), "feature_max": stats.feature_max.tolist()}
            if stats
            else None
        ),
    }
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bags(path) -> BagDataset:
    """Read a bag container written by :func:`save_bags` (manifest optional)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != BAGS_MAGIC:
        raise FormatError(path, 0, f"expected magic {BAGS_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 16:
        raise FormatError(path, 4, "truncated header")
    version, n_bags, dim = struct.unpack_from("<III", raw, 4)
    if version != BAGS_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    offset = 16
    bags = []
    for _ in range(n_bags):
        if offset + 14 > len(raw):
            raise FormatError(path, offset, "truncated bag header")
        bag_id, label, has_il, n = struct.unpack_from("<QBBI", raw, offset)
        offset += 14
        nbytes = n * dim * 8
        if offset + nbytes > len(raw):
            raise FormatError(path, offset, "truncated instance block")
        inst = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=offset).reshape(n, dim)
        offset += nbytes
        inst_labels = None
        if has_il:
            if offset + n > len(raw):
                raise FormatError(path, offset, "truncated instance-label block")
            inst_labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset)
            offset += n
        bags.append(Bag(id=bag_id, instances=inst, label=int(label), instance_labels=inst_labels))
    if offset != len(raw):
        raise FormatError(path, offset, "trailing data after final bag")

    stats = None
    seed = None
    generation = None
    mpath = _manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        seed = manifest.get("seed")
        if manifest.get("normalization_stats"):
            stats = NormalizationStats(
                manifest["normalization_stats"]["feature_min"],
                manifest["normalization_stats"]["feature_max"],
            )
        if manifest.get("generation_config"):
            generation = GenerationConfig(**manifest["generation_config"])
    return BagDataset(bags=tuple(bags), dimension=dim, normalization_stats=stats, seed=seed, generation=generation)

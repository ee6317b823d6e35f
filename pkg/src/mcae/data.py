"""IDX loading, splits, augmentation, batching and a synthetic rotation dataset."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DEFAULT_DATA_DIR = "/root/data/mnist"
AUGMENT_POLICIES = ("none", "pad4_randcrop", "pad4_randcrop+hflip")


class DataError(Exception):
    """Base class for dataset problems (exit code 2 at the command line)."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str = "train"
    num_classes: int = 10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} / labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes, dict(self.meta))


def _read(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Decode an IDX image/label pair; pixels are scaled by 1/255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.exists():
            raise DataError(f"missing data file: {p}")
    imgs = _parse_idx(_read(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read(labels_path), LABELS_MAGIC, 1, labels_path)
    if len(imgs) != len(labels):
        raise CountMismatchError(f"{images_path} has {len(imgs)} images but {labels_path} has {len(labels)} labels")
    images = (imgs.astype(np.float32) / np.float32(255.0))[:, None]
    labels = labels.astype(np.int64)
    return Dataset(images, labels, split, max(10, int(labels.max()) + 1 if labels.size else 10))


def _find(data_dir: Path, kind: str, fmt: str) -> Path:
    # both "train-images-idx3-ubyte" and "train-images.idx3-ubyte" are in circulation
    stem = f"{kind}-{fmt}"
    for name in (stem, f"{kind}.{fmt}"):
        for suffix in ("", ".gz"):
            p = data_dir / (name + suffix)
            if p.exists():
                return p
    raise DataError(f"no {stem} file (raw or .gz) under {data_dir}")


def resolve_data_dir(data_dir=None) -> Path:
    env = os.environ.get("MCAE_DATA_DIR")
    return Path(env or data_dir or DEFAULT_DATA_DIR)


def load_mnist(data_dir=None, split: str = "train") -> Dataset:
    d = resolve_data_dir(data_dir)
    prefix = "train" if split == "train" else "t10k"
    return load_idx(_find(d, f"{prefix}-images", "idx3-ubyte"), _find(d, f"{prefix}-labels", "idx1-ubyte"),
                    "train" if split == "train" else "test")


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-d images or 1-d labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = IMAGES_MAGIC if array.ndim == 3 else LABELS_MAGIC
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes())


def save_dataset(path, ds: Dataset) -> None:
    """Freeze a dataset in the checkpoint tensor-table format."""
    from .checkpoint import save_checkpoint
    text = f"split={ds.split}\nnum_classes={ds.num_classes}\n"
    tensors = {"images": ds.images.astype(np.float32), "labels": ds.labels.astype(np.float32)}
    tensors.update({f"meta.{k}": np.asarray(v, dtype=np.float32) for k, v in ds.meta.items()})
    save_checkpoint(path, text, tensors)


def load_dataset(path) -> Dataset:
    from .checkpoint import load_checkpoint
    text, t = load_checkpoint(path)
    kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    meta = {k[5:]: v.astype(np.int64) for k, v in t.items() if k.startswith("meta.")}
    return Dataset(t["images"], t["labels"].astype(np.int64), kv.get("split", "train"),
                   int(kv.get("num_classes", 10)), meta)


def split_train_val(ds: Dataset, fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    N = len(ds)
    if N < 2:
        raise DataError(f"need at least 2 examples to split, got {N}")
    n_val = min(max(int(round(fraction * N)), 1), N - 1)
    perm = np.random.default_rng(seed).permutation(N)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return ds.subset(train_idx, "train"), ds.subset(val_idx, "val")


def stratified_subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """``n`` examples with classes as balanced as possible; deterministic in ``seed``."""
    if n >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    per = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.num_classes)]
    take, k = [], 0
    while len(take) < n:
        for idx in per:
            if k < len(idx) and len(take) < n:
                take.append(idx[k])
        k += 1
    return ds.subset(np.sort(np.array(take)))


def augment(image: np.ndarray, policy: str, rng: np.random.Generator, offset=None, flip=None) -> np.ndarray:
    """Pad by 4 with zeros, crop back at a random offset, optionally mirror.

    ``offset``/``flip`` override the random draws (used by tests).
    """
    if policy not in AUGMENT_POLICIES:
        raise ValueError(f"unknown augment policy {policy!r}; choose from {AUGMENT_POLICIES}")
    if policy == "none":
        return image
    C, H, W = image.shape
    padded = np.zeros((C, H + 8, W + 8), dtype=image.dtype)
    padded[:, 4:4 + H, 4:4 + W] = image
    dy, dx = offset if offset is not None else rng.integers(0, 9, size=2)
    out = padded[:, dy:dy + H, dx:dx + W]
    if policy.endswith("hflip"):
        do_flip = flip if flip is not None else bool(rng.integers(0, 2))
        if do_flip:
            out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def iterate_batches(ds: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None
                    ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(indices, images, labels)``; shuffled when ``rng`` is given, keeps the last short batch."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for s in range(0, len(ds), batch_size):
        idx = order[s:s + batch_size]
        yield idx, ds.images[idx], ds.labels[idx]


# synthetic viewpoint data

TRAIN_ANGLES = (300, 320, 340, 0, 20, 40)
NOVEL_ANGLES = tuple(range(60, 281, 20))
SHAPE_CLASSES = ("square", "triangle", "L", "T", "ring")


@dataclass(frozen=True)
class ViewpointSpec:
    classes: tuple[str, ...] = SHAPE_CLASSES
    train_angles: tuple[int, ...] = TRAIN_ANGLES
    novel_angles: tuple[int, ...] = NOVEL_ANGLES
    image_size: int = 28
    jitter_deg: float = 4.0
    jitter_shift: float = 1.0
    jitter_scale: float = 0.08

    def __post_init__(self):
        overlap = {a % 360 for a in self.train_angles} & {a % 360 for a in self.novel_angles}
        if overlap:
            raise ValueError(f"train and novel angle sets overlap at {sorted(overlap)}")
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")


def render_shape(name: str, angle_deg: float, size: int = 28, scale: float = 1.0,
                 shift=(0.0, 0.0)) -> np.ndarray:
    """Rotate a glyph counter-clockwise by ``angle_deg`` about the image centre: [1, size, size] in [0, 1].

    Rendering samples the analytic glyph by inverse-mapping every pixel, with
    4x4 supersampling for anti-aliasing.
    """
    ss = 4
    n = size * ss
    c = (size - 1) / 2.0
    coords = (np.arange(n) + 0.5) / ss - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    th = np.deg2rad(angle_deg)
    dy, dx = yy - c - shift[0], xx - c - shift[1]
    # inverse rotation to template space
    ux = np.cos(th) * dx - np.sin(th) * dy
    uy = np.sin(th) * dx + np.cos(th) * dy
    half = size * 0.35 * scale
    x, y = ux / half, uy / half
    inside = _glyph(name, x, y)
    img = inside.reshape(size, ss, size, ss).mean(axis=(1, 3))
    return img.astype(np.float32)[None]


def _glyph(name: str, x, y):
    if name == "square":
        return (np.abs(x) <= 0.5) & (np.abs(y) <= 0.5)
    if name == "triangle":
        return (y <= 0.55) & (y >= 1.9 * np.abs(x) - 1.0) & (np.abs(x) <= 0.6)
    if name == "L":
        return ((np.abs(x + 0.3) <= 0.15) & (np.abs(y) <= 0.6)) | ((np.abs(y - 0.45) <= 0.15) & (x >= -0.45) & (x <= 0.5))
    if name == "T":
        return ((np.abs(y + 0.45) <= 0.15) & (np.abs(x) <= 0.6)) | ((np.abs(x) <= 0.15) & (y >= -0.45) & (y <= 0.6))
    if name == "ring":
        r2 = x ** 2 + y ** 2
        return (r2 <= 0.6 ** 2) & (r2 >= 0.35 ** 2) & ~((x > 0.25) & (np.abs(y) < 0.15))
    raise ValueError(f"unknown shape {name!r}")


def make_viewpoint_dataset(spec: ViewpointSpec, n_per_cell: int, rng) -> tuple[Dataset, Dataset, Dataset]:
    """(train_familiar, test_familiar, test_novel).

    Every (class, angle) cell gets ``n_per_cell`` jittered instances; familiar
    test instances are fresh draws at the training angles.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    def cell_batch(angles):
        imgs, labels, thetas = [], [], []
        for ci, name in enumerate(spec.classes):
            for ang in angles:
                for _ in range(n_per_cell):
                    th = ang + rng.uniform(-spec.jitter_deg, spec.jitter_deg)
                    sc = 1.0 + rng.uniform(-spec.jitter_scale, spec.jitter_scale)
                    sh = rng.uniform(-spec.jitter_shift, spec.jitter_shift, size=2)
                    imgs.append(render_shape(name, th, spec.image_size, sc, tuple(sh)))
                    labels.append(ci)
                    thetas.append(ang)
        return np.stack(imgs), np.array(labels, dtype=np.int64), np.array(thetas)

    out = []
    for split, angles in (("train", spec.train_angles), ("test", spec.train_angles), ("test", spec.novel_angles)):
        imgs, labels, thetas = cell_batch(angles)
        out.append(Dataset(imgs, labels, split, len(spec.classes), {"angles": thetas}))
    return tuple(out)

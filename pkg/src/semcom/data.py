"""Dataset ingestion: standard published formats plus a synthetic digit corpus.

Readers cover MNIST-style IDX files (plain or gzipped), the CIFAR-10 python
pickle batches, SVHN .mat files, and Intel-style class folders of images.
When no corpus is available offline, ``ensure_synthetic_corpus`` writes a
deterministic digit dataset in MNIST IDX layout and the same reader loads it.
"""

from __future__ import annotations

import gzip
import os
import pickle
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import DatasetConfig

DATA_ROOT_ENV = "SEMCOM_DATA_ROOT"


class DatasetError(ValueError):
    pass


@dataclass
class SplitData:
    images: torch.Tensor  # (N, C, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"inconsistent split: images {tuple(self.images.shape)}, labels {tuple(self.labels.shape)}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "SplitData":
        idx = torch.as_tensor(indices, dtype=torch.int64)
        return SplitData(self.images[idx], self.labels[idx], self.num_classes)


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (magic 0x08xx), transparently handling .gz."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            magic = struct.unpack(">I", fh.read(4))[0]
            ndim = magic & 0xFF
            if magic >> 8 != 0x000008:
                raise DatasetError(f"{path} is not an unsigned-byte IDX file (magic {magic:#x})")
            shape = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
            data = np.frombuffer(fh.read(), dtype=np.uint8)
    except (OSError, struct.error) as exc:
        raise DatasetError(f"corrupt dataset file {path}: {exc}") from exc
    if data.size != int(np.prod(shape)):
        raise DatasetError(f"corrupt dataset file {path}: payload does not match header {shape}")
    return data.reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x00000800 | array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# 5x7 pixel font, one glyph per digit
_GLYPHS = [
    "01110 10001 10011 10101 11001 10001 01110",
    "00100 01100 00100 00100 00100 00100 01110",
    "01110 10001 00001 00110 01000 10000 11111",
    "11111 00010 00100 00010 00001 10001 01110",
    "00010 00110 01010 10010 11111 00010 00010",
    "11111 10000 11110 00001 00001 10001 01110",
    "00111 01000 10000 11110 10001 10001 01110",
    "11111 00001 00010 00100 01000 01000 01000",
    "01110 10001 10001 01110 10001 10001 01110",
    "01110 10001 10001 01111 00001 00010 11100",
]


def digit_glyphs() -> np.ndarray:
    """(10, 7, 5) binary masks."""
    out = np.zeros((10, 7, 5), dtype=np.uint8)
    for digit, spec in enumerate(_GLYPHS):
        for r, row in enumerate(spec.split()):
            out[digit, r] = [int(ch) for ch in row]
    return out


def generate_digit_corpus(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic digit images: jittered, scaled, noisy glyph renderings."""
    rng = np.random.default_rng(seed)
    glyphs = digit_glyphs()
    images = np.zeros((n, size, size), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n)
    scales = rng.integers(2, 4, size=n)  # 2x or 3x glyph upscaling
    intensities = rng.uniform(0.55, 1.0, size=n)
    for i in range(n):
        s = int(scales[i])
        glyph = np.kron(glyphs[labels[i]], np.ones((s, s), dtype=np.uint8))
        gh, gw = glyph.shape
        oy = rng.integers(1, size - gh)
        ox = rng.integers(1, size - gw)
        canvas = rng.normal(0.0, 0.04, size=(size, size)).clip(0, 0.15)
        patch = glyph * intensities[i] * rng.uniform(0.85, 1.0, size=glyph.shape)
        canvas[oy : oy + gh, ox : ox + gw] += patch
        images[i] = (canvas.clip(0.0, 1.0) * 255).round().astype(np.uint8)
    return images, labels.astype(np.int64)


_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def ensure_synthetic_corpus(root: Path, n_train: int, n_test: int, seed: int) -> Path:
    """Write the synthetic digit corpus in MNIST IDX layout if absent."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if all((root / name).exists() for name in _MNIST_FILES.values()):
        return root
    train_images, train_labels = generate_digit_corpus(n_train, seed=seed)
    test_images, test_labels = generate_digit_corpus(n_test, seed=seed + 1)
    write_idx(root / _MNIST_FILES["train_images"], train_images)
    write_idx(root / _MNIST_FILES["train_labels"], train_labels)
    write_idx(root / _MNIST_FILES["test_images"], test_images)
    write_idx(root / _MNIST_FILES["test_labels"], test_labels)
    return root


def _find_idx_file(candidates: list[Path], stem: str) -> Path:
    for base in candidates:
        for name in (stem, stem + ".gz"):
            path = base / name
            if path.exists():
                return path
    raise DatasetError(f"dataset file not found: {candidates[0] / stem} (also tried .gz and {len(candidates)} dirs)")


def _load_mnist_layout(root: Path) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    candidates = [root, root / "mnist", root / "MNIST" / "raw"]
    train_x = read_idx(_find_idx_file(candidates, _MNIST_FILES["train_images"]))
    train_y = read_idx(_find_idx_file(candidates, _MNIST_FILES["train_labels"]))
    test_x = read_idx(_find_idx_file(candidates, _MNIST_FILES["test_images"]))
    test_y = read_idx(_find_idx_file(candidates, _MNIST_FILES["test_labels"]))
    return (train_x[:, None], train_y), (test_x[:, None], test_y)


def _load_cifar10(root: Path):
    base = root / "cifar-10-batches-py"
    xs, ys = [], []
    for i in range(1, 6):
        path = base / f"data_batch_{i}"
        if not path.exists():
            raise DatasetError(f"dataset file not found: {path}")
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        xs.append(batch[b"data"])
        ys.extend(batch[b"labels"])
    test_path = base / "test_batch"
    if not test_path.exists():
        raise DatasetError(f"dataset file not found: {test_path}")
    with open(test_path, "rb") as fh:
        test = pickle.load(fh, encoding="bytes")
    train_x = np.concatenate(xs).reshape(-1, 3, 32, 32)
    test_x = test[b"data"].reshape(-1, 3, 32, 32)
    return (train_x, np.asarray(ys)), (test_x, np.asarray(test[b"labels"]))


def _load_svhn(root: Path):
    from scipy.io import loadmat

    base = root / "svhn"
    out = []
    for split in ("train", "test"):
        path = base / f"{split}_32x32.mat"
        if not path.exists():
            raise DatasetError(f"dataset file not found: {path}")
        mat = loadmat(path)
        x = np.transpose(mat["X"], (3, 2, 0, 1))  # (N, C, H, W)
        y = mat["y"].reshape(-1).astype(np.int64) % 10  # label 10 means digit 0
        out.append((x, y))
    return out[0], out[1]


def _load_intel(root: Path, side: int = 32):
    from PIL import Image

    base = root / "intel"
    out = []
    for split in ("seg_train", "seg_test"):
        split_dir = base / split
        if not split_dir.exists():
            raise DatasetError(f"dataset directory not found: {split_dir}")
        classes = sorted(d.name for d in split_dir.iterdir() if d.is_dir())
        if not classes:
            raise DatasetError(f"no class folders under {split_dir}")
        xs, ys = [], []
        for label, cls in enumerate(classes):
            for path in sorted((split_dir / cls).glob("*")):
                if path.suffix.lower() not in (".jpg", ".jpeg", ".png"):
                    continue
                with Image.open(path) as img:
                    arr = np.asarray(img.convert("RGB").resize((side, side)), dtype=np.uint8)
                xs.append(arr.transpose(2, 0, 1))
                ys.append(label)
        out.append((np.stack(xs), np.asarray(ys)))
    return out[0], out[1]


def _to_split(x: np.ndarray, y: np.ndarray, num_classes: int) -> SplitData:
    images = torch.from_numpy(np.array(x, dtype=np.uint8, copy=True)).float() / 255.0
    labels = torch.from_numpy(np.array(y, dtype=np.int64, copy=True))
    return SplitData(images, labels, num_classes)


def resolve_root(cfg: DatasetConfig) -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, cfg.root))


def load_dataset(cfg: DatasetConfig, seed: int) -> tuple[SplitData, SplitData, SplitData]:
    """Load (train, val, test); pixel range [0, 1]; split deterministic in seed."""
    root = resolve_root(cfg)
    if cfg.name == "synthetic":
        corpus = ensure_synthetic_corpus(root / "synthetic", cfg.synthetic_train, cfg.synthetic_test, seed=seed)
        (train_x, train_y), (test_x, test_y) = _load_mnist_layout(corpus)
        num_classes = 10
    elif cfg.name == "mnist":
        (train_x, train_y), (test_x, test_y) = _load_mnist_layout(root)
        num_classes = 10
    elif cfg.name == "cifar10":
        (train_x, train_y), (test_x, test_y) = _load_cifar10(root)
        num_classes = 10
    elif cfg.name == "svhn":
        (train_x, train_y), (test_x, test_y) = _load_svhn(root)
        num_classes = 10
    elif cfg.name == "intel":
        (train_x, train_y), (test_x, test_y) = _load_intel(root)
        num_classes = int(train_y.max()) + 1
    else:  # unreachable, DatasetConfig validates
        raise DatasetError(f"unknown dataset {cfg.name!r}")

    full_train = _to_split(train_x, train_y, num_classes)
    test = _to_split(test_x, test_y, num_classes)

    gen = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(full_train), generator=gen)
    val_size = min(cfg.val_size, len(full_train) // 5)
    val = full_train.subset(perm[:val_size])
    train_idx = perm[val_size:]
    if cfg.train_limit is not None:
        train_idx = train_idx[: cfg.train_limit]
    train = full_train.subset(train_idx)
    return train, val, test


def augment_batch(
    images: torch.Tensor,
    rng: torch.Generator,
    flips: bool = False,
    max_rotate_deg: float = 10.0,
    prob: float = 0.5,
) -> torch.Tensor:
    """Random horizontal flips (where enabled) and slight rotations."""
    b = images.shape[0]
    out = images
    if flips:
        mask = torch.rand(b, generator=rng) < 0.5
        if bool(mask.any()):
            out = out.clone()
            out[mask] = out[mask].flip(-1)
    do_rot = torch.rand(b, generator=rng) < prob
    if bool(do_rot.any()):
        angles = torch.zeros(b)
        angles[do_rot] = (torch.rand(int(do_rot.sum()), generator=rng) * 2 - 1) * (max_rotate_deg * torch.pi / 180.0)
        cos, sin = torch.cos(angles), torch.sin(angles)
        theta = torch.zeros(b, 2, 3)
        theta[:, 0, 0], theta[:, 0, 1] = cos, -sin
        theta[:, 1, 0], theta[:, 1, 1] = sin, cos
        grid = F.affine_grid(theta, list(out.shape), align_corners=False)
        out = F.grid_sample(out, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out

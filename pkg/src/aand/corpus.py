"""Toy corpus generation, persistence and manifest handling."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasynth
from .tensorio import FormatError, atomic_write, load_tensor, save_tensor, write_pgm

MANIFEST_HEADER = ("index", "split", "label", "image-path", "mask-path")


def derive_seed(root: int, *keys: int) -> int:
    """Deterministic 31-bit seed from a root seed and integer keys."""
    return int(np.random.SeedSequence([root, *keys]).generate_state(1)[0] >> 1)


@dataclass
class CorpusConfig:
    classes: tuple[str, ...] = datasynth.NORMAL_FAMILIES
    n_train: int = 200
    n_test_normal: int = 50
    n_test_abnormal: int = 50
    image_size: int = 64
    channels: int = 1
    perlin_periods: tuple[int, ...] = (8, 16)
    seed: int = 0


@dataclass
class ClassCorpus:
    name: str
    train: np.ndarray
    test_images: np.ndarray
    test_masks: np.ndarray
    test_labels: np.ndarray
    test_seeds: list[int] = field(default_factory=list)

    @property
    def test_normal(self) -> np.ndarray:
        return self.test_images[self.test_labels == 0]

    @property
    def test_abnormal(self) -> np.ndarray:
        return self.test_images[self.test_labels == 1]


def train_seed(cfg: CorpusConfig, class_idx: int, i: int) -> int:
    return derive_seed(cfg.seed, class_idx, 0, i)


def test_seed(cfg: CorpusConfig, class_idx: int, i: int) -> int:
    return derive_seed(cfg.seed, class_idx, 1, i)


def make_class_corpus(cfg: CorpusConfig, name: str) -> ClassCorpus:
    class_idx = datasynth.NORMAL_FAMILIES.index(name)
    gen = lambda s: datasynth.gen_normal_texture(name, s, cfg.image_size, cfg.channels)  # noqa: E731
    train = np.stack([gen(train_seed(cfg, class_idx, i)) for i in range(cfg.n_train)])
    images, masks, labels, seeds = [], [], [], []
    n_test = cfg.n_test_normal + cfg.n_test_abnormal
    for i in range(n_test):
        s = test_seed(cfg, class_idx, i)
        normal = gen(s)
        if i < cfg.n_test_normal:
            images.append(normal)
            masks.append(np.zeros(normal.shape[-2:], dtype=np.uint8))
            labels.append(0)
        else:
            sample = datasynth.make_sample(normal, s, cfg.perlin_periods)
            images.append(sample.corrupted)
            masks.append(sample.mask)
            labels.append(1)
        seeds.append(s)
    return ClassCorpus(name, train, np.stack(images), np.stack(masks), np.array(labels), seeds)


def make_corpus(cfg: CorpusConfig) -> dict[str, ClassCorpus]:
    return {name: make_class_corpus(cfg, name) for name in cfg.classes}


def write_class_corpus(out_dir, corpus: ClassCorpus, export_pgm: bool = False) -> Path:
    """Write tensors plus ``manifest.csv`` under ``out_dir/<class>``; returns the manifest path."""
    root = Path(out_dir) / corpus.name
    rows = []
    index = 0
    for i, img in enumerate(corpus.train):
        rel = f"train/{i:04d}.tns"
        save_tensor(root / rel, img)
        rows.append((index, "train", 0, rel, "-"))
        index += 1
    for i, (img, mask, label) in enumerate(zip(corpus.test_images, corpus.test_masks, corpus.test_labels)):
        rel = f"test/{i:04d}.tns"
        mrel = f"test/{i:04d}_mask.tns"
        save_tensor(root / rel, img)
        save_tensor(root / mrel, mask.astype(np.float32))
        if export_pgm:
            write_pgm(root / f"test/{i:04d}.pgm", datasynth.to_gray(img))
        rows.append((index, "test", int(label), rel, mrel))
        index += 1
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    writer.writerows(rows)
    atomic_write(root / "manifest.csv", buf.getvalue().encode())
    return root / "manifest.csv"


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        return list(reader)


def load_class_corpus(root, name: str) -> ClassCorpus:
    base = Path(root) / name
    rows = read_manifest(base / "manifest.csv")
    train = [load_tensor(base / r["image-path"]) for r in rows if r["split"] == "train"]
    test = [r for r in rows if r["split"] == "test"]
    if not train:
        raise FormatError(f"{base}: corpus has no training images")
    images = np.stack([load_tensor(base / r["image-path"]) for r in test]) if test else np.empty((0,))
    masks = np.stack([load_tensor(base / r["mask-path"]).astype(np.uint8) for r in test]) if test else np.empty((0,))
    labels = np.array([int(r["label"]) for r in test])
    return ClassCorpus(name, np.stack(train), images, masks, labels)

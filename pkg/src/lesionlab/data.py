"""Synthetic captioned-shapes dataset.

Each category is one colored shape drawn at a jittered position and size on a
gray noise background. Captions follow the template ``"a <color> <shape>"``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PROMPT = "Describe the object in this image"

# (category = shape word, color word, base rgb)
CATEGORIES = (
    ("circle", "red", (0.90, 0.10, 0.10)),
    ("square", "green", (0.10, 0.80, 0.20)),
    ("triangle", "blue", (0.15, 0.25, 0.95)),
    ("diamond", "yellow", (0.95, 0.90, 0.10)),
    ("ring", "purple", (0.60, 0.20, 0.80)),
    ("cross", "orange", (1.00, 0.55, 0.05)),
    ("plus", "cyan", (0.10, 0.90, 0.90)),
    ("bar", "white", (0.97, 0.97, 0.97)),
    ("frame", "pink", (1.00, 0.50, 0.75)),
    ("crescent", "brown", (0.55, 0.30, 0.10)),
)
CATEGORY_NAMES = tuple(c[0] for c in CATEGORIES)
COLOR_OF = {c[0]: c[1] for c in CATEGORIES}
SPLITS = ("train", "rank", "val")


@dataclass
class SyntheticSample:
    index: int
    image: np.ndarray  # uint8, (H, W, 3)
    caption: str
    category: str
    split: str

    @property
    def pixels(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0


def caption_for(category: str) -> str:
    return f"a {COLOR_OF[category]} {category}"


def _shape_mask(shape, u, v):
    r = np.sqrt(u * u + v * v)
    au, av = np.abs(u), np.abs(v)
    if shape == "circle":
        return r <= 1.0
    if shape == "square":
        return (au <= 0.8) & (av <= 0.8)
    if shape == "triangle":
        return (v >= -0.8) & (v <= 0.8) & (au <= (v + 0.8) / 1.6 * 0.95)
    if shape == "diamond":
        return au + av <= 1.0
    if shape == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if shape == "cross":
        return (np.abs(au - av) <= 0.25) & (au <= 0.9) & (av <= 0.9)
    if shape == "plus":
        return ((au <= 0.25) | (av <= 0.25)) & (au <= 0.9) & (av <= 0.9)
    if shape == "bar":
        return (au <= 1.0) & (av <= 0.3)
    if shape == "frame":
        m = np.maximum(au, av)
        return (m <= 0.85) & (m >= 0.55)
    if shape == "crescent":
        return (r <= 1.0) & ((u - 0.45) ** 2 + v * v > 0.6)
    raise ValueError(f"unknown shape {shape!r}")


def render(category: str, rng: np.random.Generator, image_size: int = 32) -> np.ndarray:
    """Draw one sample of ``category``; returns uint8 ``(H, W, 3)``."""
    _, _, rgb = CATEGORIES[CATEGORY_NAMES.index(category)]
    img = np.clip(0.35 + 0.08 * rng.standard_normal((image_size, image_size, 3)), 0.0, 1.0)
    radius = rng.uniform(0.22, 0.32) * image_size
    lo, hi = radius + 1, image_size - radius - 1
    cx, cy = rng.uniform(lo, hi, size=2)
    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5
    inside = _shape_mask(category, (xx - cx) / radius, (yy - cy) / radius)
    color = np.clip(np.asarray(rgb) + 0.05 * rng.standard_normal(3), 0.0, 1.0)
    img[inside] = color
    return np.round(img * 255).astype(np.uint8)


def split_counts(n_per_category: int, fractions=(0.5, 0.25, 0.25)) -> dict:
    n_rank = int(n_per_category * fractions[1])
    n_val = int(n_per_category * fractions[2])
    return {"train": n_per_category - n_rank - n_val, "rank": n_rank, "val": n_val}


def gen_dataset(n_per_category: int, seed: int, fractions=(0.5, 0.25, 0.25),
                image_size: int = 32) -> list:
    if n_per_category < 1:
        raise ValueError("n_per_category must be >= 1")
    counts = split_counts(n_per_category, fractions)
    labels = [s for s in SPLITS for _ in range(counts[s])]
    rng = np.random.default_rng(seed)
    samples = []
    for cat in CATEGORY_NAMES:
        for j in range(n_per_category):
            samples.append(SyntheticSample(len(samples), render(cat, rng, image_size),
                                           caption_for(cat), cat, labels[j]))
    return samples


def select(samples, split=None, category=None) -> list:
    return [s for s in samples
            if (split is None or s.split == split) and (category is None or s.category == category)]


def save_dataset(samples, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "captions").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "category", "split", "image", "caption"])
        for s in samples:
            img_rel = f"images/{s.index:05d}.png"
            cap_rel = f"captions/{s.index:05d}.txt"
            Image.fromarray(s.image).save(root / img_rel, format="PNG")
            (root / cap_rel).write_text(s.caption + "\n", encoding="utf-8")
            w.writerow([s.index, s.category, s.split, img_rel, cap_rel])
    return root / "manifest.csv"


def load_dataset(root) -> list:
    root = Path(root)
    samples = []
    with open(root / "manifest.csv", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            image = np.asarray(Image.open(root / row["image"]).convert("RGB"), dtype=np.uint8)
            caption = (root / row["caption"]).read_text(encoding="utf-8").strip()
            samples.append(SyntheticSample(int(row["index"]), image, caption, row["category"], row["split"]))
    return samples

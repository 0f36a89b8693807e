"""Synthetic field scenes and corpus manifests.

A corpus is a set of images with point annotations. The synthetic
generator draws head-like elliptical blobs on a textured background at
known centers, which gives every pipeline stage a ground truth to be
checked against without any external data. Manifests record where the
images live and carry the annotations, so the command-line stages can
hand a corpus to each other through the filesystem.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .augment import resize_bilinear
from .groundtruth import PointAnnotationSet, save_points

BLOB_MIN_SEPARATION = 12.0
BLOB_MARGIN = 8


@dataclass
class SyntheticScene:
    """One generated image together with its exact head centers."""

    image: np.ndarray
    annotations: PointAnnotationSet


def _packing_capacity(size: int) -> int:
    span = size - 2 * BLOB_MARGIN
    if span < 0:
        return 0
    per_axis = int(span // BLOB_MIN_SEPARATION) + 1
    return per_axis * per_axis


def _place_centers(n: int, size: int, rng) -> list:
    """Best-effort Poisson-disk placement of n blob centers."""
    lo, hi = float(BLOB_MARGIN), float(size - 1 - BLOB_MARGIN)
    centers: list = []
    for _ in range(n):
        best = None
        best_dist = -1.0
        for _ in range(60):
            cand = rng.uniform(lo, hi, 2)
            if centers:
                d = min(
                    math.hypot(cand[0] - cx, cand[1] - cy)
                    for cx, cy in centers
                )
            else:
                d = math.inf
            if d >= BLOB_MIN_SEPARATION:
                best = cand
                break
            if d > best_dist:
                best_dist = d
                best = cand
        centers.append((float(best[0]), float(best[1])))
    return centers


def _textured_background(size: int, rng) -> np.ndarray:
    base = rng.uniform([0.16, 0.22, 0.08], [0.30, 0.40, 0.18])
    coarse_n = max(2, size // 24)
    coarse = rng.random((coarse_n, coarse_n))
    shading = 0.6 + 0.4 * resize_bilinear(coarse, size, size)
    img = base[None, None, :] * shading[:, :, None]
    img += rng.normal(0.0, 0.015, (size, size, 3))
    return np.clip(img, 0.0, 1.0)


def _paint_blob(img: np.ndarray, x: float, y: float, rng) -> None:
    size = img.shape[0]
    a = rng.uniform(5.0, 9.0)
    b = rng.uniform(2.5, 4.5)
    theta = rng.uniform(0.0, math.pi)
    color = np.clip(
        np.array([0.74, 0.62, 0.30]) + rng.uniform(-0.08, 0.08, 3), 0, 1
    )
    r = int(math.ceil(a)) + 2
    y0, y1 = max(0, int(y) - r), min(size, int(y) + r + 1)
    x0, x1 = max(0, int(x) - r), min(size, int(x) + r + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - x, ys - y
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    m = 0.85 * np.exp(-0.5 * ((u / (a / 2.0)) ** 2 + (v / (b / 2.0)) ** 2))
    img[y0:y1, x0:x1] = (
        img[y0:y1, x0:x1] * (1.0 - m[:, :, None]) + color * m[:, :, None]
    )


def generate_synthetic(n_images: int, heads_min: int, heads_max: int,
                       size: int = 300, rng=None) -> list:
    """Generate a corpus of SyntheticScene objects.

    Blob centers are the annotation points, exactly. Placement keeps a
    minimum separation on a best-effort basis; a head count that cannot
    physically fit in the image raises before any drawing happens.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if heads_min < 0:
        raise ValueError("heads_min must be nonnegative")
    if heads_max < heads_min:
        raise ValueError("heads_max must be at least heads_min")
    cap = _packing_capacity(size)
    if heads_max > cap:
        raise ValueError(
            f"cannot pack {heads_max} heads into a {size}x{size} image "
            f"(capacity about {cap})"
        )
    scenes = []
    for i in range(n_images):
        n_heads = int(rng.integers(heads_min, heads_max + 1))
        img = _textured_background(size, rng)
        centers = _place_centers(n_heads, size, rng)
        for x, y in centers:
            _paint_blob(img, x, y, rng)
        scenes.append(
            SyntheticScene(
                img,
                PointAnnotationSet(f"synth_{i:04d}", size, size, centers),
            )
        )
    return scenes


@dataclass
class CorpusManifest:
    """Images on disk plus their annotations, with a split tag."""

    entries: list = field(default_factory=list)
    split: str = ""
    root: str = ""

    def __len__(self):
        return len(self.entries)

    def image_path(self, entry: dict) -> str:
        return os.path.join(self.root, entry["image"])

    def size_entries(self) -> list:
        """(image_id, height, width) rows, enough to enumerate patches."""
        return [
            (e["image_id"], e["height"], e["width"]) for e in self.entries
        ]

    def annotation_set(self, entry: dict) -> PointAnnotationSet:
        return PointAnnotationSet(
            entry["image_id"], entry["width"], entry["height"],
            [tuple(p) for p in entry["points"]],
        )

    def load_image(self, entry: dict) -> np.ndarray:
        img = Image.open(self.image_path(entry)).convert("RGB")
        return np.asarray(img, dtype=np.float64) / 255.0

    def iter_images(self):
        """Yield (image array, PointAnnotationSet) pairs lazily."""
        for entry in self.entries:
            yield self.load_image(entry), self.annotation_set(entry)

    def validate(self) -> None:
        for entry in self.entries:
            path = self.image_path(entry)
            if not os.path.isfile(path):
                raise ValueError(f"manifest references missing file {path}")
            self.annotation_set(entry)

    def save(self, path) -> None:
        doc = {"split": self.split, "entries": self.entries}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        with open(path) as fh:
            doc = json.load(fh)
        manifest = cls(
            entries=doc["entries"],
            split=doc.get("split", ""),
            root=os.path.dirname(os.path.abspath(str(path))),
        )
        manifest.validate()
        return manifest


def save_corpus(scenes, out_dir, split: str = "") -> str:
    """Write scenes as PNGs plus a manifest; returns the manifest path.

    An annotations.json in the points-file format is written alongside,
    so the evaluation stage can read ground truth straight from it.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    mapping = {}
    for scene in scenes:
        ann = scene.annotations
        name = ann.image_id + ".png"
        img8 = np.clip(scene.image * 255.0, 0, 255).round().astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(os.path.join(out_dir, name))
        entries.append(
            {
                "image_id": ann.image_id,
                "image": name,
                "width": ann.width,
                "height": ann.height,
                "points": [[float(x), float(y)] for x, y in ann.points],
            }
        )
        mapping[ann.image_id] = list(ann.points)
    manifest = CorpusManifest(entries, split, os.path.abspath(out_dir))
    path = os.path.join(out_dir, "manifest.json")
    manifest.save(path)
    save_points(os.path.join(out_dir, "annotations.json"), mapping)
    return path


def split_corpus(corpus, test_fraction: float, seed: int):
    """Seeded shuffle split into (train, test).

    The test side takes ceil(n * fraction) items, so a 0.2 fraction of
    3373 images gives 675 test and 2698 train. Works on any sequence;
    a CorpusManifest comes back as two manifests tagged train/test.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be strictly between 0 and 1")
    if isinstance(corpus, CorpusManifest):
        train, test = split_corpus(corpus.entries, test_fraction, seed)
        return (
            CorpusManifest(train, "train", corpus.root),
            CorpusManifest(test, "test", corpus.root),
        )
    items = list(corpus)
    n = len(items)
    n_test = math.ceil(n * test_fraction)
    if n_test < 1 or n_test >= n:
        raise ValueError(
            f"corpus of {n} images is too small to split at "
            f"fraction {test_fraction}"
        )
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(int(i) for i in perm[:n_test])
    train = [items[i] for i in range(n) if i not in test_idx]
    test = [items[i] for i in range(n) if i in test_idx]
    return train, test

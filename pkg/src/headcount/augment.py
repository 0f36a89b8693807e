"""Training-patch expansion: scale pyramid, random crops, flips, noise.

Ground truth is regenerated from the transformed points for every patch
instead of geometrically resampling the maps; resampling would change a
density map's integral, regeneration keeps count conservation exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .groundtruth import PointAnnotationSet, density_map, localization_map

SCALES = (0.4, 0.6, 0.8, 1.0)
CROPS_PER_SCALE = 9
PATCH_SIZE = 300
FLIP_PROB = 0.5
NOISE_PROB = 0.5
NOISE_STD = 0.01

WHGT_MAGIC = b"WHGT"


@dataclass
class Provenance:
    image_id: str
    scale: float
    crop_top: int
    crop_left: int
    flipped: bool
    noise_seed: int | None


@dataclass
class TrainingPatch:
    """One 300x300 training example with regenerated supervision maps.

    image is HxWx3 float64 in [0, 1]; density_gt and loc_gt are HxW
    float64; points holds the retained annotations in crop coordinates.
    """

    image: np.ndarray
    density_gt: np.ndarray
    loc_gt: np.ndarray
    points: list
    provenance: Provenance

    @property
    def count(self) -> int:
        return len(self.points)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center bilinear resize of an HxW or HxWxC array.

    Handles both directions; used for the pyramid's downscales, where the
    autodiff upsampling op does not apply.
    """
    h, w = image.shape[:2]
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (sy - y0).reshape((out_h,) + (1,) * (image.ndim - 1))
    tx = (sx - x0).reshape((1, out_w) + (1,) * (image.ndim - 2))
    a = image[np.ix_(y0, x0)]
    b = image[np.ix_(y0, x1)]
    c = image[np.ix_(y1, x0)]
    d = image[np.ix_(y1, x1)]
    top = a * (1 - tx) + b * tx
    bot = c * (1 - tx) + d * tx
    return top * (1 - ty) + bot * ty


def applicable_scales(height: int, width: int, scales=SCALES,
                      min_size: int = PATCH_SIZE):
    """(index, scale) pairs whose resized image still fits a crop."""
    out = []
    for i, s in enumerate(scales):
        oh = int(round(height * s))
        ow = int(round(width * s))
        if oh >= min_size and ow >= min_size:
            out.append((i, s))
    return out


def _apply_scale(image, annotations, scale, min_size=PATCH_SIZE):
    h, w = image.shape[:2]
    if scale == 1.0:
        return image, annotations
    oh = int(round(h * scale))
    ow = int(round(w * scale))
    if oh < min_size or ow < min_size:
        return None
    simg = resize_bilinear(image, oh, ow)
    # rounding can shave the frame below x*scale; nudge such points inside
    pts = [
        (min(x * scale, ow - 1e-6), min(y * scale, oh - 1e-6))
        for x, y in annotations.points
    ]
    return simg, PointAnnotationSet(annotations.image_id, ow, oh, pts)


def build_pyramid(image, annotations, scales=SCALES, min_size=PATCH_SIZE):
    """Resized (image, annotations) pairs, smallest scale first.

    Scales that would leave the image under min_size px on a side are
    skipped with a warning.
    """
    out = []
    for s in scales:
        scaled = _apply_scale(image, annotations, s, min_size)
        if scaled is None:
            warnings.warn(
                f"scale {s} leaves {annotations.image_id!r} under "
                f"{min_size} px; skipped"
            )
            continue
        out.append(scaled)
    return out


def random_crop(image, annotations, size: int = PATCH_SIZE, rng=None,
                scale: float = 1.0) -> TrainingPatch:
    """Uniform random size x size crop with regenerated ground truth.

    A point survives the crop iff it lies in [x0, x0+size) x [y0, y0+size)
    (left-closed, right-open on both axes).
    """
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(
            f"image {annotations.image_id!r} is {h}x{w}, smaller than "
            f"crop size {size}"
        )
    if rng is None:
        rng = np.random.default_rng()
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    kept = [
        (x - left, y - top)
        for x, y in annotations.points
        if left <= x < left + size and top <= y < top + size
    ]
    crop_ann = PointAnnotationSet(annotations.image_id, size, size, kept)
    img = np.ascontiguousarray(image[top : top + size, left : left + size])
    den = density_map(crop_ann).values
    loc = localization_map(crop_ann).values
    prov = Provenance(annotations.image_id, scale, top, left, False, None)
    return TrainingPatch(img, den, loc, kept, prov)


def flip_horizontal(patch: TrainingPatch) -> TrainingPatch:
    """Mirror image and both GT maps together; points map x -> W-1-x."""
    w = patch.image.shape[1]
    pts = [(w - 1 - x, y) for x, y in patch.points]
    prov = replace(patch.provenance, flipped=not patch.provenance.flipped)
    return TrainingPatch(
        patch.image[:, ::-1].copy(),
        patch.density_gt[:, ::-1].copy(),
        patch.loc_gt[:, ::-1].copy(),
        pts,
        prov,
    )


def add_gaussian_noise(patch: TrainingPatch, std: float, rng,
                       seed_label: int | None = None) -> TrainingPatch:
    """Per-pixel Gaussian noise on the image only, clipped to [0, 1]."""
    if std < 0:
        raise ValueError("noise std must be >= 0")
    noisy = patch.image + rng.normal(0.0, std, size=patch.image.shape)
    prov = replace(patch.provenance, noise_seed=seed_label)
    return TrainingPatch(
        np.clip(noisy, 0.0, 1.0),
        patch.density_gt.copy(),
        patch.loc_gt.copy(),
        list(patch.points),
        prov,
    )


def _master_seed(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**63))


def iter_patch_specs(entries, scales=SCALES,
                     crops_per_scale: int = CROPS_PER_SCALE,
                     min_size: int = PATCH_SIZE):
    """Enumerate every patch a corpus will yield, without pixel work.

    entries: iterable of (image_id, height, width). Yields one tuple
    (image_index, image_id, scale_index, scale, crop_index) per patch,
    so the full dataset size is exactly the number of tuples.
    """
    for img_idx, (image_id, h, w) in enumerate(entries):
        for scale_idx, scale in applicable_scales(h, w, scales, min_size):
            for crop_idx in range(crops_per_scale):
                yield (img_idx, image_id, scale_idx, scale, crop_idx)


def iter_patches(corpus, rng, scales=SCALES,
                 crops_per_scale: int = CROPS_PER_SCALE,
                 patch_size: int = PATCH_SIZE,
                 flip_prob: float = FLIP_PROB,
                 noise_prob: float = NOISE_PROB,
                 noise_std: float = NOISE_STD):
    """Generate the full patch stream for (image, annotations) pairs.

    Every patch gets its own child generator seeded by (master seed,
    image index, scale index, crop index), so the stream is reproducible
    and patches could be realized out of order or in parallel.
    """
    master = _master_seed(rng)
    for img_idx, (image, ann) in enumerate(corpus):
        h, w = image.shape[:2]
        app = applicable_scales(h, w, scales, patch_size)
        app_idx = {i for i, _ in app}
        for i, s in enumerate(scales):
            if i not in app_idx:
                warnings.warn(
                    f"scale {s} leaves {ann.image_id!r} under "
                    f"{patch_size} px; skipped"
                )
        for scale_idx, scale in app:
            scaled = _apply_scale(image, ann, scale, patch_size)
            simg, sann = scaled
            for crop_idx in range(crops_per_scale):
                child = np.random.default_rng(
                    [master, img_idx, scale_idx, crop_idx]
                )
                patch = random_crop(simg, sann, patch_size, child,
                                    scale=scale)
                if child.random() < flip_prob:
                    patch = flip_horizontal(patch)
                if child.random() < noise_prob:
                    noise_seed = int(child.integers(0, 2**31))
                    patch = add_gaussian_noise(
                        patch, noise_std,
                        np.random.default_rng(noise_seed),
                        seed_label=noise_seed,
                    )
                yield patch


def make_dataset(corpus, rng, **kwargs) -> list:
    """Materialized list form of iter_patches; errors on an empty corpus."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    return list(iter_patches(corpus, rng, **kwargs))


def dataset_digest(patches) -> str:
    """SHA-256 over every patch's image and GT bytes, in stream order."""
    h = hashlib.sha256()
    for p in patches:
        h.update(p.image.tobytes())
        h.update(p.density_gt.tobytes())
        h.update(p.loc_gt.tobytes())
    return h.hexdigest()


def save_map(path, values: np.ndarray) -> None:
    """Write one HxW map as magic + u16 dims header + raw f32 rows."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {values.shape}")
    h, w = values.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError(f"map {h}x{w} exceeds the u16 header range")
    with open(path, "wb") as fh:
        fh.write(WHGT_MAGIC)
        fh.write(struct.pack("<HH", h, w))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WHGT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated header")
    h, w = struct.unpack("<HH", blob[4:8])
    if len(blob) != 8 + 4 * h * w:
        raise ValueError(
            f"{path}: payload is {len(blob) - 8} bytes, expected {4 * h * w}"
        )
    return (
        np.frombuffer(blob[8:], dtype="<f4")
        .reshape(h, w)
        .astype(np.float64)
    )


def write_patches(patches, out_dir) -> str:
    """Write patches as PNG + two WHGT maps each, plus a JSON index.

    Returns the index path. Accepts any iterable, so it can drain
    iter_patches without holding the dataset in memory.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    index = []
    for i, p in enumerate(patches):
        stem = f"patch_{i:06d}"
        img8 = np.clip(p.image * 255.0, 0, 255).round().astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(
            os.path.join(out_dir, stem + ".png")
        )
        save_map(os.path.join(out_dir, stem + ".den.whgt"), p.density_gt)
        save_map(os.path.join(out_dir, stem + ".loc.whgt"), p.loc_gt)
        prov = p.provenance
        index.append(
            {
                "image": stem + ".png",
                "density": stem + ".den.whgt",
                "loc": stem + ".loc.whgt",
                "source": prov.image_id,
                "scale": prov.scale,
                "crop": [prov.crop_top, prov.crop_left],
                "flipped": prov.flipped,
                "noise_seed": prov.noise_seed,
                "count": p.count,
            }
        )
    index_path = os.path.join(out_dir, "index.json")
    with open(index_path, "w") as fh:
        json.dump(index, fh, indent=1)
    return index_path


def read_patches(patch_dir) -> list:
    """Load a write_patches directory back into TrainingPatch objects.

    Points are not persisted; the loaded patches carry an empty point
    list and keep the stored count only in the index, so training reads
    the maps and never the points.
    """
    import os

    with open(os.path.join(patch_dir, "index.json")) as fh:
        index = json.load(fh)
    out = []
    for rec in index:
        img = np.asarray(
            Image.open(os.path.join(patch_dir, rec["image"])).convert("RGB"),
            dtype=np.float64,
        ) / 255.0
        den = load_map(os.path.join(patch_dir, rec["density"]))
        loc = load_map(os.path.join(patch_dir, rec["loc"]))
        prov = Provenance(
            rec["source"], rec["scale"], rec["crop"][0], rec["crop"][1],
            rec["flipped"], rec["noise_seed"],
        )
        out.append(TrainingPatch(img, den, loc, [], prov))
    return out

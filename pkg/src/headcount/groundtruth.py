"""Point annotations and the two supervision targets derived from them.

A labeled image is a set of head-center points. Training needs two maps
per image: a Gaussian density map whose integral equals the head count,
and a binary localization map marking a small cross at each center.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

SIGMA_K = 3
SIGMA_BETA = 0.3
SIGMA_MIN = 1.0
SIGMA_MAX = 15.0
SIGMA_DEFAULT = 4.0
TRUNCATE_SIGMAS = 4.0


@dataclass
class PointAnnotationSet:
    """Head-center points for one image, in pixel coordinates.

    x runs along width, y along height; every point must satisfy
    0 <= x < width and 0 <= y < height.
    """

    image_id: str
    width: int
    height: int
    points: list

    def __post_init__(self):
        for x, y in self.points:
            if not (0.0 <= x < self.width and 0.0 <= y < self.height):
                raise ValueError(
                    f"point ({x}, {y}) outside {self.width}x{self.height} "
                    f"image {self.image_id!r}"
                )

    def __len__(self):
        return len(self.points)


@dataclass
class DensityMap:
    values: np.ndarray

    @property
    def count(self) -> float:
        return float(self.values.sum())


@dataclass
class LocalizationMap:
    values: np.ndarray


def adaptive_sigma(
    points,
    index: int,
    k: int = SIGMA_K,
    beta_sigma: float = SIGMA_BETA,
    sigma_min: float = SIGMA_MIN,
    sigma_max: float = SIGMA_MAX,
    sigma_default: float = SIGMA_DEFAULT,
) -> float:
    """Kernel width for one point from its k nearest neighbours.

    The width is beta_sigma times the mean distance to the k nearest
    other points, clamped to [sigma_min, sigma_max]. With fewer than k
    other points all of them are used; with no other points at all the
    geometry gives no signal and sigma_default is returned as-is.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if index < 0 or index >= len(pts):
        raise IndexError(
            f"point index {index} out of range for {len(pts)} points"
        )
    if len(pts) == 1:
        return float(sigma_default)
    d = np.hypot(pts[:, 0] - pts[index, 0], pts[:, 1] - pts[index, 1])
    d = np.delete(d, index)
    d.sort()
    mean_d = d[: min(k, d.size)].mean()
    return float(np.clip(beta_sigma * mean_d, sigma_min, sigma_max))


def density_map(
    annotations: PointAnnotationSet,
    k: int = SIGMA_K,
    beta_sigma: float = SIGMA_BETA,
    sigma_min: float = SIGMA_MIN,
    sigma_max: float = SIGMA_MAX,
    sigma_default: float = SIGMA_DEFAULT,
    truncate: float = TRUNCATE_SIGMAS,
) -> DensityMap:
    """Sum of one renormalized Gaussian stamp per point.

    Each stamp is evaluated on the pixels within +/- truncate*sigma of
    the point and divided by its own in-image mass, so every point adds
    exactly 1.0 to the map no matter how hard it is clipped by borders.
    """
    h, w = annotations.height, annotations.width
    out = np.zeros((h, w), dtype=np.float64)
    pts = np.asarray(annotations.points, dtype=np.float64).reshape(-1, 2)
    for i, (cx, cy) in enumerate(pts):
        sig = adaptive_sigma(
            pts, i, k, beta_sigma, sigma_min, sigma_max, sigma_default
        )
        r = truncate * sig
        x0 = max(0, math.ceil(cx - r))
        x1 = min(w - 1, math.floor(cx + r))
        y0 = max(0, math.ceil(cy - r))
        y1 = min(h - 1, math.floor(cy + r))
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        g = np.exp(
            -((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2)
            / (2.0 * sig * sig)
        )
        out[y0 : y1 + 1, x0 : x1 + 1] += g / g.sum()
    return DensityMap(out)


def localization_map(annotations: PointAnnotationSet) -> LocalizationMap:
    """Binary union of 5-pixel crosses at the rounded point coordinates.

    Coordinates round half-up. A center that rounds onto the far edge is
    pulled back inside the frame so every in-bounds point marks at least
    one pixel; arms falling outside the image are simply dropped.
    """
    h, w = annotations.height, annotations.width
    out = np.zeros((h, w), dtype=np.float64)
    for x, y in annotations.points:
        c = min(int(math.floor(x + 0.5)), w - 1)
        r = min(int(math.floor(y + 0.5)), h - 1)
        out[r, c] = 1.0
        if r > 0:
            out[r - 1, c] = 1.0
        if r < h - 1:
            out[r + 1, c] = 1.0
        if c > 0:
            out[r, c - 1] = 1.0
        if c < w - 1:
            out[r, c + 1] = 1.0
    return LocalizationMap(out)


def load_points(path) -> dict:
    """Read point annotations into {image_id: [(x, y), ...]}.

    CSV files need a header row with image_id, x and y columns. A .json
    file holds the same records as a list of objects with those keys.
    """
    p = str(path)
    out: dict = {}
    if p.endswith(".json"):
        with open(p) as fh:
            rows = json.load(fh)
        if not isinstance(rows, list):
            raise ValueError("annotation JSON must be a list of objects")
        for row in rows:
            out.setdefault(str(row["image_id"]), []).append(
                (float(row["x"]), float(row["y"]))
            )
        return out
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "x", "y"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(
                f"annotation CSV missing columns: {sorted(missing)}"
            )
        for row in reader:
            out.setdefault(row["image_id"], []).append(
                (float(row["x"]), float(row["y"]))
            )
    return out


def save_points(path, mapping: dict) -> None:
    """Write {image_id: [(x, y), ...]} in the format the extension names."""
    p = str(path)
    if p.endswith(".json"):
        rows = [
            {"image_id": img, "x": x, "y": y}
            for img, pts in mapping.items()
            for x, y in pts
        ]
        with open(p, "w") as fh:
            json.dump(rows, fh)
        return
    with open(p, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "x", "y"])
        for img, pts in mapping.items():
            for x, y in pts:
                writer.writerow([img, repr(float(x)), repr(float(y))])

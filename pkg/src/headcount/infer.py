"""Inference: density-sum counting, peak extraction, branch averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grad import Tensor, avgpool2d_3x3_same_array
from .model import (
    ModelConfig,
    WEIGHTS_MAGIC,
    forward,
    load_weights,
    pad_to_multiple,
)

_NEIGHBORS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


@dataclass
class Prediction:
    image_id: str
    density_count: float
    peak_points: list
    peak_count: int
    avg_count: float
    density_map: np.ndarray | None = None
    loc_map: np.ndarray | None = None

    def as_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "density_count": self.density_count,
            "peak_count": self.peak_count,
            "avg_count": self.avg_count,
            "peaks": [[int(x), int(y)] for x, y in self.peak_points],
        }


def count_from_density(density_map) -> float:
    """Plain scalar sum; negative pixels count as-is."""
    values = getattr(density_map, "values", density_map)
    return float(np.asarray(values).sum())


def extract_peaks(loc_map, threshold: float = 0.5) -> list:
    """Strict local maxima of the 3x3-smoothed map, at or above threshold.

    A pixel is a peak iff its smoothed value clears the threshold and
    strictly exceeds every in-bounds 8-neighbor; flat plateaus therefore
    produce no peaks. Returns (x, y) pairs in row-major scan order.
    """
    values = getattr(loc_map, "values", loc_map)
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {m.shape}")
    h, w = m.shape
    smooth = avgpool2d_3x3_same_array(m[None, None])[0, 0]
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = smooth
    ok = smooth >= threshold
    for du, dv in _NEIGHBORS:
        ok &= smooth > padded[1 + du : 1 + du + h, 1 + dv : 1 + dv + w]
    rows, cols = np.nonzero(ok)
    return [(int(c), int(r)) for r, c in zip(rows, cols)]


def load_predictor(source):
    """Accept a weights path, a checkpoint path, a Checkpoint, or a
    (params, config) pair, and return (params, config).

    Files are told apart by magic: weight files start with WHNW,
    checkpoints are zip archives.
    """
    if isinstance(source, tuple) and len(source) == 2:
        return source
    if hasattr(source, "params") and hasattr(source, "model_cfg"):
        return source.params, source.model_cfg
    with open(source, "rb") as fh:
        magic = fh.read(4)
    if magic == WEIGHTS_MAGIC:
        return load_weights(source)
    if magic[:2] == b"PK":
        from .train import load_checkpoint

        ckpt = load_checkpoint(source)
        return ckpt.params, ckpt.model_cfg
    raise ValueError(f"{source}: neither a weights file nor a checkpoint")


def predict(image: np.ndarray, checkpoint, threshold: float = 0.5,
            image_id: str = "", keep_maps: bool = True) -> Prediction:
    """Run the network on one (H, W, 3) image in [0, 1].

    The image is reflect-padded so both dims divide 16 and the output
    maps are cropped back, so any input size works.
    """
    params, cfg = load_predictor(checkpoint)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    x = image.transpose(2, 0, 1)[None]
    xp, (top, left) = pad_to_multiple(x)
    den_t, loc_t = forward(Tensor(xp), params, cfg)
    den = den_t.data[0, 0, top : top + h, left : left + w]
    loc = loc_t.data[0, 0, top : top + h, left : left + w]
    density_count = float(den.sum())
    peaks = extract_peaks(loc, threshold)
    return Prediction(
        image_id=image_id,
        density_count=density_count,
        peak_points=peaks,
        peak_count=len(peaks),
        avg_count=(density_count + len(peaks)) / 2.0,
        density_map=den if keep_maps else None,
        loc_map=loc if keep_maps else None,
    )

"""Whole-image pore detection: tile, predict, stitch, pick local maxima."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataprep import extract_patches_nonoverlapping, to_unit
from .ndgrad import Grid4
from .porenet import PoreModel, forward_pore

DETECTION_WINDOW = 5


def predict_map(model: PoreModel, pixels: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Pore intensity map for a whole image of any size.

    The image is tiled into non-overlapping input-size squares (mirror-padded
    at the bottom/right edges), each tile runs through the network in eval
    mode, and the tile maps are stitched and cropped back to the image shape.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    tiled = extract_patches_nonoverlapping(to_unit(pixels), model.cfg.input_size)
    outputs = []
    for i in range(0, len(tiled), batch_size):
        batch = tiled.tiles[i:i + batch_size][:, None]
        outputs.append(forward_pore(model, Grid4(batch), "eval").values[:, 0])
    return tiled.stitch(np.concatenate(outputs)).astype(np.float32)


def local_maxima(pore_map: np.ndarray, threshold: float,
                 window: int = DETECTION_WINDOW) -> np.ndarray:
    """(k, 2) row/col of pixels that top their window and exceed threshold.

    A pixel qualifies when it equals the maximum of the window centered on it
    (clipped at the borders) and is strictly greater than the threshold. All
    members of a tied plateau qualify, listed in row-major order.
    """
    if pore_map.ndim != 2:
        raise ValueError("pore map must be 2-D")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd size")
    filled = ndimage.maximum_filter(pore_map, size=window,
                                    mode="constant", cval=-np.inf)
    return np.argwhere((pore_map == filled) & (pore_map > threshold)).astype(np.int64)


@dataclass
class Detections:
    """Detected pore coordinates with the map value under each one."""

    pores: np.ndarray       # (k, 2) int64, row-major order
    scores: np.ndarray      # (k,) float32
    pore_map: np.ndarray    # (H, W) float32

    def __len__(self) -> int:
        return self.pores.shape[0]


def detect(model: PoreModel, pixels: np.ndarray, threshold: float,
           window: int = DETECTION_WINDOW, batch_size: int = 8) -> Detections:
    pore_map = predict_map(model, pixels, batch_size)
    pores = local_maxima(pore_map, threshold, window)
    return Detections(pores, pore_map[pores[:, 0], pores[:, 1]], pore_map)

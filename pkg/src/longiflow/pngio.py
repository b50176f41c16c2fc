"""PNG export of frames and sequence grids."""

from __future__ import annotations

import numpy as np
from PIL import Image


def _to_u8(frame: np.ndarray) -> np.ndarray:
    """(c, h, w) floats to (h, w) or (h, w, 3) uint8, clipped to [0, 1]."""
    arr = np.clip(frame, 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        return arr[0]
    if arr.shape[0] == 3:
        return np.transpose(arr, (1, 2, 0))
    raise ValueError(f"cannot render {arr.shape[0]} channels")


def save_frame(path, frame: np.ndarray) -> None:
    Image.fromarray(_to_u8(frame)).save(path)


def save_grid(path, sequences: np.ndarray) -> None:
    """One row per sequence, one column per timestep, no padding.

    sequences has shape (n, t, c, h, w); the image is (n*h, t*w).
    """
    n, t, c, h, w = sequences.shape
    rows = []
    for i in range(n):
        rows.append(np.concatenate([_to_u8(sequences[i, l]) for l in range(t)],
                                   axis=1))
    Image.fromarray(np.concatenate(rows, axis=0)).save(path)

"""Image grids and PNG output for samples, reconstructions and translations."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

__all__ = ["to_uint8", "mask_to_uint8", "image_grid", "save_png", "decomposition_rows"]


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (N, 3, H, W) in [-1, 1] → uint8 HWC."""
    x = x.detach().cpu().float().clamp(-1, 1)
    x = ((x + 1) * 127.5).round().to(torch.uint8)
    return x.movedim(-3, -1).numpy()


def mask_to_uint8(m: torch.Tensor) -> np.ndarray:
    """(1, H, W) or (N, 1, H, W) in [0, 1] → uint8 HWC with three equal channels."""
    m = (m.detach().cpu().float().clamp(0, 1) * 255).round().to(torch.uint8)
    return m.repeat_interleave(3, dim=-3).movedim(-3, -1).numpy()


def image_grid(rows: list[list[np.ndarray]], pad: int = 2, fill: int = 255) -> np.ndarray:
    """Tile equally sized HWC uint8 tiles; each inner list is one row."""
    if not rows or not rows[0]:
        raise ValueError("empty grid")
    h, w, c = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    out = np.full((len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad, c), fill, np.uint8)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            if tile.shape != (h, w, c):
                raise ValueError(f"tile {i},{j} has shape {tile.shape}, expected {(h, w, c)}")
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = tile
    return out


def save_png(array: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)
    return path


def decomposition_rows(quad) -> list[list[np.ndarray]]:
    """Rows: composite image, foreground, mask, background."""
    return [
        list(to_uint8(quad.I)),
        list(to_uint8(quad.I_fg)),
        list(mask_to_uint8(quad.I_m)),
        list(to_uint8(quad.I_bg)),
    ]

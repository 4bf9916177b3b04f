"""ASCII PLY export for colored point clouds."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .scenes import SceneError

# hand-picked, visually distinct base colors; extended procedurally beyond 16
_BASE_PALETTE = np.array([
    (166, 206, 227), (31, 120, 180), (178, 223, 138), (51, 160, 44),
    (251, 154, 153), (227, 26, 28), (253, 191, 111), (255, 127, 0),
    (202, 178, 214), (106, 61, 154), (255, 255, 153), (177, 89, 40),
    (141, 211, 199), (190, 186, 218), (128, 177, 211), (253, 180, 98),
], dtype=np.uint8)


def color_palette(n: int) -> np.ndarray:
    """Deterministic palette of ``n`` distinct RGB triples (uint8)."""
    if n <= len(_BASE_PALETTE):
        return _BASE_PALETTE[:n].copy()
    colors = [tuple(c) for c in _BASE_PALETTE]
    seen = set(colors)
    h = 0.1234
    while len(colors) < n:
        h = (h + 0.618033988749895) % 1.0
        rgb = _hsv_to_rgb(h, 0.65, 0.95)
        if rgb not in seen:
            seen.add(rgb)
            colors.append(rgb)
    return np.array(colors, dtype=np.uint8)


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return int(r * 255), int(g * 255), int(b * 255)


def write_ply(path, coords: np.ndarray, colors: np.ndarray) -> None:
    """Write an ASCII PLY with x, y, z float properties and uchar RGB."""
    coords = np.asarray(coords, dtype=np.float64)
    colors = np.asarray(colors)
    if coords.ndim != 2 or coords.shape[1] < 3 or coords.shape[0] < 1:
        raise SceneError(f"coords must be (N>=1, >=3), got {coords.shape}")
    if colors.shape != (coords.shape[0], 3):
        raise SceneError(f"colors must be ({coords.shape[0]}, 3), got {colors.shape}")
    n = coords.shape[0]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    colors = colors.astype(np.int64)
    for i in range(n):
        x, y, z = coords[i, :3]
        r, g, b = colors[i]
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}")
    Path(path).write_text("\n".join(lines) + "\n")

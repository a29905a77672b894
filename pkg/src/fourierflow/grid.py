"""Regular node grids over a box with clamped trilinear interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# corner offsets in (i, j, k) order matching the interpolation weights
CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@dataclass(frozen=True)
class RegularGrid:
    """``resolution[d]`` equally spaced nodes per axis spanning ``[bbox_min, bbox_max]``."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: tuple[int, int, int]

    def __post_init__(self):
        lo = np.array(self.bbox_min, dtype=float).reshape(3)
        hi = np.array(self.bbox_max, dtype=float).reshape(3)
        res = tuple(int(r) for r in np.broadcast_to(np.asarray(self.resolution), (3,)))
        if not np.all(hi > lo):
            raise ValueError("bbox_max must exceed bbox_min on every axis")
        if min(res) < 2:
            raise ValueError("grid resolution must be at least 2 nodes per axis")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)
        object.__setattr__(self, "resolution", res)

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.asarray(self.resolution) - 1)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.resolution))

    def nodes(self) -> np.ndarray:
        """Node positions, shape ``resolution + (3,)``."""
        axes = [np.linspace(self.bbox_min[d], self.bbox_max[d], self.resolution[d]) for d in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def clamp(self, points) -> np.ndarray:
        return np.clip(np.asarray(points, dtype=float), self.bbox_min, self.bbox_max)

    def flat_index(self, ijk: np.ndarray) -> np.ndarray:
        ny, nz = self.resolution[1], self.resolution[2]
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]

    def trilinear(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Flat node indices ``(M, 8)`` and weights ``(M, 8)`` of the enclosing cells.

        Points outside the box are clamped to it first.
        """
        p = self.clamp(np.asarray(points, dtype=float).reshape(-1, 3))
        res = np.asarray(self.resolution)
        u = (p - self.bbox_min) / self.spacing
        base = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
        frac = u - base
        ijk = base[:, None, :] + CORNERS[None, :, :]
        w = np.where(CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
        return self.flat_index(ijk), w

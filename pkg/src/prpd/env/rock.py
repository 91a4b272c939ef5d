"""Rocks as face-connected voxel clusters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FACES = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def rock_voxel_count(volume_mm3: float, delta: float) -> int:
    # A rock smaller than one voxel still occupies one voxel.
    return max(1, int(round(volume_mm3 / delta ** 3)))


def grow_rock(volume_mm3: float, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Grow a rock by attaching voxels to uniformly chosen exposed faces.

    Returns an (n, 3) array of integer cell coordinates, shifted so the
    lowest layer is z = 0 and x/y are centred on the centroid.
    """
    n = rock_voxel_count(volume_mm3, delta)
    cells = [(0, 0, 0)]
    occupied = {(0, 0, 0)}
    # exposed faces kept as a list with an index map for O(1) removal
    faces: list[tuple[tuple[int, int, int], tuple[int, int, int]]] = []
    where: dict = {}

    def add_face(face):
        where[face] = len(faces)
        faces.append(face)

    def drop_face(face):
        k = where.pop(face)
        last = faces.pop()
        if k < len(faces):
            faces[k] = last
            where[last] = k

    def expose(cell):
        for d in FACES:
            target = (cell[0] + d[0], cell[1] + d[1], cell[2] + d[2])
            if target not in occupied:
                add_face((cell, d))

    expose((0, 0, 0))
    while len(cells) < n:
        cell, d = faces[int(rng.integers(len(faces)))]
        new = (cell[0] + d[0], cell[1] + d[1], cell[2] + d[2])
        occupied.add(new)
        cells.append(new)
        for d2 in FACES:
            nb = (new[0] + d2[0], new[1] + d2[1], new[2] + d2[2])
            if nb in occupied:
                back = (nb, (-d2[0], -d2[1], -d2[2]))
                if back in where:
                    drop_face(back)
        expose(new)
    arr = np.array(cells, dtype=np.int64)
    arr[:, 2] -= arr[:, 2].min()
    return arr


def is_face_connected(cells) -> bool:
    cells = {tuple(int(v) for v in c) for c in np.asarray(cells).reshape(-1, 3)}
    if not cells:
        return False
    start = next(iter(cells))
    seen = {start}
    stack = [start]
    while stack:
        c = stack.pop()
        for d in FACES:
            nb = (c[0] + d[0], c[1] + d[1], c[2] + d[2])
            if nb in cells and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(cells)


@dataclass
class RockState:
    """Rock pose and shape.

    ``cells`` are integer voxel coordinates with the bottom layer at z = 0;
    ``x``/``y`` locate the XY centroid and ``bottom`` the lowest voxel face.
    """

    cells: np.ndarray
    delta: float
    x: float
    y: float
    bottom: float
    pitch: float = 0.0
    held: bool = False

    def __post_init__(self):
        c = self.cells.astype(np.float64)
        cx, cy = c[:, 0].mean(), c[:, 1].mean()
        # centre offsets of every voxel relative to the XY centroid, in mm
        self.dx = [float(v) for v in (c[:, 0] - cx) * self.delta]
        self.dy = [float(v) for v in (c[:, 1] - cy) * self.delta]
        self.layer = [int(v) for v in self.cells[:, 2]]
        self.height_cells = max(self.layer) + 1
        half = 0.5 * self.delta
        self.half_x = max(abs(v) for v in self.dx) + half
        self.half_y = max(abs(v) for v in self.dy) + half

    @property
    def n_voxels(self) -> int:
        return len(self.dx)

    @property
    def top(self) -> float:
        return self.bottom + self.height_cells * self.delta

    def voxel_xy(self) -> list[tuple[float, float]]:
        """Voxel centre coordinates in mm."""
        x, y = self.x, self.y
        return [(x + dx, y + dy) for dx, dy in zip(self.dx, self.dy)]

    def copy(self) -> "RockState":
        return RockState(self.cells.copy(), self.delta, self.x, self.y, self.bottom, self.pitch, self.held)

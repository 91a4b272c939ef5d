"""Height-field soil made of cubic voxels stacked in square columns."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

MAX_SETTLE_MOVES = 1_000_000
NO_CAP = 1 << 30


class SimulationFault(RuntimeError):
    pass


@lru_cache(maxsize=None)
def neighbours(n: int) -> tuple[tuple[int, ...], ...]:
    """4-neighbour indices of each column of an n x n grid, ordered N, E, S, W."""
    out = []
    for i in range(n):
        for j in range(n):
            nb = []
            if i > 0:
                nb.append((i - 1) * n + j)
            if j < n - 1:
                nb.append(i * n + j + 1)
            if i < n - 1:
                nb.append((i + 1) * n + j)
            if j > 0:
                nb.append(i * n + j - 1)
            out.append(tuple(nb))
    return tuple(out)


@dataclass
class SoilField:
    """Column voxel counts on an n x n grid (row-major, row index along +y).

    Column (i, j) spans x in [x0 + j*delta, x0 + (j+1)*delta) and likewise y
    from y0 with i. Its top surface sits at ``base_z + heights[i*n+j]*delta``.
    """

    n: int
    delta: float
    heights: list[int]
    x0: float
    y0: float
    base_z: float
    ops: int = field(default=0, repr=False)
    buried: int = field(default=0, repr=False)  # voxels inside the rock after the last settle
    open_faces: int = field(default=0, repr=False)  # exposed side faces seen by the last sweep

    @property
    def total(self) -> int:
        return sum(self.heights)

    @property
    def side(self) -> float:
        return self.n * self.delta

    def column_at(self, x: float, y: float) -> int:
        """Column index containing (x, y), or -1 outside the bed."""
        j = math.floor((x - self.x0) / self.delta)
        i = math.floor((y - self.y0) / self.delta)
        if 0 <= i < self.n and 0 <= j < self.n:
            return i * self.n + j
        return -1

    def top(self, idx: int) -> float:
        return self.base_z + self.heights[idx] * self.delta

    def copy(self) -> "SoilField":
        return SoilField(self.n, self.delta, list(self.heights), self.x0, self.y0, self.base_z)


def even_heights(total: int, n_cols: int) -> list[int]:
    """Spread ``total`` voxels over columns, remainder interleaved evenly."""
    base, rem = divmod(total, n_cols)
    return [base + ((k + 1) * rem // n_cols - k * rem // n_cols) for k in range(n_cols)]


def settle_soil(soil: SoilField, caps: dict[int, int] | None = None) -> int:
    """Relax the angle-of-repose rule to a fixpoint, in place.

    While a column stands >= 2 voxels above a 4-neighbour, its top voxel moves
    to the lowest such neighbour (ties: N, E, S, W). Columns in ``caps`` may
    not grow beyond the given count (they sit under the rock). Returns the
    number of voxels moved; the visit count is added to ``soil.ops``. Every
    sweep walks each voxel, so the cost grows with the voxel count.
    """
    h = soil.heights
    nbs = neighbours(soil.n)
    caps = caps or {}
    moves = 0
    visits = 0
    buried = faces = 0
    changed = True
    while changed:
        changed = False
        buried = faces = 0
        for idx in range(len(h)):
            # voxel scan, bed upwards: side faces open to the air and voxels
            # poking into the rock above a capped column
            ceiling = soil.base_z + caps.get(idx, NO_CAP) * soil.delta + 1e-9
            side = [h[nb] for nb in nbs[idx]]
            for k in range(h[idx]):
                if soil.base_z + (k + 1) * soil.delta > ceiling:
                    buried += 1
                for hn in side:
                    if k >= hn:
                        faces += 1
            visits += h[idx] + 1
            while True:
                hi = h[idx]
                best = -1
                best_h = hi - 1
                for nb in nbs[idx]:
                    hn = h[nb]
                    if hn < best_h and hn < caps.get(nb, NO_CAP):
                        best, best_h = nb, hn
                if best < 0:
                    break
                h[idx] = hi - 1
                h[best] = best_h + 1
                moves += 1
                changed = True
                if moves > MAX_SETTLE_MOVES:
                    raise SimulationFault("soil settling did not terminate")
    soil.ops += visits + moves
    soil.buried = buried
    soil.open_faces = faces
    return moves

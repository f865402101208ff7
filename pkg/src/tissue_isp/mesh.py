"""Triangulated square tissue sheet with fixed corners and grasp candidates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tissue_isp.errors import OutOfDomainError, ParameterError

INTERIOR_FRACTION = 0.4


@dataclass(frozen=True, eq=False)
class TissueMesh:
    node_positions: np.ndarray  # (n_nodes, 2), mm
    triangles: np.ndarray  # (n_tri, 3), counter-clockwise
    fixed_nodes: frozenset[int]
    left_candidates: tuple[int, ...]
    right_candidates: tuple[int, ...]
    interior_nodes: frozenset[int]
    side_length: float
    resolution: int
    _interior_sorted: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.node_positions.setflags(write=False)
        self.triangles.setflags(write=False)
        object.__setattr__(
            self, "_interior_sorted", np.array(sorted(self.interior_nodes), dtype=np.int64)
        )

    @property
    def n_nodes(self) -> int:
        return len(self.node_positions)

    @property
    def spacing(self) -> float:
        return self.side_length / (self.resolution - 1)

    @property
    def interior_sorted(self) -> np.ndarray:
        return self._interior_sorted

    def node_index(self, i: int, j: int) -> int:
        """Index of the grid node in column ``i`` (x) and row ``j`` (y)."""
        return j * self.resolution + i

    def triangle_areas(self) -> np.ndarray:
        p = self.node_positions[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def build_square_mesh(side_mm: float, resolution: int) -> TissueMesh:
    """Regular ``resolution`` x ``resolution`` grid over ``[0, side_mm]^2``.

    Each cell is split in two along a diagonal whose direction alternates in a
    checkerboard pattern. Corners are fixed; the non-corner nodes on the
    left/right edges are the grasp candidates, ordered by increasing y.
    """
    if not isinstance(resolution, (int, np.integer)) or resolution < 3:
        raise ParameterError(f"resolution must be an integer >= 3, got {resolution!r}")
    if not side_mm > 0:
        raise ParameterError(f"side_mm must be positive, got {side_mm!r}")
    n = int(resolution)
    side = float(side_mm)
    coords = np.linspace(0.0, side, n)
    xs, ys = np.meshgrid(coords, coords)  # row j = y index
    nodes = np.column_stack([xs.ravel(), ys.ravel()])

    def idx(i, j):
        return j * n + i

    tris = []
    for j in range(n - 1):
        for i in range(n - 1):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            if (i + j) % 2 == 0:
                tris.append((a, b, c))
                tris.append((a, c, d))
            else:
                tris.append((a, b, d))
                tris.append((b, c, d))
    triangles = np.array(tris, dtype=np.int64)

    corners = frozenset({idx(0, 0), idx(n - 1, 0), idx(0, n - 1), idx(n - 1, n - 1)})
    left = tuple(idx(0, j) for j in range(1, n - 1))
    right = tuple(idx(n - 1, j) for j in range(1, n - 1))

    lo = side * (1.0 - INTERIOR_FRACTION) / 2.0
    hi = side - lo
    eps = 1e-9 * side
    inside = np.all((nodes >= lo - eps) & (nodes <= hi + eps), axis=1)
    interior = frozenset(int(k) for k in np.flatnonzero(inside))
    interior -= corners | set(left) | set(right)

    return TissueMesh(
        node_positions=nodes,
        triangles=triangles,
        fixed_nodes=corners,
        left_candidates=left,
        right_candidates=right,
        interior_nodes=interior,
        side_length=side,
        resolution=n,
    )


def nearest_node(mesh: TissueMesh, point) -> int:
    p = np.asarray(point, dtype=float).reshape(2)
    h = mesh.spacing
    if not np.all(np.isfinite(p)) or np.any(p < -h) or np.any(p > mesh.side_length + h):
        raise OutOfDomainError(f"point {tuple(p)} is outside the tissue domain")
    d2 = np.sum((mesh.node_positions - p) ** 2, axis=1)
    # argmin returns the first occurrence, so ties go to the smallest index
    return int(np.argmin(d2))


def candidate_at(mesh: TissueMesh, side: str, u: float) -> int:
    if side == "left":
        cands = mesh.left_candidates
    elif side == "right":
        cands = mesh.right_candidates
    else:
        raise ParameterError(f"side must be 'left' or 'right', got {side!r}")
    if not 0.0 <= u <= 1.0:
        raise ParameterError(f"u must lie in [0, 1], got {u!r}")
    pos = int(math.floor(u * (len(cands) - 1) + 0.5))
    return cands[pos]


def export_mesh(mesh: TissueMesh, path) -> None:
    """Write nodes ("id x y") followed by triangles ("id n1 n2 n3")."""
    lines = [f"# nodes {mesh.n_nodes}"]
    lines += [f"{k} {x:.12g} {y:.12g}" for k, (x, y) in enumerate(mesh.node_positions)]
    lines.append(f"# triangles {len(mesh.triangles)}")
    lines += [f"{k} {a} {b} {c}" for k, (a, b, c) in enumerate(mesh.triangles)]
    Path(path).write_text("\n".join(lines) + "\n")

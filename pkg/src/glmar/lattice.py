"""Voxel lattice masks and the Laplacian-derived smoothing precision.

A mask selects cells of a 2-D or 3-D rectangular grid. The inside cells are
numbered in row-major scan order and form the nodes of a graph whose edges
connect axis-adjacent inside cells. The smoothing kernel S is a fixed-diagonal
Laplacian over that graph; its Gram matrix S^T S is the sparse precision used
by every spatial prior in the model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError

DEGREE = {2: 4, 3: 6}


@dataclass(frozen=True)
class Mask:
    """Set of inside cells on a rectangular grid.

    `inside` has shape `dims`. Inside cells are numbered 0..N-1 in row-major
    scan order; `index_of` maps grid cells to those numbers (-1 outside) and
    `coords` maps numbers back to integer grid coordinates. Centroids equal
    the grid coordinates.
    """

    dims: tuple[int, ...]
    inside: np.ndarray
    index_of: np.ndarray = field(init=False, repr=False)
    coords: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3) or any(d < 1 for d in dims):
            raise DataError(f"mask dims must be 2 or 3 positive integers, got {dims}")
        inside = np.asarray(self.inside, dtype=bool)
        if inside.shape != dims:
            raise DataError(f"inside grid shape {inside.shape} does not match dims {dims}")
        if not inside.any():
            raise DataError("mask has no inside voxels")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "inside", inside)
        index_of = np.full(dims, -1, dtype=np.int64)
        coords = np.argwhere(inside)  # row-major scan order
        index_of[tuple(coords.T)] = np.arange(coords.shape[0])
        object.__setattr__(self, "index_of", index_of)
        object.__setattr__(self, "coords", coords)

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def centroids(self) -> np.ndarray:
        """Per-voxel real coordinates in grid units (N x ndim)."""
        return self.coords.astype(float)

    @classmethod
    def full(cls, *dims: int) -> "Mask":
        """Mask covering the whole grid."""
        return cls(tuple(dims), np.ones(dims, dtype=bool))


@dataclass(frozen=True)
class SpatialKernel:
    """Laplacian kernel S and its Gram precision StS = S^T S for one mask."""

    mask: Mask
    S: sp.csr_matrix
    StS: sp.csr_matrix
    deg: int

    @property
    def n_voxels(self) -> int:
        return self.mask.n_voxels

    @property
    def sts_diag(self) -> np.ndarray:
        return self.StS.diagonal()


def build_kernel(mask: Mask, dimensionality: int | None = None) -> SpatialKernel:
    """Build the spatial kernel for a mask.

    The diagonal of S is the fixed degree (4 in 2-D, 6 in 3-D) regardless of
    how many neighbors a voxel actually has; off-diagonals are -1 for pairs of
    inside cells differing by one step along exactly one axis. StS is the
    exact sparse product S^T S with sorted column indices.
    """
    if dimensionality is None:
        dimensionality = mask.ndim
    if dimensionality not in DEGREE:
        raise DataError(f"dimensionality must be 2 or 3, got {dimensionality}")
    if dimensionality != mask.ndim:
        raise DataError(
            f"dimensionality {dimensionality} does not match mask dims {mask.dims}"
        )
    n = mask.n_voxels
    deg = DEGREE[dimensionality]

    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [np.full(n, float(deg))]
    # Axis-adjacent inside pairs; both directions so S is symmetric.
    for axis in range(mask.ndim):
        shifted = mask.coords.copy()
        shifted[:, axis] += 1
        ok = shifted[:, axis] < mask.dims[axis]
        nb = np.full(n, -1, dtype=np.int64)
        nb[ok] = mask.index_of[tuple(shifted[ok].T)]
        has = nb >= 0
        i = np.arange(n)[has]
        j = nb[has]
        rows.extend([i, j])
        cols.extend([j, i])
        vals.extend([np.full(i.size, -1.0), np.full(i.size, -1.0)])

    S = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    S.sum_duplicates()
    S.sort_indices()
    StS = (S.T @ S).tocsr()
    StS.sum_duplicates()
    StS.sort_indices()
    return SpatialKernel(mask=mask, S=S, StS=StS, deg=deg)


def quad_form(kernel: SpatialKernel, v: np.ndarray) -> float:
    """Return v^T (StS) v via sparse traversal."""
    v = np.asarray(v, dtype=float)
    if v.shape != (kernel.n_voxels,):
        raise DataError(
            f"vector length {v.shape} does not match kernel size {kernel.n_voxels}"
        )
    return float(v @ (kernel.StS @ v))


def precision_row(kernel: SpatialKernel, n: int) -> list[tuple[int, float]]:
    """Return row n of StS as sorted (index, value) pairs."""
    if not 0 <= n < kernel.n_voxels:
        raise DataError(f"voxel index {n} out of range [0, {kernel.n_voxels})")
    m = kernel.StS
    lo, hi = m.indptr[n], m.indptr[n + 1]
    return [(int(j), float(x)) for j, x in zip(m.indices[lo:hi], m.data[lo:hi])]


def read_mask(path: str | Path) -> Mask:
    """Read a mask from the plain-text grid format.

    First line is ``dims: d1 d2 [d3]``; the remaining lines hold 0/1 cell
    flags in row-major order, whitespace separated.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].lower().startswith("dims:"):
        raise DataError(f"{path}:1: expected 'dims: d1 d2 [d3]' header")
    try:
        dims = tuple(int(tok) for tok in lines[0].split(":", 1)[1].split())
    except ValueError as exc:
        raise DataError(f"{path}:1: bad dims header: {exc}") from exc
    tokens: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        for tok in line.split():
            if tok not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: cell flags must be 0 or 1, got {tok!r}")
            tokens.append(tok)
    want = int(np.prod(dims))
    if len(tokens) != want:
        raise DataError(f"{path}: expected {want} cell flags for dims {dims}, got {len(tokens)}")
    inside = np.array([t == "1" for t in tokens], dtype=bool).reshape(dims)
    return Mask(dims, inside)


def write_mask(mask: Mask, path: str | Path) -> None:
    """Write a mask in the plain-text grid format (one grid row per line)."""
    path = Path(path)
    out = ["dims: " + " ".join(str(d) for d in mask.dims)]
    flat = mask.inside.reshape(-1, mask.dims[-1])
    for row in flat:
        out.append(" ".join("1" if v else "0" for v in row))
    path.write_text("\n".join(out) + "\n")


def write_coo_csv(matrix: sp.spmatrix, path: str | Path) -> None:
    """Export a sparse matrix as coordinate-list CSV (debug aid)."""
    coo = matrix.tocoo()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        order = np.lexsort((coo.col, coo.row))
        for i in order:
            writer.writerow([int(coo.row[i]), int(coo.col[i]), repr(float(coo.data[i]))])

"""Posterior summaries shared by all backends.

Every fit produces the same per-coordinate table (mean, variance, batch-means
standard error when available) in the state stacking order, so downstream
metrics can consume output from any backend interchangeably. Draw matrices
and per-voxel covariances are optional attachments used by probability maps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

BLOCKS = ("w", "a", "alpha", "beta", "lambda")
_CSV_HEADER = ["coord", "block", "mean", "variance", "bmse"]


@dataclass
class PosteriorSummary:
    """Per-coordinate posterior means/variances for one fitted dataset."""

    method: str
    w_mean: np.ndarray                      # (K, N)
    a_mean: np.ndarray                      # (P, N)
    lambda_mean: np.ndarray                 # (N,)
    alpha_mean: np.ndarray                  # (K,)
    beta_mean: np.ndarray                   # (P,)
    w_var: np.ndarray | None = None
    a_var: np.ndarray | None = None
    lambda_var: np.ndarray | None = None
    alpha_var: np.ndarray | None = None
    beta_var: np.ndarray | None = None
    w_bmse: np.ndarray | None = None
    a_bmse: np.ndarray | None = None
    lambda_bmse: np.ndarray | None = None
    alpha_bmse: np.ndarray | None = None
    beta_bmse: np.ndarray | None = None
    w_draws: np.ndarray | None = field(default=None, repr=False)  # (draws, K, N)
    w_cov: np.ndarray | None = field(default=None, repr=False)    # (N, K, K)
    a_cov: np.ndarray | None = field(default=None, repr=False)    # (N, P, P)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(N, K, P)."""
        return self.w_mean.shape[1], self.w_mean.shape[0], self.a_mean.shape[0]

    def _block_arrays(self, suffix: str) -> list[np.ndarray | None]:
        return [getattr(self, f"{name}_{suffix}") for name in
                ("w", "a", "alpha", "beta", "lambda")]

    def flat_means(self) -> np.ndarray:
        return np.concatenate([
            self.w_mean.ravel(), self.a_mean.ravel(),
            self.alpha_mean, self.beta_mean, self.lambda_mean,
        ])

    def write_csv(self, path: str | Path) -> None:
        means = self._block_arrays("mean")
        variances = self._block_arrays("var")
        bmses = self._block_arrays("bmse")
        coord = 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_HEADER)
            for block, m, v, b in zip(BLOCKS, means, variances, bmses):
                m = np.asarray(m).ravel()
                v = None if v is None else np.asarray(v).ravel()
                b = None if b is None else np.asarray(b).ravel()
                for i in range(m.size):
                    writer.writerow([
                        coord,
                        block,
                        repr(float(m[i])),
                        "" if v is None else repr(float(v[i])),
                        "" if b is None else repr(float(b[i])),
                    ])
                    coord += 1

    @classmethod
    def read_csv(cls, path: str | Path, n: int, k: int, p: int,
                 method: str = "unknown") -> "PosteriorSummary":
        path = Path(path)
        by_block: dict[str, list[tuple[float, float | None, float | None]]] = {
            b: [] for b in BLOCKS
        }
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != _CSV_HEADER:
                raise DataError(f"{path}:1: unexpected summary header {header}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 5:
                    raise DataError(f"{path}:{lineno}: expected 5 columns")
                _, block, m, v, b = row
                if block not in by_block:
                    raise DataError(f"{path}:{lineno}: unknown block {block!r}")
                by_block[block].append((
                    float(m),
                    float(v) if v else None,
                    float(b) if b else None,
                ))
        shapes = {"w": (k, n), "a": (p, n), "alpha": (k,), "beta": (p,), "lambda": (n,)}
        fields: dict[str, np.ndarray | None] = {}
        for block, shape in shapes.items():
            rows = by_block[block]
            if len(rows) != int(np.prod(shape)):
                raise DataError(
                    f"{path}: block {block} has {len(rows)} rows, expected {np.prod(shape)}"
                )
            means = np.array([r[0] for r in rows]).reshape(shape)
            has_v = all(r[1] is not None for r in rows)
            has_b = all(r[2] is not None for r in rows)
            fields[f"{block}_mean"] = means
            fields[f"{block}_var"] = (
                np.array([r[1] for r in rows]).reshape(shape) if has_v else None
            )
            fields[f"{block}_bmse"] = (
                np.array([r[2] for r in rows]).reshape(shape) if has_b else None
            )
        return cls(method=method, **fields)  # type: ignore[arg-type]


def save_array(arr: np.ndarray, path: str | Path) -> None:
    """Archive a float array as a text shape header plus raw little-endian f64."""
    arr = np.asarray(arr, dtype=float)
    with open(path, "wb") as fh:
        fh.write((" ".join(str(d) for d in arr.shape) + "\n").encode())
        fh.write(arr.astype("<f8").tobytes())


def load_array(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        try:
            shape = tuple(int(x) for x in header)
        except ValueError as exc:
            raise DataError(f"{path}: bad array header") from exc
        raw = fh.read()
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{path}: array payload size mismatch")
    return arr.reshape(shape).copy()

"""Dataset bundle, truth table, and run-manifest file handling.

A dataset bundle is a directory holding design.csv (full design with a
header row), series.f64 (row-major little-endian float64, time x voxels) or
series.csv, mask.txt (lattice text format), and meta.txt with key=value
lines for T, N, K, P.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError
from .lattice import Mask, read_mask, write_mask
from .model import Dataset
from .simulate import GroundTruth


def write_design_csv(design: np.ndarray, path: str | Path,
                     names: list[str] | None = None) -> None:
    design = np.asarray(design, float)
    if names is None:
        names = [f"x{k + 1}" for k in range(design.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in design:
            writer.writerow([repr(float(v)) for v in row])


def read_design_csv(path: str | Path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}:1: empty design file")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: design has no data rows")
    return np.array(rows), list(header)


def _write_meta(path: Path, **kv) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in kv.items()))


def _read_meta(path: Path) -> dict[str, int]:
    if not path.exists():
        raise DataError(f"{path}: missing meta file")
    out: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        try:
            out[key.strip()] = int(val)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_bundle(
    bundle_dir: str | Path,
    data: Dataset,
    mask: Mask,
    design_names: list[str] | None = None,
    series_format: str = "f64",
) -> None:
    """Write a self-contained dataset bundle directory."""
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    write_design_csv(data.Xfull, bundle_dir / "design.csv", design_names)
    write_mask(mask, bundle_dir / "mask.txt")
    if series_format == "f64":
        (bundle_dir / "series.f64").write_bytes(data.Y.astype("<f8").tobytes())
    elif series_format == "csv":
        with open(bundle_dir / "series.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in data.Y:
                writer.writerow([repr(float(v)) for v in row])
    else:
        raise DataError(f"unknown series format {series_format!r}")
    _write_meta(bundle_dir / "meta.txt", T=data.T, N=data.N, K=data.K, P=data.P)


def read_bundle(bundle_dir: str | Path) -> tuple[Dataset, Mask]:
    bundle_dir = Path(bundle_dir)
    if not bundle_dir.is_dir():
        raise DataError(f"{bundle_dir}: not a dataset bundle directory")
    meta = _read_meta(bundle_dir / "meta.txt")
    for key in ("T", "N", "K", "P"):
        if key not in meta:
            raise DataError(f"{bundle_dir / 'meta.txt'}: missing key {key}")
    t, n, k, p = meta["T"], meta["N"], meta["K"], meta["P"]

    design, _ = read_design_csv(bundle_dir / "design.csv")
    if design.shape != (t, k):
        raise DataError(
            f"{bundle_dir / 'design.csv'}: shape {design.shape} does not match "
            f"meta T={t}, K={k}"
        )
    mask = read_mask(bundle_dir / "mask.txt")
    if mask.n_voxels != n:
        raise DataError(
            f"{bundle_dir / 'mask.txt'}: {mask.n_voxels} voxels but meta N={n}"
        )

    f64 = bundle_dir / "series.f64"
    series_csv = bundle_dir / "series.csv"
    if f64.exists():
        raw = np.frombuffer(f64.read_bytes(), dtype="<f8")
        if raw.size != t * n:
            raise DataError(
                f"{f64}: payload holds {raw.size} values, expected {t * n}"
            )
        y = raw.reshape(t, n).copy()
    elif series_csv.exists():
        with open(series_csv, newline="") as fh:
            rows = []
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if len(row) != n:
                    raise DataError(
                        f"{series_csv}:{lineno}: expected {n} values per row"
                    )
                rows.append([float(v) for v in row])
        if len(rows) != t:
            raise DataError(f"{series_csv}: expected {t} rows, got {len(rows)}")
        y = np.array(rows)
    else:
        raise DataError(f"{bundle_dir}: neither series.f64 nor series.csv present")
    return Dataset(Y=y, Xfull=design, P=p), mask


def write_truth_csv(truth: GroundTruth, path: str | Path) -> None:
    """Per-voxel true values: voxel, parameter, true_value rows."""
    k, n = truth.W.shape
    p = truth.A.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["voxel", "parameter", "true_value"])
        for voxel in range(n):
            for kk in range(k):
                writer.writerow([voxel, f"w{kk + 1}", repr(float(truth.W[kk, voxel]))])
            for pp in range(p):
                writer.writerow([voxel, f"a{pp + 1}", repr(float(truth.A[pp, voxel]))])
            writer.writerow([voxel, "lambda", repr(float(truth.lam[voxel]))])


def read_truth_csv(path: str | Path, n: int, k: int, p: int,
                   seed: int = 0) -> GroundTruth:
    path = Path(path)
    w = np.full((k, n), np.nan)
    a = np.full((p, n), np.nan)
    lam = np.full(n, np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["voxel", "parameter", "true_value"]:
            raise DataError(f"{path}:1: unexpected truth header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns")
            voxel, param, value = int(row[0]), row[1], float(row[2])
            if param == "lambda":
                lam[voxel] = value
            elif param.startswith("w"):
                w[int(param[1:]) - 1, voxel] = value
            elif param.startswith("a"):
                a[int(param[1:]) - 1, voxel] = value
            else:
                raise DataError(f"{path}:{lineno}: unknown parameter {param!r}")
    if np.isnan(w).any() or np.isnan(a).any() or np.isnan(lam).any():
        raise DataError(f"{path}: incomplete truth table")
    return GroundTruth(W=w, A=a, lam=lam, seed=seed)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str | Path, command: str, config: dict,
                   inputs: dict[str, str] | None = None) -> None:
    """Record everything needed to reproduce a run bit-for-bit.

    Deliberately excludes wall-clock information so a rerun with the same
    manifest produces an identical file.
    """
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": inputs or {},
    }
    (Path(out_dir) / "manifest.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )


def hash_inputs(paths: list[str | Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = sha256_file(p)
    return out

"""Evaluation statistics over replicate sets and activation maps.

Covers voxel-averaged squared bias / MSE / posterior variance across
replicates, image-truth correlation, global spatial autocorrelation
(Moran's I with reciprocal-centroid-distance weights), posterior
probability maps with effect and probability thresholds, sensitivity
curves, and side-by-side method comparisons.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import DataError
from .lattice import Mask
from .simulate import GroundTruth
from .summary import PosteriorSummary

Block = tuple[str, int]


@dataclass
class ReplicateSet:
    """Fitted summaries for every replicate of one scenario, one method."""

    method: str
    summaries: list[PosteriorSummary]
    truth: GroundTruth

    def __post_init__(self):
        if not self.summaries:
            raise DataError("replicate set is empty")
        dims = {s.dims for s in self.summaries}
        if len(dims) != 1:
            raise DataError(f"replicates disagree on dimensions: {dims}")
        n, k, p = self.summaries[0].dims
        if self.truth.W.shape != (k, n) or self.truth.A.shape != (p, n):
            raise DataError("ground truth shape does not match the summaries")

    @property
    def n_reps(self) -> int:
        return len(self.summaries)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.summaries[0].dims

    def estimates(self, block: Block) -> np.ndarray:
        """Posterior-mean images, shape (J, N)."""
        kind, row = block
        attr = "w_mean" if kind == "w" else "a_mean"
        return np.stack([getattr(s, attr)[row] for s in self.summaries])

    def variances(self, block: Block) -> np.ndarray | None:
        kind, row = block
        attr = "w_var" if kind == "w" else "a_var"
        vals = [getattr(s, attr) for s in self.summaries]
        if any(v is None for v in vals):
            return None
        return np.stack([v[row] for v in vals])

    def truth_image(self, block: Block) -> np.ndarray:
        kind, row = block
        return (self.truth.W if kind == "w" else self.truth.A)[row]

    def blocks(self) -> list[Block]:
        _, k, p = self.dims
        return [("w", i) for i in range(k)] + [("a", i) for i in range(p)]


@dataclass(frozen=True)
class SummaryStats:
    asbias: float
    amse: float
    avar: float | None
    correlation: float


def summary_stats(rep_set: ReplicateSet, block: Block) -> SummaryStats:
    """Replicate-averaged error statistics for one coefficient image.

    Squared bias averages the per-voxel squared deviation of the mean
    estimate from truth; MSE and posterior variance average over voxels and
    replicates; correlation is the mean over replicates of the Pearson
    correlation between estimate and truth images. A missing posterior
    variance (point estimators) yields avar = None rather than zero.
    """
    est = rep_set.estimates(block)           # (J, N)
    truth = rep_set.truth_image(block)       # (N,)
    asbias = float(np.mean((est.mean(axis=0) - truth) ** 2))
    amse = float(np.mean((est - truth) ** 2))
    var = rep_set.variances(block)
    avar = None if var is None else float(np.mean(var))
    corrs = []
    for j in range(est.shape[0]):
        e = est[j]
        if truth.size < 2 or np.std(e) == 0 or np.std(truth) == 0:
            corrs.append(float("nan"))
        else:
            corrs.append(float(np.corrcoef(e, truth)[0, 1]))
    return SummaryStats(
        asbias=asbias, amse=amse, avar=avar, correlation=_nanmean_or_nan(corrs)
    )


def _nanmean_or_nan(values) -> float:
    arr = np.asarray(values, float)
    if np.all(np.isnan(arr)):
        return float("nan")
    return float(np.nanmean(arr))


@dataclass(frozen=True)
class MoranWeights:
    """Reciprocal centroid-distance weights with a zero diagonal."""

    phi: np.ndarray

    @classmethod
    def from_mask(cls, mask: Mask) -> "MoranWeights":
        cent = mask.centroids
        if cent.shape[0] > 5000:
            raise DataError(
                "dense Moran weights limited to 5000 voxels; compute per slice"
            )
        diff = cent[:, None, :] - cent[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        with np.errstate(divide="ignore"):
            phi = np.where(dist > 0, 1.0 / dist, 0.0)
        return cls(phi=phi)


def morans_i(values: np.ndarray, weights: MoranWeights) -> float:
    """Global spatial autocorrelation of one image under the given weights."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.shape[0] != weights.phi.shape[0]:
        raise DataError("image length does not match the weight matrix")
    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise DataError("Moran's I undefined (zero variance image)")
    phi_sum = float(weights.phi.sum())
    num = float(z @ (weights.phi @ z))
    return (x.shape[0] / phi_sum) * (num / denom)


def amoran(rep_set: ReplicateSet, block: Block, weights: MoranWeights) -> float:
    """Average Moran's I of the estimate images across replicates."""
    vals = [_safe_moran(img, weights) for img in rep_set.estimates(block)]
    return _nanmean_or_nan(vals)


def _safe_moran(img: np.ndarray, weights: MoranWeights) -> float:
    """Moran's I, or NaN for constant images where it is undefined."""
    if np.std(img) == 0:
        return float("nan")
    return morans_i(img, weights)


@dataclass(frozen=True)
class Contrast:
    """Linear combination of regression coefficients with PPM thresholds.

    gamma_e is either a number (effect units) or a rule: ("top_quantile", q)
    marks the top fraction q of point estimates, ("above_global_mean", pct)
    sits pct percent above the global mean of the point estimates.
    """

    c: np.ndarray
    gamma_e: float | tuple
    gamma_p: float

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, float))
        if not np.any(self.c != 0):
            raise DataError("contrast vector must be nonzero")
        if not 0 < self.gamma_p < 1:
            raise DataError("gamma_p must lie in (0, 1)")


def resolve_gamma_e(contrast: Contrast, point_estimates: np.ndarray) -> float:
    """Turn a gamma_e rule into a number using the given contrast image."""
    rule = contrast.gamma_e
    if not isinstance(rule, tuple):
        return float(rule)
    kind = rule[0]
    if kind == "top_quantile":
        q = float(rule[1])
        if not 0 < q < 1:
            raise DataError("top_quantile fraction must lie in (0, 1)")
        return float(np.quantile(point_estimates, 1.0 - q))
    if kind == "above_global_mean":
        pct = float(rule[1])
        mean = float(np.mean(point_estimates))
        return mean + abs(mean) * pct / 100.0
    raise DataError(f"unknown gamma_e rule {rule!r}")


@dataclass(frozen=True)
class PpmResult:
    probabilities: np.ndarray
    active: np.ndarray
    gamma_e: float
    gamma_p: float


def ppm(summary: PosteriorSummary, contrast: Contrast) -> PpmResult:
    """Per-voxel posterior probability that the contrast exceeds gamma_e.

    Uses retained draws when the summary carries them (sampling backends);
    otherwise the per-voxel Gaussian of the coefficients (variational
    backend). Point-only summaries cannot produce a PPM.
    """
    n, k, _ = summary.dims
    if contrast.c.shape != (k,):
        raise DataError(f"contrast has length {contrast.c.shape}, expected {k}")
    point = contrast.c @ summary.w_mean  # (N,)
    gamma_e = resolve_gamma_e(contrast, point)
    if summary.w_draws is not None:
        draws = np.einsum("k,dkn->dn", contrast.c, summary.w_draws)
        probs = np.mean(draws > gamma_e, axis=0)
    elif summary.w_cov is not None:
        var = np.einsum("k,nkl,l->n", contrast.c, summary.w_cov, contrast.c)
        sd = np.sqrt(np.maximum(var, 1e-300))
        probs = ndtr((point - gamma_e) / sd)
    else:
        raise DataError(
            f"summary from method {summary.method!r} carries neither draws nor "
            "coefficient covariances; cannot form a probability map"
        )
    return PpmResult(
        probabilities=np.asarray(probs, float),
        active=np.asarray(probs > contrast.gamma_p),
        gamma_e=gamma_e,
        gamma_p=contrast.gamma_p,
    )


def true_activation(truth: GroundTruth, contrast: Contrast) -> np.ndarray:
    """Activation mask implied by the true coefficients under the same rule."""
    point = contrast.c @ truth.W
    gamma_e = resolve_gamma_e(contrast, point)
    return point > gamma_e


def sensitivity_curve(
    probabilities: np.ndarray,
    truth_active: np.ndarray,
    thresholds: np.ndarray | None = None,
) -> np.ndarray:
    """Fraction of truly active voxels detected at each probability threshold.

    Returns an array of (threshold, sensitivity) rows; thresholds default to
    a grid over [0.9, 1].
    """
    truth_active = np.asarray(truth_active, bool)
    if not truth_active.any():
        raise DataError("truth activation set is empty")
    if thresholds is None:
        thresholds = np.linspace(0.9, 1.0, 21)
    probs = np.asarray(probabilities, float)[truth_active]
    rows = [(float(t), float(np.mean(probs >= t))) for t in thresholds]
    return np.array(rows)


@dataclass
class ComparisonReport:
    """Pairwise method comparison over matched replicate sets."""

    method_a: str
    method_b: str
    amse_ratio: dict[str, float]          # per block, AMSE_a / AMSE_b
    mean_amse_ratio: float                # averaged over all W and A blocks
    estimate_correlation: dict[str, float]
    var_log_ratio: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    moran_a: dict[str, float] = field(default_factory=dict)
    moran_b: dict[str, float] = field(default_factory=dict)


def _block_name(block: Block) -> str:
    return f"{block[0]}{block[1] + 1}"


def compare_report(
    set_a: ReplicateSet,
    set_b: ReplicateSet,
    weights: MoranWeights | None = None,
) -> ComparisonReport:
    """AMSE ratios, cross-method estimate correlation, variance log-ratios."""
    if set_a.dims != set_b.dims or set_a.n_reps != set_b.n_reps:
        raise DataError("replicate sets are not matched")
    ratios: dict[str, float] = {}
    corrs: dict[str, float] = {}
    var_lr: dict[str, np.ndarray] = {}
    moran_a: dict[str, float] = {}
    moran_b: dict[str, float] = {}
    for block in set_a.blocks():
        name = _block_name(block)
        sa = summary_stats(set_a, block)
        sb = summary_stats(set_b, block)
        ratios[name] = sa.amse / sb.amse
        ea, eb = set_a.estimates(block), set_b.estimates(block)
        cs = []
        for j in range(ea.shape[0]):
            if np.std(ea[j]) == 0 or np.std(eb[j]) == 0:
                cs.append(float("nan"))
            else:
                cs.append(float(np.corrcoef(ea[j], eb[j])[0, 1]))
        corrs[name] = _nanmean_or_nan(cs)
        va, vb = set_a.variances(block), set_b.variances(block)
        if va is not None and vb is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                var_lr[name] = np.log(va.mean(axis=0) / vb.mean(axis=0))
        if weights is not None:
            moran_a[name] = amoran(set_a, block, weights)
            moran_b[name] = amoran(set_b, block, weights)
    return ComparisonReport(
        method_a=set_a.method,
        method_b=set_b.method,
        amse_ratio=ratios,
        mean_amse_ratio=float(np.mean(list(ratios.values()))),
        estimate_correlation=corrs,
        var_log_ratio=var_lr,
        moran_a=moran_a,
        moran_b=moran_b,
    )


# ---- report writers --------------------------------------------------------

def write_stats_table(
    rep_set: ReplicateSet,
    path: str | Path,
    weights: MoranWeights | None = None,
    truth_moran: bool = True,
) -> dict:
    """Write the per-block statistics table as CSV, and return the dict form.

    Layout: one column per coefficient image (W1..WK then A1..AP), rows for
    each measure, method column first.
    """
    blocks = rep_set.blocks()
    names = [_block_name(b) for b in blocks]
    stats = {name: summary_stats(rep_set, b) for name, b in zip(names, blocks)}
    rows: list[list] = []
    doc: dict = {"method": rep_set.method, "columns": names, "measures": {}}

    def add_row(method: str, measure: str, values: list):
        rows.append([method, measure] + values)
        doc["measures"].setdefault(method, {})[measure] = values

    if truth_moran and weights is not None:
        add_row(
            "true", "moran_i",
            [_safe_moran(rep_set.truth_image(b), weights) for b in blocks],
        )
    add_row(rep_set.method, "asbias", [stats[nm].asbias for nm in names])
    add_row(rep_set.method, "amse", [stats[nm].amse for nm in names])
    add_row(
        rep_set.method, "avar",
        [stats[nm].avar if stats[nm].avar is not None else "" for nm in names],
    )
    add_row(rep_set.method, "correlation", [stats[nm].correlation for nm in names])
    if weights is not None:
        add_row(rep_set.method, "moran_i", [amoran(rep_set, b, weights) for b in blocks])

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "measure"] + names)
        for row in rows:
            writer.writerow(row)
    return doc


def write_json(doc: dict, path: str | Path) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not JSON serializable: {type(o)}")

    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=default))


def image_to_grid(values: np.ndarray, mask: Mask) -> np.ndarray:
    """Scatter a per-voxel image onto the full grid (NaN outside the mask)."""
    grid = np.full(mask.dims, np.nan)
    grid[tuple(mask.coords.T)] = values
    return grid


def write_grid_csv(grid: np.ndarray, path: str | Path) -> None:
    flat = grid.reshape(-1, grid.shape[-1])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in flat:
            writer.writerow(["" if math.isnan(v) else repr(float(v)) for v in row])


def write_pgm(grid: np.ndarray, path: str | Path) -> None:
    """8-bit grayscale map of a 2-D grid; NaN (outside mask) renders black."""
    if grid.ndim != 2:
        raise DataError("PGM export expects a 2-D grid")
    finite = grid[np.isfinite(grid)]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo if hi > lo else 1.0
    scaled = np.zeros(grid.shape, dtype=int)
    ok = np.isfinite(grid)
    scaled[ok] = np.clip(np.round(1 + 254 * (grid[ok] - lo) / span), 1, 255).astype(int)
    lines = ["P2", f"{grid.shape[1]} {grid.shape[0]}", "255"]
    for row in scaled:
        lines.append(" ".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")

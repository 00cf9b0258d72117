"""Synthetic dataset generation under the model's own data mechanism.

Ground-truth coefficient images are drawn from the lattice smoothing priors
via a banded Cholesky factor of StS; each replicate then adds a fresh AR
noise path per voxel. Preset scenarios mirror the three published simulation
studies at a desk-friendly grid size, with the full-size grid available.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
from scipy.stats import gamma as gamma_dist

from .errors import DataError, NumericalError
from .lattice import Mask, SpatialKernel, build_kernel
from .model import Dataset

TR_SECONDS = 2.0
N_SCANS = 351

# Fixed event-onset tables (seconds) for the four stimulus conditions of the
# preset designs. Jittered interleaved event-related schedule, ~22 events per
# condition over a 702 s run.
_ONSETS = (
    [15.6, 35.9, 59.2, 83.4, 135.2, 144.1, 188.5, 196.6, 224.8, 232.8, 256.1,
     338.2, 380.6, 420.8, 427.3, 455.0, 463.0, 512.7, 551.4, 606.8, 650.2, 664.3],
    [28.2, 44.8, 53.5, 173.3, 208.4, 217.3, 293.1, 309.2, 330.5, 363.3, 372.0,
     387.3, 395.8, 407.4, 414.0, 441.4, 534.0, 560.3, 598.3, 615.7, 628.6, 656.3],
    [67.2, 75.5, 99.2, 119.5, 158.2, 240.7, 287.0, 317.2, 324.5, 343.9, 401.4,
     433.1, 447.2, 478.4, 487.3, 504.3, 527.6, 582.4, 591.1, 621.6, 636.2, 642.0],
    [21.9, 92.3, 105.0, 110.6, 128.1, 151.4, 164.5, 181.3, 202.5, 248.5, 263.9,
     270.8, 279.1, 301.8, 351.1, 357.4, 471.7, 495.8, 520.3, 542.8, 567.1, 573.7],
)


@dataclass(frozen=True)
class SimScenario:
    """One simulation protocol: priors, design, mask, replicate count."""

    name: str
    alpha: np.ndarray            # (K,) coefficient precisions
    beta: np.ndarray             # (P,) AR precisions
    lambda_spec: tuple           # ("fixed", value) or ("gamma", shape, scale)
    design: np.ndarray           # (T, K) full design
    mask: Mask
    n_reps: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, float))
        object.__setattr__(self, "beta", np.asarray(self.beta, float))
        object.__setattr__(self, "design", np.asarray(self.design, float))
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise DataError("scenario precisions must be positive")
        if self.n_reps < 1:
            raise DataError("need at least one replicate")
        kind = self.lambda_spec[0]
        if kind not in ("fixed", "gamma"):
            raise DataError(f"unknown lambda spec {kind!r}")
        if self.design.shape[1] != self.alpha.shape[0]:
            raise DataError("design column count must match len(alpha)")

    @property
    def K(self) -> int:
        return self.alpha.shape[0]

    @property
    def P(self) -> int:
        return self.beta.shape[0]

    @property
    def T(self) -> int:
        return self.design.shape[0]


@dataclass(frozen=True)
class GroundTruth:
    """True parameter values shared by all replicates of a scenario."""

    W: np.ndarray        # (K, N)
    A: np.ndarray        # (P, N)
    lam: np.ndarray      # (N,)
    seed: int


class _BandedCholesky:
    """Upper banded Cholesky of a sparse SPD matrix, for prior sampling."""

    def __init__(self, sts):
        coo = sts.tocoo()
        self.n = sts.shape[0]
        self.bw = int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0
        ab = np.zeros((self.bw + 1, self.n))
        for i, j, v in zip(coo.row, coo.col, coo.data):
            if i <= j:
                ab[self.bw + i - j, j] = v
        try:
            self.factor = sla.cholesky_banded(ab, lower=False)
        except sla.LinAlgError as exc:
            raise NumericalError("precision matrix is not positive definite") from exc

    def sample_zero_mean(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw `size` vectors with covariance StS^-1, shape (size, n)."""
        z = rng.standard_normal((self.n, size))
        x = sla.solve_banded((0, self.bw), self.factor, z)
        return x.T


def draw_truth(scenario: SimScenario, kernel: SpatialKernel) -> GroundTruth:
    """Draw true W, A rows from the smoothing priors and lam from its spec."""
    if kernel.n_voxels != scenario.mask.n_voxels:
        raise DataError("kernel does not match the scenario mask")
    rng = np.random.default_rng(scenario.seed)
    chol = _BandedCholesky(kernel.StS)
    w_rows = chol.sample_zero_mean(rng, scenario.K)
    W = w_rows / np.sqrt(scenario.alpha)[:, None]
    a_rows = chol.sample_zero_mean(rng, scenario.P)
    A = a_rows / np.sqrt(scenario.beta)[:, None]
    kind = scenario.lambda_spec[0]
    if kind == "fixed":
        lam = np.full(kernel.n_voxels, float(scenario.lambda_spec[1]))
    else:
        shape, scale = scenario.lambda_spec[1], scenario.lambda_spec[2]
        lam = rng.gamma(shape, scale, size=kernel.n_voxels)
    return GroundTruth(W=W, A=A, lam=lam, seed=scenario.seed)


def _stationary_start(a: np.ndarray, noise_sd: float,
                      rng: np.random.Generator) -> np.ndarray | None:
    """Draw (e_1..e_P) from the stationary law; None if the AR is unstable."""
    p = a.shape[0]
    companion = np.zeros((p, p))
    companion[0] = a
    if p > 1:
        companion[1:, :-1] = np.eye(p - 1)
    if np.max(np.abs(np.linalg.eigvals(companion))) >= 1.0 - 1e-10:
        return None
    q = np.zeros((p, p))
    q[0, 0] = noise_sd**2
    cov = sla.solve_discrete_lyapunov(companion, q)
    chol = np.linalg.cholesky(cov + 1e-15 * np.eye(p))
    # State vector is (e_t, ..., e_{t-P+1}); reverse to (e_1, ..., e_P).
    return (chol @ rng.standard_normal(p))[::-1]


def generate_replicate(
    truth: GroundTruth,
    scenario: SimScenario,
    rep_index: int,
) -> Dataset:
    """Simulate one replicate dataset from the ground truth.

    Errors follow the per-voxel AR recursion; the first P values of each
    series carry the design signal plus either a stationary-law error draw
    or, for unstable AR coefficients, a burned-in recursion started at zero.
    Unstable draws only warn, since the prior does not rule them out.
    """
    rng = np.random.default_rng(np.random.SeedSequence((scenario.seed, 1 + rep_index)))
    T, N, P = scenario.T, truth.W.shape[1], scenario.P
    X = scenario.design
    noise_sd = np.where(np.isinf(truth.lam), 0.0, 1.0 / np.sqrt(truth.lam))

    E = np.empty((T, N))
    unstable = 0
    for n in range(N):
        a = truth.A[:, n]
        sd = noise_sd[n]
        start = _stationary_start(a, sd, rng) if sd > 0 else np.zeros(P)
        if start is None:
            unstable += 1
            burn = 10 * P
            e = np.zeros(burn + T)
            z = rng.standard_normal(burn + T) * sd
            for t in range(P, burn + T):
                e[t] = a @ e[t - P:t][::-1] + z[t]
            E[:, n] = e[burn:]
        else:
            e = np.empty(T)
            e[:P] = start
            z = rng.standard_normal(T - P) * sd
            for t in range(P, T):
                e[t] = a @ e[t - P:t][::-1] + z[t - P]
            E[:, n] = e
    if unstable:
        warnings.warn(
            f"{unstable} voxel(s) have non-stationary AR coefficients; "
            "used zero-start burn-in",
            stacklevel=2,
        )
    Y = X @ truth.W + E
    return Dataset(Y=Y, Xfull=X, P=P)


def _hrf_basis(with_derivatives: bool) -> np.ndarray:
    """Canonical two-gamma response (peak scaled to 1), optionally with its
    temporal and dispersion derivatives, sampled on the scan grid."""
    t = np.arange(0.0, 32.0, 0.1)

    def shape_fn(ts, dispersion=1.0):
        h = gamma_dist.pdf(ts, 6.0, scale=dispersion) - \
            gamma_dist.pdf(ts, 16.0, scale=dispersion) / 6.0
        return h

    h = shape_fn(t)
    h = h / h.max()
    if not with_derivatives:
        return h[None, :]
    dt = (shape_fn(t) - shape_fn(t - 1.0)) / 1.0
    dd = (shape_fn(t) - shape_fn(t, dispersion=1.01)) / 0.01
    scale = shape_fn(t).max()
    return np.stack([h, dt / scale, dd / scale])


def _preset_design(n_basis: int) -> np.ndarray:
    """Design for the preset scenarios: four conditions convolved with the
    response basis, plus a constant column."""
    fine_dt = 0.1
    n_fine = int(N_SCANS * TR_SECONDS / fine_dt)
    basis = _hrf_basis(with_derivatives=(n_basis == 3))
    cols = []
    for onsets in _ONSETS:
        stick = np.zeros(n_fine)
        for onset in onsets:
            stick[int(round(onset / fine_dt))] = 1.0
        for b in range(basis.shape[0]):
            conv = np.convolve(stick, basis[b])[:n_fine]
            cols.append(conv[:: int(TR_SECONDS / fine_dt)])
    cols.append(np.ones(N_SCANS))
    return np.column_stack(cols)


def design_k5() -> np.ndarray:
    """Four canonical-response regressors plus a constant (K = 5)."""
    return _preset_design(1)


def design_k13() -> np.ndarray:
    """Four conditions x (canonical, temporal, dispersion) plus constant."""
    return _preset_design(3)


def desk_mask() -> Mask:
    """Default desk-scale spatial domain: a full 20 x 20 block."""
    return Mask.full(20, 20)


def brain_mask() -> Mask:
    """Deterministic brain-shaped mask on a 53 x 63 grid with 2087 voxels."""
    target = 2087
    rows, cols = 53, 63
    i, j = np.mgrid[0:rows, 0:cols].astype(float)
    r = ((i - 26.0) / 23.5) ** 2 + ((j - 31.0) / 28.0) ** 2
    inside = r <= 1.0
    count = int(inside.sum())
    order = np.argsort(r, axis=None, kind="stable")
    flat = inside.ravel()
    if count > target:
        drop = [idx for idx in order if flat[idx]][target:]
        flat[drop] = False
    elif count < target:
        add = [idx for idx in order if not flat[idx]][: target - count]
        flat[add] = True
    mask = Mask((rows, cols), flat.reshape(rows, cols))
    assert mask.n_voxels == target
    return mask


def preset_scenarios(scale: str = "desk", seed: int = 0) -> dict[str, SimScenario]:
    """The three study presets at the requested scale.

    Desk scale swaps the published 53 x 63 brain mask and 100 replicates for
    a 20 x 20 block and 20 replicates; everything else is unchanged.
    """
    if scale == "desk":
        mask, n_reps = desk_mask(), 20
    elif scale == "full":
        mask, n_reps = brain_mask(), 100
    else:
        raise DataError(f"unknown scale {scale!r} (expected 'desk' or 'full')")
    d5 = design_k5()
    d13 = design_k13()
    return {
        "study1": SimScenario(
            name="study1",
            alpha=np.ones(5),
            beta=np.array([1000.0]),
            lambda_spec=("gamma", 10.0, 10.0),
            design=d5, mask=mask, n_reps=n_reps, seed=seed,
        ),
        "study2": SimScenario(
            name="study2",
            alpha=np.array([0.1, 0.1, 0.1, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0,
                            2.0, 2.0, 2.0, 1.0]),
            beta=np.array([1000.0, 2000.0, 5000.0]),
            lambda_spec=("gamma", 10.0, 10.0),
            design=d13, mask=mask, n_reps=n_reps, seed=seed,
        ),
        "study3": SimScenario(
            name="study3",
            alpha=np.array([100.0, 100.0, 100.0, 100.0, 0.01]),
            beta=np.array([400.0]),
            lambda_spec=("fixed", 0.1),
            design=d5, mask=mask, n_reps=n_reps, seed=seed,
        ),
    }


def scenario_kernel(scenario: SimScenario) -> SpatialKernel:
    return build_kernel(scenario.mask)


def with_overrides(scenario: SimScenario, **kw) -> SimScenario:
    """Copy a scenario with selected fields replaced (reps, seed, mask...)."""
    return replace(scenario, **kw)

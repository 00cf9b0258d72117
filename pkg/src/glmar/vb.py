"""Mean-field variational fitting by coordinate ascent.

The posterior is approximated by a product of per-voxel Gaussian factors for
the regression and AR coefficient vectors and Gamma factors for every
precision. Each update replaces one factor with its exact conjugate solution
given the current moments of the others, so the free energy (the evidence
lower bound) never decreases; that monotonicity is the correctness signal
the test suite leans on.

Factors may be pinned to point values (conditioning) for reduced-model
diagnostics; pinned factors contribute no entropy and are never updated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from .errors import DataError, NumericalError
from .lattice import SpatialKernel
from .model import (
    Dataset,
    HyperPriors,
    ParamState,
    SuffStats,
    ols_init,
    precompute_suffstats,
)
from .summary import PosteriorSummary

LOG_2PI = math.log(2.0 * math.pi)
ALL_FACTORS = ("w", "a", "alpha", "beta", "lambda")


@dataclass(frozen=True)
class VBConfig:
    max_iter: int = 200
    tol: float = 1e-6                     # relative free-energy change
    sweep: str = "sequential"             # or "colored"
    update_factors: tuple[str, ...] = ALL_FACTORS
    fixed_alpha: np.ndarray | None = None
    fixed_beta: np.ndarray | None = None
    fixed_lambda: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1:
            raise DataError("tol must be positive and max_iter >= 1")
        if self.sweep not in ("sequential", "colored"):
            raise DataError(f"unknown sweep mode {self.sweep!r}")
        unknown = set(self.update_factors) - set(ALL_FACTORS)
        if unknown:
            raise DataError(f"unknown factor blocks {sorted(unknown)}")
        for name in ("alpha", "beta", "lambda"):
            if getattr(self, f"fixed_{name}") is not None and name in self.update_factors:
                raise DataError(f"factor {name!r} cannot be both fixed and updated")


@dataclass
class VBPosterior:
    """Converged (or best available) factorized posterior."""

    w_mean: np.ndarray                 # (N, K)
    w_cov: np.ndarray                  # (N, K, K)
    a_mean: np.ndarray                 # (N, P)
    a_cov: np.ndarray                  # (N, P, P)
    alpha_shape: np.ndarray | None     # (K,) None when pinned
    alpha_rate: np.ndarray | None
    beta_shape: np.ndarray | None
    beta_rate: np.ndarray | None
    lambda_shape: np.ndarray | None
    lambda_rate: np.ndarray | None
    alpha_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    beta_mean: np.ndarray = field(default=None)   # type: ignore[assignment]
    lambda_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    free_energy_trace: list[float] = field(default_factory=list)
    converged: bool = True
    n_iter_used: int = 0
    final_rel_change: float = float("nan")


def _greedy_coloring(kernel: SpatialKernel) -> list[np.ndarray]:
    """Color the StS interaction graph greedily in scan order."""
    sts = kernel.StS
    n = kernel.n_voxels
    colors = np.full(n, -1, dtype=int)
    for v in range(n):
        lo, hi = sts.indptr[v], sts.indptr[v + 1]
        nb = sts.indices[lo:hi]
        used = {colors[u] for u in nb if u != v and colors[u] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[v] = c
    return [np.flatnonzero(colors == c) for c in range(colors.max() + 1)]


class MeanFieldFit:
    """Coordinate-ascent state for one dataset.

    Holds the factor parameters and the derived moments every update needs.
    `update_factor` applies a single exact conjugate update; `sweep` runs one
    full pass in the configured order; `free_energy` evaluates the bound.
    """

    def __init__(
        self,
        stats: SuffStats,
        kernel: SpatialKernel,
        hp: HyperPriors,
        cfg: VBConfig,
        init: ParamState,
    ):
        if stats.N != kernel.n_voxels:
            raise DataError("sufficient statistics and kernel disagree on voxel count")
        self.stats = stats
        self.kernel = kernel
        self.hp = hp
        self.cfg = cfg
        n, k, p = stats.N, stats.K, stats.P
        self.n, self.k, self.p = n, k, p
        self.hdf = 0.5 * stats.n_obs

        self.w_mean = init.W.T.copy()
        self.w_cov = np.zeros((n, k, k))
        self.a_mean = init.A.T.copy()
        self.a_cov = np.zeros((n, p, p))

        self.alpha_shape: np.ndarray | None = None
        self.alpha_rate: np.ndarray | None = None
        self.beta_shape: np.ndarray | None = None
        self.beta_rate: np.ndarray | None = None
        self.lambda_shape: np.ndarray | None = None
        self.lambda_rate: np.ndarray | None = None

        self._point_alpha = (
            np.asarray(cfg.fixed_alpha, float)
            if cfg.fixed_alpha is not None else init.alpha.copy()
        )
        self._point_beta = (
            np.asarray(cfg.fixed_beta, float)
            if cfg.fixed_beta is not None else init.beta.copy()
        )
        self._point_lambda = (
            np.asarray(cfg.fixed_lambda, float)
            if cfg.fixed_lambda is not None else init.lam.copy()
        )

        sts = kernel.StS
        self.sts_diag = sts.diagonal()
        self._row_cols: list[np.ndarray] = []
        self._row_vals: list[np.ndarray] = []
        for v in range(n):
            lo, hi = sts.indptr[v], sts.indptr[v + 1]
            cols = sts.indices[lo:hi]
            vals = sts.data[lo:hi]
            keep = cols != v
            self._row_cols.append(cols[keep])
            self._row_vals.append(vals[keep])
        self._colors = _greedy_coloring(kernel) if cfg.sweep == "colored" else None

        self.free_energy_trace: list[float] = []

    # ---- moments ---------------------------------------------------------

    def e_alpha(self) -> np.ndarray:
        if self.alpha_shape is None:
            return self._point_alpha
        return self.alpha_shape / self.alpha_rate

    def e_log_alpha(self) -> np.ndarray:
        if self.alpha_shape is None:
            return np.log(self._point_alpha)
        return digamma(self.alpha_shape) - np.log(self.alpha_rate)

    def e_beta(self) -> np.ndarray:
        if self.beta_shape is None:
            return self._point_beta
        return self.beta_shape / self.beta_rate

    def e_log_beta(self) -> np.ndarray:
        if self.beta_shape is None:
            return np.log(self._point_beta)
        return digamma(self.beta_shape) - np.log(self.beta_rate)

    def e_lambda(self) -> np.ndarray:
        if self.lambda_shape is None:
            return self._point_lambda
        return self.lambda_shape / self.lambda_rate

    def e_log_lambda(self) -> np.ndarray:
        if self.lambda_shape is None:
            return np.log(self._point_lambda)
        return digamma(self.lambda_shape) - np.log(self.lambda_rate)

    def _omega(self, idx) -> np.ndarray:
        """E[a* a*^T] for the selected voxels; a* = (-1, a)."""
        m = self.a_mean[idx]
        c = self.a_cov[idx]
        if m.ndim == 1:
            out = np.empty((self.p + 1, self.p + 1))
            out[0, 0] = 1.0
            out[0, 1:] = -m
            out[1:, 0] = -m
            out[1:, 1:] = c + np.outer(m, m)
            return out
        nn = m.shape[0]
        out = np.empty((nn, self.p + 1, self.p + 1))
        out[:, 0, 0] = 1.0
        out[:, 0, 1:] = -m
        out[:, 1:, 0] = -m
        out[:, 1:, 1:] = c + m[:, :, None] * m[:, None, :]
        return out

    def _fbar(self, idx) -> np.ndarray:
        """E over q(w) of the residual Gram matrix for the selected voxels."""
        m = self.w_mean[idx]
        c = self.w_cov[idx]
        cyy = self.stats.cyy[idx]
        cyx = self.stats.cyx[idx]
        cxx = self.stats.cxx
        if m.ndim == 1:
            t2 = cyx @ m
            t4 = np.einsum("pqkl,k,l->pq", cxx, m, m) + np.einsum("pqkl,kl->pq", cxx, c)
            return cyy - t2 - t2.T + t4
        t2 = np.einsum("npqk,nk->npq", cyx, m)
        t4 = np.einsum("pqkl,nk,nl->npq", cxx, m, m) + np.einsum(
            "pqkl,nkl->npq", cxx, c
        )
        return cyy - t2 - t2.transpose(0, 2, 1) + t4

    def _neighbor_sum(self, n: int, means: np.ndarray) -> np.ndarray:
        """sum_{m != n} StS[n, m] * means[m] for one voxel."""
        cols = self._row_cols[n]
        if cols.size == 0:
            return np.zeros(means.shape[1])
        return self._row_vals[n] @ means[cols]

    # ---- single-factor updates -------------------------------------------

    def update_w_voxel(self, n: int) -> None:
        om = self._omega(n)
        q = np.einsum("pq,pqkl->kl", om, self.stats.cxx)
        b = np.einsum("pq,pqk->k", om, self.stats.cyx[n])
        e_lam = self.e_lambda()[n]
        e_alpha = self.e_alpha()
        prec = e_lam * q + np.diag(e_alpha * self.sts_diag[n])
        h = e_lam * b - e_alpha * self._neighbor_sum(n, self.w_mean)
        try:
            chol = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"non-SPD precision in w update at voxel {n}") from exc
        cov = _chol_inverse(chol)
        self.w_cov[n] = cov
        self.w_mean[n] = cov @ h

    def update_a_voxel(self, n: int) -> None:
        fbar = self._fbar(n)
        e_lam = self.e_lambda()[n]
        e_beta = self.e_beta()
        prec = e_lam * fbar[1:, 1:] + np.diag(e_beta * self.sts_diag[n])
        h = e_lam * fbar[1:, 0] - e_beta * self._neighbor_sum(n, self.a_mean)
        try:
            chol = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"non-SPD precision in a update at voxel {n}") from exc
        cov = _chol_inverse(chol)
        self.a_cov[n] = cov
        self.a_mean[n] = cov @ h

    def _w_quad(self) -> np.ndarray:
        """E[w_k StS w_k^T] for every k."""
        sts_m = self.kernel.StS @ self.w_mean  # (N, K)
        mean_part = np.einsum("nk,nk->k", self.w_mean, sts_m)
        var_part = self.sts_diag @ np.einsum("nkk->nk", self.w_cov)
        return mean_part + var_part

    def _a_quad(self) -> np.ndarray:
        sts_m = self.kernel.StS @ self.a_mean
        mean_part = np.einsum("np,np->p", self.a_mean, sts_m)
        var_part = self.sts_diag @ np.einsum("npp->np", self.a_cov)
        return mean_part + var_part

    def update_alpha(self) -> None:
        self.alpha_shape = np.full(self.k, self.hp.q1 + 0.5 * self.n)
        self.alpha_rate = 1.0 / self.hp.q2 + 0.5 * self._w_quad()

    def update_beta(self) -> None:
        self.beta_shape = np.full(self.p, self.hp.r1 + 0.5 * self.n)
        self.beta_rate = 1.0 / self.hp.r2 + 0.5 * self._a_quad()

    def update_lambda(self) -> None:
        quad = np.einsum(
            "npq,npq->n", self._omega(slice(None)), self._fbar(slice(None))
        )
        self.lambda_shape = np.full(self.n, self.hp.u1 + self.hdf)
        self.lambda_rate = 1.0 / self.hp.u2 + 0.5 * quad

    def update_factor(self, factor: tuple[str, int] | str) -> None:
        """Apply one exact conjugate update to the named factor."""
        block, idx = factor if isinstance(factor, tuple) else (factor, 0)
        if block == "w":
            self.update_w_voxel(idx)
        elif block == "a":
            self.update_a_voxel(idx)
        elif block == "alpha":
            self.update_alpha()
        elif block == "beta":
            self.update_beta()
        elif block == "lambda":
            self.update_lambda()
        else:
            raise DataError(f"unknown factor block {block!r}")

    # ---- batched color updates -------------------------------------------

    def _update_w_color(self, idx: np.ndarray) -> None:
        om = self._omega(idx)
        q = np.einsum("npq,pqkl->nkl", om, self.stats.cxx)
        b = np.einsum("npq,npqk->nk", om, self.stats.cyx[idx])
        e_lam = self.e_lambda()[idx]
        e_alpha = self.e_alpha()
        prec = e_lam[:, None, None] * q
        prec += e_alpha[None, :, None] * np.eye(self.k) * self.sts_diag[idx, None, None]
        neigh = np.stack([self._neighbor_sum(n, self.w_mean) for n in idx])
        h = e_lam[:, None] * b - e_alpha[None, :] * neigh
        try:
            cov = np.linalg.inv(prec)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("non-SPD precision in batched w update") from exc
        self.w_cov[idx] = 0.5 * (cov + cov.transpose(0, 2, 1))
        self.w_mean[idx] = np.einsum("nkl,nl->nk", self.w_cov[idx], h)

    def _update_a_color(self, idx: np.ndarray) -> None:
        fbar = self._fbar(idx)
        e_lam = self.e_lambda()[idx]
        e_beta = self.e_beta()
        prec = e_lam[:, None, None] * fbar[:, 1:, 1:]
        prec += e_beta[None, :, None] * np.eye(self.p) * self.sts_diag[idx, None, None]
        neigh = np.stack([self._neighbor_sum(n, self.a_mean) for n in idx])
        h = e_lam[:, None] * fbar[:, 1:, 0] - e_beta[None, :] * neigh
        try:
            cov = np.linalg.inv(prec)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("non-SPD precision in batched a update") from exc
        self.a_cov[idx] = 0.5 * (cov + cov.transpose(0, 2, 1))
        self.a_mean[idx] = np.einsum("npq,nq->np", self.a_cov[idx], h)

    # ---- free energy -------------------------------------------------------

    def expected_log_joint(self) -> float:
        """E_q of the joint log density, up to the same constant the model drops."""
        e_lam, e_logl = self.e_lambda(), self.e_log_lambda()
        e_al, e_loga = self.e_alpha(), self.e_log_alpha()
        e_be, e_logb = self.e_beta(), self.e_log_beta()
        quad = np.einsum(
            "npq,npq->n", self._omega(slice(None)), self._fbar(slice(None))
        )
        out = float(np.sum(-0.5 * e_lam * quad + self.hdf * e_logl))
        out += float(np.sum(-0.5 * e_al * self._w_quad() + 0.5 * self.n * e_loga))
        out += float(np.sum(-0.5 * e_be * self._a_quad() + 0.5 * self.n * e_logb))
        out += float(np.sum((self.hp.q1 - 1.0) * e_loga - e_al / self.hp.q2))
        out += float(np.sum((self.hp.r1 - 1.0) * e_logb - e_be / self.hp.r2))
        out += float(np.sum((self.hp.u1 - 1.0) * e_logl - e_lam / self.hp.u2))
        return out

    def entropy(self) -> float:
        out = 0.0
        if "w" in self.cfg.update_factors:
            out += _gaussian_entropy(self.w_cov, self.k)
        if "a" in self.cfg.update_factors:
            out += _gaussian_entropy(self.a_cov, self.p)
        for block, shape, rate in (
            ("alpha", self.alpha_shape, self.alpha_rate),
            ("beta", self.beta_shape, self.beta_rate),
            ("lambda", self.lambda_shape, self.lambda_rate),
        ):
            if block in self.cfg.update_factors and shape is not None:
                out += float(np.sum(_gamma_entropy(shape, rate)))
        return out

    def free_energy(self) -> float:
        """Evidence lower bound, up to the model's dropped constant."""
        return self.expected_log_joint() + self.entropy()

    # ---- driver ------------------------------------------------------------

    def sweep(self) -> None:
        upd = self.cfg.update_factors
        if "w" in upd:
            if self._colors is not None:
                for idx in self._colors:
                    self._update_w_color(idx)
            else:
                for n in range(self.n):
                    self.update_w_voxel(n)
        if "a" in upd:
            if self._colors is not None:
                for idx in self._colors:
                    self._update_a_color(idx)
            else:
                for n in range(self.n):
                    self.update_a_voxel(n)
        if "alpha" in upd:
            self.update_alpha()
        if "beta" in upd:
            self.update_beta()
        if "lambda" in upd:
            self.update_lambda()

    def run(self) -> VBPosterior:
        rel = float("nan")
        converged = False
        for it in range(self.cfg.max_iter):
            self.sweep()
            f = self.free_energy()
            if self.free_energy_trace:
                prev = self.free_energy_trace[-1]
                rel = abs(f - prev) / max(1.0, abs(prev))
            self.free_energy_trace.append(f)
            if self.free_energy_trace and not np.isfinite(f):
                raise NumericalError("free energy became non-finite")
            if it > 0 and rel < self.cfg.tol:
                converged = True
                break
        if not converged:
            warnings.warn(
                f"VB did not converge in {self.cfg.max_iter} sweeps "
                f"(final relative change {rel:.3e})",
                stacklevel=2,
            )
        return self.posterior(converged=converged, rel=rel)

    def posterior(self, converged: bool = True, rel: float = float("nan")) -> VBPosterior:
        return VBPosterior(
            w_mean=self.w_mean.copy(),
            w_cov=self.w_cov.copy(),
            a_mean=self.a_mean.copy(),
            a_cov=self.a_cov.copy(),
            alpha_shape=_copy_or_none(self.alpha_shape),
            alpha_rate=_copy_or_none(self.alpha_rate),
            beta_shape=_copy_or_none(self.beta_shape),
            beta_rate=_copy_or_none(self.beta_rate),
            lambda_shape=_copy_or_none(self.lambda_shape),
            lambda_rate=_copy_or_none(self.lambda_rate),
            alpha_mean=self.e_alpha().copy(),
            beta_mean=self.e_beta().copy(),
            lambda_mean=self.e_lambda().copy(),
            free_energy_trace=list(self.free_energy_trace),
            converged=converged,
            n_iter_used=len(self.free_energy_trace),
            final_rel_change=rel,
        )


def _copy_or_none(arr: np.ndarray | None) -> np.ndarray | None:
    return None if arr is None else arr.copy()


def _chol_inverse(chol: np.ndarray) -> np.ndarray:
    inv_l = np.linalg.inv(chol)
    return inv_l.T @ inv_l


def _gaussian_entropy(covs: np.ndarray, dim: int) -> float:
    try:
        chols = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("non-SPD covariance in entropy computation") from exc
    logdets = 2.0 * np.sum(np.log(np.einsum("nkk->nk", chols)), axis=1)
    return float(np.sum(0.5 * logdets + 0.5 * dim * (1.0 + LOG_2PI)))


def _gamma_entropy(shape: np.ndarray, rate: np.ndarray) -> np.ndarray:
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def summarize_posterior(q: VBPosterior, method: str = "vb") -> PosteriorSummary:
    """Project a factorized posterior onto the shared summary schema."""
    n, k = q.w_mean.shape
    p = q.a_mean.shape[1]
    w_var = np.einsum("nkk->nk", q.w_cov).T.copy()
    a_var = np.einsum("npp->np", q.a_cov).T.copy()

    def gamma_stats(shape, rate, mean):
        if shape is None:
            return mean, np.zeros_like(mean)
        return shape / rate, shape / rate**2

    al_m, al_v = gamma_stats(q.alpha_shape, q.alpha_rate, q.alpha_mean)
    be_m, be_v = gamma_stats(q.beta_shape, q.beta_rate, q.beta_mean)
    la_m, la_v = gamma_stats(q.lambda_shape, q.lambda_rate, q.lambda_mean)
    return PosteriorSummary(
        method=method,
        w_mean=q.w_mean.T.copy(),
        a_mean=q.a_mean.T.copy(),
        alpha_mean=al_m.copy(),
        beta_mean=be_m.copy(),
        lambda_mean=la_m.copy(),
        w_var=w_var,
        a_var=a_var,
        alpha_var=al_v.copy(),
        beta_var=be_v.copy(),
        lambda_var=la_v.copy(),
        w_cov=q.w_cov.copy(),
        a_cov=q.a_cov.copy(),
    )


def run_vb(
    data: Dataset,
    kernel: SpatialKernel,
    hp: HyperPriors,
    cfg: VBConfig,
    init: ParamState | None = None,
) -> tuple[VBPosterior, PosteriorSummary]:
    """Fit the factorized posterior by coordinate ascent to convergence."""
    stats = precompute_suffstats(data)
    state0 = ols_init(data, kernel) if init is None else init
    fit = MeanFieldFit(stats, kernel, hp, cfg, state0)
    q = fit.run()
    return q, summarize_posterior(q)

"""GLM-AR model state, precomputed sufficient statistics, density, gradient.

Per voxel the observed series regresses on a shared design with an AR(P)
error process; rows of the coefficient matrices carry lattice smoothing
priors with precision alpha_k * StS (regression) and beta_p * StS
(autoregression), and Gamma hyperpriors sit on alpha, beta and the per-voxel
noise precision lambda.

The log density and its gradient are evaluated from lag cross-product
tensors accumulated once over time, so repeated evaluations cost
O(N K^2 P^2) regardless of the series length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DataError, NumericalError
from .lattice import SpatialKernel

ALPHA_CLAMP = (1e-6, 1e6)


@dataclass(frozen=True)
class HyperPriors:
    """Gamma shape/scale pairs for the alpha, beta, lambda hyperpriors."""

    q1: float = 0.01
    q2: float = 100.0
    r1: float = 0.01
    r2: float = 100.0
    u1: float = 0.01
    u2: float = 100.0

    def __post_init__(self):
        for name in ("q1", "q2", "r1", "r2", "u1", "u2"):
            if getattr(self, name) <= 0:
                raise DataError(f"hyperprior {name} must be positive")


@dataclass(frozen=True)
class Dataset:
    """Observed series Y (T x N), full design Xfull (T x K), AR order P.

    The trimmed design X drops the first P rows of Xfull; the model
    conditions on the first P observations of each series.
    """

    Y: np.ndarray
    Xfull: np.ndarray
    P: int

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        Xfull = np.asarray(self.Xfull, dtype=float)
        if Y.ndim != 2 or Xfull.ndim != 2:
            raise DataError("Y and Xfull must be 2-D arrays")
        if Y.shape[0] != Xfull.shape[0]:
            raise DataError(
                f"Y has {Y.shape[0]} rows but design has {Xfull.shape[0]}"
            )
        if not (self.P >= 1 and Y.shape[0] > self.P):
            raise DataError(f"need T > P >= 1, got T={Y.shape[0]}, P={self.P}")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "Xfull", Xfull)

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    @property
    def N(self) -> int:
        return self.Y.shape[1]

    @property
    def K(self) -> int:
        return self.Xfull.shape[1]

    @property
    def X(self) -> np.ndarray:
        """Trimmed design: the last T - P rows of Xfull."""
        return self.Xfull[self.P:]


@dataclass
class ParamState:
    """Full parameter vector: W (K x N), A (P x N), lam (N), alpha (K), beta (P).

    Flattening stacks W rows, then A rows, then alpha, beta, lam. A state is
    valid when every precision is strictly positive.
    """

    W: np.ndarray
    A: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if self.W.shape[1] != self.A.shape[1] or self.W.shape[1] != self.lam.shape[0]:
            raise DataError("inconsistent voxel counts across W, A, lam")
        if self.alpha.shape != (self.W.shape[0],) or self.beta.shape != (self.A.shape[0],):
            raise DataError("alpha/beta lengths must match W/A row counts")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(N, K, P)."""
        return self.W.shape[1], self.W.shape[0], self.A.shape[0]

    @property
    def R(self) -> int:
        n, k, p = self.dims
        return (k + p + 1) * n + k + p

    def is_valid(self) -> bool:
        return bool(
            np.all(self.lam > 0) and np.all(self.alpha > 0) and np.all(self.beta > 0)
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.W.ravel(), self.A.ravel(), self.alpha, self.beta, self.lam]
        )

    @classmethod
    def unflatten(cls, vec: np.ndarray, n: int, k: int, p: int) -> "ParamState":
        vec = np.asarray(vec, dtype=float)
        want = (k + p + 1) * n + k + p
        if vec.shape != (want,):
            raise DataError(f"flat vector has length {vec.shape}, expected {want}")
        off = 0
        W = vec[off:off + k * n].reshape(k, n); off += k * n
        A = vec[off:off + p * n].reshape(p, n); off += p * n
        alpha = vec[off:off + k]; off += k
        beta = vec[off:off + p]; off += p
        lam = vec[off:off + n]
        return cls(W=W.copy(), A=A.copy(), lam=lam.copy(),
                   alpha=alpha.copy(), beta=beta.copy())


@dataclass(frozen=True)
class SuffStats:
    """Lag cross-product tensors over t = P+1..T.

    cyy[n, p, q]     = sum_t y[t-p, n] * y[t-q, n]
    cyx[n, p, q, k]  = sum_t y[t-p, n] * Xfull[t-q, k]
    cxx[p, q, k, k'] = sum_t Xfull[t-p, k] * Xfull[t-q, k']
    """

    cyy: np.ndarray
    cyx: np.ndarray
    cxx: np.ndarray
    T: int
    N: int
    K: int
    P: int

    @property
    def n_obs(self) -> int:
        """Number of modelled time points per voxel."""
        return self.T - self.P


def precompute_suffstats(data: Dataset) -> SuffStats:
    """Accumulate the lag cross-product tensors in single passes over time."""
    bad = np.argwhere(~np.isfinite(data.Y))
    if bad.size:
        t, n = bad[0]
        raise DataError(f"non-finite response at time {int(t)}, voxel {int(n)}")
    if not np.isfinite(data.Xfull).all():
        raise DataError("non-finite value in design matrix")

    T, N, K, P = data.T, data.N, data.K, data.P
    p1 = P + 1
    # lagged[p] holds rows t-p for t = P..T-1 (0-based).
    ylag = [data.Y[P - p:T - p] for p in range(p1)]
    xlag = [data.Xfull[P - p:T - p] for p in range(p1)]

    cyy = np.empty((N, p1, p1))
    cyx = np.empty((N, p1, p1, K))
    cxx = np.empty((p1, p1, K, K))
    for p in range(p1):
        for q in range(p1):
            if q >= p:
                cyy[:, p, q] = np.einsum("tn,tn->n", ylag[p], ylag[q])
                cxx[p, q] = xlag[p].T @ xlag[q]
            else:
                cyy[:, p, q] = cyy[:, q, p]
                cxx[p, q] = cxx[q, p].T
            cyx[:, p, q, :] = ylag[p].T @ xlag[q]
    return SuffStats(cyy=cyy, cyx=cyx, cxx=cxx, T=T, N=N, K=K, P=P)


def _astar(A: np.ndarray) -> np.ndarray:
    """Stack (-1, a_1n, ..., a_Pn) per voxel; shape (N, P+1)."""
    n = A.shape[1]
    out = np.empty((n, A.shape[0] + 1))
    out[:, 0] = -1.0
    out[:, 1:] = A.T
    return out


def residual_form(stats: SuffStats, W: np.ndarray) -> np.ndarray:
    """Per-voxel residual Gram matrices F_n, shape (N, P+1, P+1).

    F_n[p, q] = sum_t e[t-p, n] e[t-q, n] with e = y - Xfull w_n, assembled
    from the sufficient statistics (bilinear in (1, w_n)).
    """
    wt = W.T  # (N, K)
    t2 = np.einsum("npqk,nk->npq", stats.cyx, wt)
    # u[p, q, k, n] = (cxx[p, q] @ w_n)[k]
    p1, k = stats.P + 1, stats.K
    u = (stats.cxx.reshape(p1 * p1 * k, k) @ wt.T).reshape(p1, p1, k, -1)
    t4 = np.einsum("pqkn,nk->npq", u, wt)
    return stats.cyy - t2 - t2.transpose(0, 2, 1) + t4


def log_likelihood(state: ParamState, stats: SuffStats) -> float:
    """Data term of the log density, up to an additive constant."""
    astar = _astar(state.A)
    F = residual_form(stats, state.W)
    quad = np.einsum("np,npq,nq->n", astar, F, astar)
    half_df = 0.5 * stats.n_obs
    return float(np.sum(-0.5 * state.lam * quad + half_df * np.log(state.lam)))


def log_prior(state: ParamState, kernel: SpatialKernel, hp: HyperPriors) -> float:
    """Smoothing-prior and hyperprior terms, up to an additive constant."""
    n = kernel.n_voxels
    sts_w = kernel.StS @ state.W.T  # (N, K)
    sts_a = kernel.StS @ state.A.T  # (N, P)
    wq = np.einsum("nk,nk->k", state.W.T, sts_w)
    aq = np.einsum("np,np->p", state.A.T, sts_a)
    la, lb, ll = np.log(state.alpha), np.log(state.beta), np.log(state.lam)
    out = np.sum(-0.5 * state.alpha * wq + 0.5 * n * la)
    out += np.sum(-0.5 * state.beta * aq + 0.5 * n * lb)
    out += np.sum((hp.q1 - 1.0) * la - state.alpha / hp.q2)
    out += np.sum((hp.r1 - 1.0) * lb - state.beta / hp.r2)
    out += np.sum((hp.u1 - 1.0) * ll - state.lam / hp.u2)
    return float(out)


def log_posterior(
    state: ParamState,
    stats: SuffStats,
    kernel: SpatialKernel,
    hp: HyperPriors,
) -> float:
    """Unnormalized log posterior density; -inf for non-positive precisions."""
    if not state.is_valid():
        return -np.inf
    return log_likelihood(state, stats) + log_prior(state, kernel, hp)


def grad_log_posterior(
    state: ParamState,
    stats: SuffStats,
    kernel: SpatialKernel,
    hp: HyperPriors,
) -> np.ndarray:
    """Gradient of the log posterior, flattened in state stacking order."""
    if not state.is_valid():
        raise NumericalError("gradient undefined: state has non-positive precisions")
    N, K, P = stats.N, stats.K, stats.P
    p1 = P + 1
    wt = state.W.T  # (N, K)
    astar = _astar(state.A)  # (N, p1)
    omega = astar[:, :, None] * astar[:, None, :]  # (N, p1, p1)

    # Shared contraction: u[p, q, k, n] = (cxx[p, q] @ w_n)[k]
    u = (stats.cxx.reshape(p1 * p1 * K, K) @ wt.T).reshape(p1, p1, K, N)
    t2 = np.einsum("npqk,nk->npq", stats.cyx, wt)
    t4 = np.einsum("pqkn,nk->npq", u, wt)
    F = stats.cyy - t2 - t2.transpose(0, 2, 1) + t4

    sts_w = kernel.StS @ wt  # (N, K)
    sts_a = kernel.StS @ state.A.T  # (N, P)

    # W block: lam_n * sum_pq omega[p,q] (cyx[n,p,q] - cxx[p,q] w_n) - alpha_k (StS w_k)_n
    dyx = np.einsum("npq,npqk->nk", omega, stats.cyx)
    dxx = np.einsum("npq,pqkn->nk", omega, u)
    gW = state.lam[:, None] * (dyx - dxx) - sts_w * state.alpha[None, :]

    # A block: -lam_n (F a*)_p - beta_p (StS a_p)_n
    f_astar = np.einsum("npq,nq->np", F, astar)
    gA = -state.lam[:, None] * f_astar[:, 1:] - sts_a * state.beta[None, :]

    wq = np.einsum("nk,nk->k", wt, sts_w)
    aq = np.einsum("np,np->p", state.A.T, sts_a)
    g_alpha = -0.5 * wq + (0.5 * N + hp.q1 - 1.0) / state.alpha - 1.0 / hp.q2
    g_beta = -0.5 * aq + (0.5 * N + hp.r1 - 1.0) / state.beta - 1.0 / hp.r2

    quad = np.einsum("np,np->n", astar, f_astar)
    g_lam = -0.5 * quad + (0.5 * stats.n_obs + hp.u1 - 1.0) / state.lam - 1.0 / hp.u2

    return np.concatenate([gW.T.ravel(), gA.T.ravel(), g_alpha, g_beta, g_lam])


def ols_init(data: Dataset, kernel: SpatialKernel) -> ParamState:
    """Starting values from per-voxel least squares.

    W regresses the trimmed series on the trimmed design; A regresses the
    full-design residuals on their own lags; lam is the reciprocal of the
    innovation variance. alpha_k and beta_p are moment-matched to the prior
    quadratic form, N / (row (StS) row^T), and clamped to a sane range.
    """
    T, N, K, P = data.T, data.N, data.K, data.P
    X = data.X
    xtx = X.T @ X
    rank = np.linalg.matrix_rank(xtx)
    if rank < K:
        _, _, piv = sla.qr(X, pivoting=True, mode="economic")
        dep = sorted(int(c) for c in piv[rank:])
        raise DataError(f"design matrix is rank deficient; dependent columns: {dep}")

    W = np.linalg.solve(xtx, X.T @ data.Y[P:])  # (K, N)
    resid = data.Y - data.Xfull @ W  # (T, N), lags from the full design

    elag = np.stack([resid[P - p:T - p] for p in range(1, P + 1)], axis=2)  # (T-P, N, P)
    target = resid[P:]  # (T-P, N)
    A = np.empty((P, N))
    z_var = np.empty(N)
    for n in range(N):
        En = elag[:, n, :]
        g = En.T @ En
        try:
            a_n = np.linalg.solve(g, En.T @ target[:, n])
        except np.linalg.LinAlgError:
            a_n = np.zeros(P)
        A[:, n] = a_n
        z = target[:, n] - En @ a_n
        z_var[n] = max(float(z @ z) / (T - P), 1e-12)
    lam = 1.0 / z_var

    sts = kernel.StS
    lo, hi = ALPHA_CLAMP
    alpha = np.empty(K)
    for k in range(K):
        q = float(W[k] @ (sts @ W[k]))
        alpha[k] = np.clip(N / q if q > 0 else hi, lo, hi)
    beta = np.empty(P)
    for p in range(P):
        q = float(A[p] @ (sts @ A[p]))
        beta[p] = np.clip(N / q if q > 0 else hi, lo, hi)
    return ParamState(W=W, A=A, lam=lam, alpha=alpha, beta=beta)


class PosteriorTarget:
    """Adapter exposing the full-model posterior over flattened states."""

    def __init__(self, stats: SuffStats, kernel: SpatialKernel, hp: HyperPriors):
        self.stats = stats
        self.kernel = kernel
        self.hp = hp
        n, k, p = stats.N, stats.K, stats.P
        self._shape = (n, k, p)
        self.dim = (k + p + 1) * n + k + p
        self._pos_from = (k + p) * n  # alpha, beta, lam live past this offset

    def unflatten(self, x: np.ndarray) -> ParamState:
        n, k, p = self._shape
        return ParamState.unflatten(x, n, k, p)

    def is_valid(self, x: np.ndarray) -> bool:
        return bool(np.all(x[self._pos_from:] > 0))

    def log_density(self, x: np.ndarray) -> float:
        if not self.is_valid(x):
            return -np.inf
        return log_posterior(self.unflatten(x), self.stats, self.kernel, self.hp)

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        return grad_log_posterior(self.unflatten(x), self.stats, self.kernel, self.hp)


class ConditionalWTarget:
    """Posterior over W only, with A and all precisions held at fixed values.

    Used for validating samplers against the closed-form Gaussian posterior
    that exists when the AR coefficients are pinned and the hyperparameters
    are known.
    """

    def __init__(
        self,
        stats: SuffStats,
        kernel: SpatialKernel,
        hp: HyperPriors,
        base: ParamState,
    ):
        self.stats = stats
        self.kernel = kernel
        self.hp = hp
        self.base = base
        n, k, _ = base.dims
        self._kn = k * n
        self.dim = self._kn

    def _state(self, x: np.ndarray) -> ParamState:
        n, k, _ = self.base.dims
        return ParamState(
            W=x.reshape(k, n),
            A=self.base.A,
            lam=self.base.lam,
            alpha=self.base.alpha,
            beta=self.base.beta,
        )

    def is_valid(self, x: np.ndarray) -> bool:
        return True

    def log_density(self, x: np.ndarray) -> float:
        return log_posterior(self._state(x), self.stats, self.kernel, self.hp)

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        g = grad_log_posterior(self._state(x), self.stats, self.kernel, self.hp)
        return g[: self._kn]

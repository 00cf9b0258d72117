"""Hamiltonian Monte Carlo over the full parameter vector.

The sampler proposes with leapfrog trajectories through the log-density
gradient field, adapts the step size toward a target acceptance rate during
burn-in only, and can retune a diagonal mass matrix from pilot-run posterior
variances. States with non-positive precisions have density zero; a
trajectory that wanders there is rejected outright.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .lattice import SpatialKernel
from .model import (
    Dataset,
    HyperPriors,
    ParamState,
    PosteriorTarget,
    ols_init,
    precompute_suffstats,
)
from .summary import PosteriorSummary

MASS_VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class HmcConfig:
    delta0: float = 2e-5          # initial leapfrog step size
    n_leapfrog: int = 250         # leapfrog steps per proposal
    n_iter: int = 3000
    n_burn: int = 2000
    target_accept: float = 0.65
    mass: np.ndarray | None = None  # diagonal mass; default all ones
    adapt_window: int = 50
    adapt_rate: float = 1.0       # multiplier kappa in the adaptation rule
    thin: int = 1
    seed: int = 0
    pilot_rounds: int = 0         # mass-tuning pilot runs before the main run
    pilot_iter: int = 600
    pilot_burn: int = 400
    n_batches: int = 20           # batch count for summary BMSE

    def __post_init__(self):
        if not (0 < self.n_burn < self.n_iter):
            raise DataError("need 0 < n_burn < n_iter")
        if self.delta0 <= 0 or self.n_leapfrog < 1 or self.thin < 1:
            raise DataError("delta0, n_leapfrog, thin must be positive")
        if not 0 < self.target_accept < 1:
            raise DataError("target_accept must lie in (0, 1)")


@dataclass
class HmcState:
    """Current chain position, cached density, and bookkeeping."""

    x: np.ndarray
    log_density: float
    iteration: int = 0
    n_accept: int = 0


@dataclass
class SampleStore:
    """Retained draws and chain diagnostics from one run."""

    draws: np.ndarray              # (n_kept, R)
    accept_trace: np.ndarray       # (n_iter,) 0/1
    energy_error_trace: np.ndarray  # (n_iter,) dH per proposal (inf if flagged)
    delta_final: float
    mass: np.ndarray
    thin: int = 1

    @property
    def n_kept(self) -> int:
        return self.draws.shape[0]

    @property
    def accept_rate(self) -> float:
        return float(np.mean(self.accept_trace))

    def post_burn_accept_rate(self, n_burn: int) -> float:
        return float(np.mean(self.accept_trace[n_burn:]))

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def var(self) -> np.ndarray:
        return self.draws.var(axis=0, ddof=1)


def leapfrog(
    x: np.ndarray,
    xi: np.ndarray,
    delta: float,
    n_steps: int,
    mass: np.ndarray,
    target,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Integrate the dynamics from (x, xi) for n_steps of size delta.

    Momentum moves a half step first, then positions and momenta alternate,
    the final momentum update using delta/2. Returns (x', xi', ok); ok False
    flags a trajectory that left the support or produced a non-finite
    gradient, which the caller must treat as a certain rejection.
    """
    x = np.array(x, dtype=float)
    xi = np.array(xi, dtype=float)
    if not target.is_valid(x):
        return x, xi, False
    g = target.grad_log_density(x)
    if not np.isfinite(g).all():
        return x, xi, False
    xi = xi + 0.5 * delta * g
    inv_mass = 1.0 / mass
    for step in range(n_steps):
        x = x + delta * inv_mass * xi
        if not target.is_valid(x):
            return x, xi, False
        g = target.grad_log_density(x)
        if not np.isfinite(g).all():
            return x, xi, False
        step_size = delta if step < n_steps - 1 else 0.5 * delta
        xi = xi + step_size * g
    return x, xi, True


def hmc_step(
    state: HmcState,
    target,
    rng: np.random.Generator,
    delta: float,
    n_steps: int,
    mass: np.ndarray,
) -> tuple[HmcState, bool, float]:
    """One proposal: draw momentum, integrate, accept or reject.

    Momentum is drawn from N(0, mass) to match the kinetic energy
    xi^T M^-1 xi / 2 used in the acceptance ratio. Returns the new state,
    the acceptance flag, and the energy error of the proposal (inf when the
    trajectory was flagged invalid).
    """
    xi = rng.standard_normal(state.x.shape[0]) * np.sqrt(mass)
    kin0 = 0.5 * float(np.sum(xi * xi / mass))
    x_new, xi_new, ok = leapfrog(state.x, xi, delta, n_steps, mass, target)
    if not ok:
        new = replace(state, iteration=state.iteration + 1)
        return new, False, np.inf

    logp_new = target.log_density(x_new)
    if not np.isfinite(logp_new):
        new = replace(state, iteration=state.iteration + 1)
        return new, False, np.inf

    kin1 = 0.5 * float(np.sum(xi_new * xi_new / mass))
    d_h = (-logp_new + kin1) - (-state.log_density + kin0)
    accept = np.log(rng.uniform()) < -d_h
    if accept:
        new = HmcState(
            x=x_new,
            log_density=logp_new,
            iteration=state.iteration + 1,
            n_accept=state.n_accept + 1,
        )
    else:
        new = replace(state, iteration=state.iteration + 1)
    return new, bool(accept), float(d_h)


def adapt_step_size(
    window_accepts: np.ndarray, delta: float, cfg: HmcConfig
) -> float:
    """Multiplicative step-size update toward the target acceptance rate."""
    rate = float(np.mean(window_accepts))
    return delta * float(np.exp(cfg.adapt_rate * (rate - cfg.target_accept)))


def tune_mass(store: SampleStore, floor: float = MASS_VAR_FLOOR) -> np.ndarray:
    """Set each mass entry to the reciprocal of the pilot posterior variance."""
    var = store.var()
    degenerate = var <= floor
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} coordinate(s) had near-zero pilot variance; "
            "mass floored",
            stacklevel=2,
        )
    return 1.0 / np.maximum(var, floor)


def bmse(draws: np.ndarray, n_batches: int) -> float:
    """Batch-means Monte Carlo standard error of the mean of one coordinate."""
    draws = np.asarray(draws, dtype=float).ravel()
    if n_batches < 2 or draws.size < 2 * n_batches:
        raise DataError(
            f"need at least 2 batches of 2 draws; got {draws.size} draws, "
            f"{n_batches} batches"
        )
    size = draws.size // n_batches
    trimmed = draws[: size * n_batches].reshape(n_batches, size)
    means = trimmed.mean(axis=1)
    return float(np.sqrt(means.var(ddof=1) / n_batches))


def bmse_matrix(draws: np.ndarray, n_batches: int) -> np.ndarray:
    """BMSE of every column of a (draws, R) matrix."""
    if n_batches < 2 or draws.shape[0] < 2 * n_batches:
        raise DataError("not enough retained draws for the requested batch count")
    size = draws.shape[0] // n_batches
    trimmed = draws[: size * n_batches].reshape(n_batches, size, draws.shape[1])
    means = trimmed.mean(axis=1)
    return np.sqrt(means.var(axis=0, ddof=1) / n_batches)


def run_sampler(
    target,
    x0: np.ndarray,
    cfg: HmcConfig,
    rng: np.random.Generator,
    mass: np.ndarray | None = None,
) -> SampleStore:
    """Drive the chain for cfg.n_iter steps, adapting only during burn-in.

    Burn-in adaptation runs in two phases. A dual-averaging phase (first 60%
    of burn-in) moves the step size across orders of magnitude toward the
    target acceptance rate; a refinement phase then applies the windowed
    multiplicative rule with a gain damped as 1/sqrt(window), whose small
    corrections steer the realized point acceptance itself. The frozen
    post-burn-in value is the geometric mean of the last refinement windows,
    so the retained draws come from a fixed, valid Markov kernel.
    """
    x0 = np.asarray(x0, dtype=float)
    logp0 = target.log_density(x0)
    if not np.isfinite(logp0):
        raise DataError("initial state has zero posterior density")
    if mass is None:
        mass = np.ones(x0.shape[0]) if cfg.mass is None else np.asarray(cfg.mass, float)
    state = HmcState(x=x0, log_density=logp0)

    delta = cfg.delta0
    n_da = int(0.6 * cfg.n_burn)
    mu = np.log(10.0 * cfg.delta0)
    log_dbar = np.log(cfg.delta0)
    hbar = 0.0
    gamma, t0_da, kappa_da = 0.05, 10.0, 0.75

    refine_deltas: list[float] = []
    n_kept = (cfg.n_iter - cfg.n_burn + cfg.thin - 1) // cfg.thin
    draws = np.empty((n_kept, x0.shape[0]))
    accepts = np.zeros(cfg.n_iter)
    d_hs = np.empty(cfg.n_iter)
    kept = 0
    window: list[float] = []
    for it in range(cfg.n_iter):
        state, accepted, d_h = hmc_step(state, target, rng, delta, cfg.n_leapfrog, mass)
        accepts[it] = float(accepted)
        d_hs[it] = d_h
        if it < n_da:
            a_prob = 0.0 if not np.isfinite(d_h) else min(1.0, float(np.exp(-d_h)))
            t = it + 1
            hbar = (1.0 - 1.0 / (t + t0_da)) * hbar + (cfg.target_accept - a_prob) / (t + t0_da)
            log_d = mu - np.sqrt(t) / gamma * hbar
            eta = t ** (-kappa_da)
            log_dbar = eta * log_d + (1.0 - eta) * log_dbar
            delta = float(np.exp(log_d))
            if it == n_da - 1:
                delta = float(np.exp(log_dbar))
        elif it < cfg.n_burn:
            window.append(float(accepted))
            if len(window) == cfg.adapt_window:
                damped = replace(
                    cfg, adapt_rate=0.3 * cfg.adapt_rate / np.sqrt(len(refine_deltas) + 1)
                )
                delta = adapt_step_size(np.array(window), delta, damped)
                refine_deltas.append(delta)
                window.clear()
            if it == cfg.n_burn - 1 and len(refine_deltas) >= 2:
                tail = refine_deltas[-max(2, len(refine_deltas) // 2):]
                delta = float(np.exp(np.mean(np.log(tail))))
        else:
            offset = it - cfg.n_burn
            if offset % cfg.thin == 0:
                draws[kept] = state.x
                kept += 1
    return SampleStore(
        draws=draws[:kept],
        accept_trace=accepts,
        energy_error_trace=d_hs,
        delta_final=delta,
        mass=mass,
        thin=cfg.thin,
    )


def default_monitor_coords(
    n: int, k: int, p: int, rng: np.random.Generator
) -> dict[str, int]:
    """Trace coordinates: 5 random W entries, 2 A entries, all alpha/beta."""
    kn, pn = k * n, p * n
    coords: dict[str, int] = {}
    for idx in sorted(rng.choice(kn, size=min(5, kn), replace=False)):
        kk, nn = divmod(int(idx), n)
        coords[f"w{kk + 1}_v{nn}"] = int(idx)
    for idx in sorted(rng.choice(pn, size=min(2, pn), replace=False)):
        pp, nn = divmod(int(idx), n)
        coords[f"a{pp + 1}_v{nn}"] = kn + int(idx)
    for kk in range(k):
        coords[f"alpha{kk + 1}"] = kn + pn + kk
    for pp in range(p):
        coords[f"beta{pp + 1}"] = kn + pn + k + pp
    return coords


def summarize_store(
    store: SampleStore, n: int, k: int, p: int, n_batches: int
) -> PosteriorSummary:
    """Posterior means/variances/BMSE per coordinate from retained draws."""
    mean = store.mean()
    var = store.var() if store.n_kept >= 2 else None
    se = (
        bmse_matrix(store.draws, n_batches)
        if store.n_kept >= 2 * n_batches
        else None
    )
    kn, pn = k * n, p * n

    def cut(v: np.ndarray | None) -> list[np.ndarray | None]:
        if v is None:
            return [None] * 5
        return [
            v[:kn].reshape(k, n),
            v[kn:kn + pn].reshape(p, n),
            v[kn + pn:kn + pn + k],
            v[kn + pn + k:kn + pn + k + p],
            v[kn + pn + k + p:],
        ]

    wm, am, alm, bem, lm = cut(mean)
    wv, av, alv, bev, lv = cut(var)
    wb, ab, alb, beb, lb = cut(se)
    return PosteriorSummary(
        method="hmc",
        w_mean=wm, a_mean=am, alpha_mean=alm, beta_mean=bem, lambda_mean=lm,
        w_var=wv, a_var=av, alpha_var=alv, beta_var=bev, lambda_var=lv,
        w_bmse=wb, a_bmse=ab, alpha_bmse=alb, beta_bmse=beb, lambda_bmse=lb,
        w_draws=store.draws[:, :kn].reshape(-1, k, n).copy(),
    )


def run_hmc(
    data: Dataset,
    kernel: SpatialKernel,
    hp: HyperPriors,
    cfg: HmcConfig,
    init: ParamState | None = None,
) -> tuple[SampleStore, PosteriorSummary]:
    """Fit the full model by HMC, with optional pilot mass-tuning rounds."""
    stats = precompute_suffstats(data)
    target = PosteriorTarget(stats, kernel, hp)
    state0 = ols_init(data, kernel) if init is None else init
    x0 = state0.flatten()
    rng = np.random.default_rng(cfg.seed)

    mass = np.ones(x0.shape[0]) if cfg.mass is None else np.asarray(cfg.mass, float)
    for _ in range(cfg.pilot_rounds):
        pilot_cfg = replace(cfg, n_iter=cfg.pilot_iter, n_burn=cfg.pilot_burn, thin=1)
        pilot = run_sampler(target, x0, pilot_cfg, rng, mass=mass)
        mass = tune_mass(pilot)
        x0 = pilot.draws[-1]

    store = run_sampler(target, x0, cfg, rng, mass=mass)
    summary = summarize_store(store, stats.N, stats.K, stats.P, cfg.n_batches)
    return store, summary

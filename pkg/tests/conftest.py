import numpy as np
import pytest

from glmar import lattice, model


def random_mask(rng, max_cells=100):
    """Random 2-D mask with at least one voxel and at most max_cells."""
    while True:
        d1 = int(rng.integers(1, 11))
        d2 = int(rng.integers(1, 11))
        if d1 * d2 > max_cells:
            continue
        inside = rng.random((d1, d2)) < 0.7
        if inside.any():
            return lattice.Mask((d1, d2), inside)


def random_instance(rng, t_max=64, n_max=50, k_max=5, p_max=3, mask=None):
    """Random dataset + kernel + valid state for oracle comparisons."""
    if mask is None:
        mask = random_mask(rng, max_cells=n_max)
    n = mask.n_voxels
    k = int(rng.integers(1, k_max + 1))
    p = int(rng.integers(1, p_max + 1))
    t = int(rng.integers(p + k + 5, t_max + 1))
    kern = lattice.build_kernel(mask)
    data = model.Dataset(
        Y=rng.standard_normal((t, n)),
        Xfull=rng.standard_normal((t, k)),
        P=p,
    )
    state = model.ParamState(
        W=rng.standard_normal((k, n)),
        A=0.3 * rng.standard_normal((p, n)),
        lam=rng.gamma(5.0, 0.5, n),
        alpha=rng.gamma(5.0, 0.5, k),
        beta=rng.gamma(5.0, 0.5, p),
    )
    return data, kern, state


def direct_log_likelihood(state, data):
    """Time-loop evaluation of the data term; the slow oracle."""
    total = 0.0
    resid = data.Y - data.Xfull @ state.W
    for n in range(data.N):
        acc = 0.0
        for t in range(data.P, data.T):
            pred = float(state.A[:, n] @ resid[t - data.P:t, n][::-1])
            acc += (resid[t, n] - pred) ** 2
        total += (
            -0.5 * state.lam[n] * acc
            + 0.5 * (data.T - data.P) * np.log(state.lam[n])
        )
    return total


def direct_log_prior(state, kernel, hp):
    """Dense-matrix evaluation of all prior terms (same dropped constant)."""
    sts = kernel.StS.toarray()
    out = 0.0
    n = kernel.n_voxels
    for k in range(state.W.shape[0]):
        out += -0.5 * state.alpha[k] * state.W[k] @ sts @ state.W[k]
        out += 0.5 * n * np.log(state.alpha[k])
        out += (hp.q1 - 1.0) * np.log(state.alpha[k]) - state.alpha[k] / hp.q2
    for p in range(state.A.shape[0]):
        out += -0.5 * state.beta[p] * state.A[p] @ sts @ state.A[p]
        out += 0.5 * n * np.log(state.beta[p])
        out += (hp.r1 - 1.0) * np.log(state.beta[p]) - state.beta[p] / hp.r2
    for v in range(n):
        out += (hp.u1 - 1.0) * np.log(state.lam[v]) - state.lam[v] / hp.u2
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240810)

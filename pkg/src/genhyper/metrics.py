"""Sample-based comparison and density estimation utilities."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import NumericalError, ValidationError


@dataclass
class SampleSet:
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValidationError("a sample set needs at least one row")
        if not np.all(np.isfinite(v)):
            raise ValidationError("sample values must be finite")
        self.values = v

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def _as_matrix(x):
    if isinstance(x, SampleSet):
        return x.values
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _pair_sum_sorted(z):
    # sum_{i<j} |z_i - z_j| for sorted 1-D z
    k = np.arange(1, z.size + 1)
    return float(np.sum(z * (2 * k - z.size - 1)))


def _mean_pairwise(a, b, chunk=2048):
    total = 0.0
    for s in range(0, a.shape[0], chunk):
        total += cdist(a[s:s + chunk], b).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance_sq(x, y):
    """Squared energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| over all sample pairs.

    Within-set means include the zero diagonal (V-statistic), so the value is
    non-negative and exactly zero for identical sets.
    """
    a, b = _as_matrix(x), _as_matrix(y)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    n, m = a.shape[0], b.shape[0]
    if a.shape[1] == 1:
        wa = _pair_sum_sorted(np.sort(a[:, 0]))
        wb = _pair_sum_sorted(np.sort(b[:, 0]))
        wz = _pair_sum_sorted(np.sort(np.concatenate([a[:, 0], b[:, 0]])))
        exy = (wz - wa - wb) / (n * m)
        exx, eyy = 2 * wa / n ** 2, 2 * wb / m ** 2
    else:
        exy = _mean_pairwise(a, b)
        exx, eyy = _mean_pairwise(a, a), _mean_pairwise(b, b)
    return max(0.0, 2 * exy - exx - eyy)


def baseline_energy_distance(draw, rng, n=500, reps=1):
    """Mean squared energy distance between two independent n-sample draws of one distribution.

    ``draw(rng, n)`` returns n samples.
    """
    return float(np.mean([energy_distance_sq(draw(rng, n), draw(rng, n)) for _ in range(reps)]))


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    log_likelihood: list
    converged: bool

    @property
    def k(self):
        return self.weights.size

    def log_pdf(self, x):
        x = _as_matrix(x)
        return logsumexp(_component_logpdf(x, self.weights, self.means, self.covs), axis=1)


def _component_logpdf(x, weights, means, covs):
    n, d = x.shape
    out = np.empty((n, weights.size))
    for j in range(weights.size):
        chol = np.linalg.cholesky(covs[j])
        sol = np.linalg.solve(chol, (x - means[j]).T)
        logdet = 2 * np.sum(np.log(np.diag(chol)))
        out[:, j] = np.log(weights[j]) - 0.5 * (np.sum(sol ** 2, axis=0) + logdet + d * np.log(2 * np.pi))
    return out


def gmm_fit_em(samples, k, seed=0, reg=1e-6, tol=1e-8, max_iter=500):
    """Full-covariance Gaussian mixture by expectation-maximisation.

    Stops when the mean log-likelihood changes by less than ``tol`` or after
    ``max_iter`` iterations. ``log_likelihood`` records the mean
    log-likelihood before every M-step.
    """
    x = _as_matrix(samples)
    n, d = x.shape
    if n < k:
        raise ValidationError(f"need at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    data_cov = np.atleast_2d(np.cov(x.T)) + reg * np.eye(d)
    means = x[rng.choice(n, size=k, replace=False)].copy()
    covs = np.repeat(data_cov[None], k, axis=0)
    weights = np.full(k, 1.0 / k)
    history, reinit, converged = [], False, False
    for _ in range(max_iter):
        logp = _component_logpdf(x, weights, means, covs)
        norm = logsumexp(logp, axis=1, keepdims=True)
        history.append(float(norm.mean()))
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            converged = True
            break
        resp = np.exp(logp - norm)
        nk = resp.sum(axis=0)
        empty = nk < 1e-8 * n
        if np.any(empty):
            if reinit:
                raise NumericalError("mixture component emptied twice")
            reinit = True
            for j in np.flatnonzero(empty):
                means[j] = x[rng.integers(n)]
                covs[j] = data_cov
                weights[j] = 1.0 / k
            weights /= weights.sum()
            history.clear()
            continue
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        for j in range(k):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + reg * np.eye(d)
    return GaussianMixture(weights, means, covs, history, converged)


def gmm_sample(model, n, rng):
    comp = rng.choice(model.k, size=n, p=model.weights)
    d = model.means.shape[1]
    out = np.empty((n, d))
    for j in range(model.k):
        sel = comp == j
        chol = np.linalg.cholesky(model.covs[j])
        out[sel] = model.means[j] + rng.standard_normal((sel.sum(), d)) @ chol.T
    return SampleSet(out, "gmm")


def silverman_bandwidth(samples):
    x = _as_matrix(samples)
    n, d = x.shape
    if n < 2:
        raise ValidationError("automatic bandwidth needs at least two samples")
    std = x.std(axis=0, ddof=1)
    if np.any(std <= 0):
        raise ValidationError("zero-variance data: automatic bandwidth undefined")
    return std * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kde_pdf(samples, query, bandwidth=None):
    """Gaussian kernel density estimate (diagonal bandwidth) at the query points."""
    x = _as_matrix(samples)
    q = _as_matrix(query)
    if q.shape[1] != x.shape[1]:
        raise ValidationError("query dimension does not match samples")
    h = silverman_bandwidth(x) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (x.shape[1],))
    if np.any(h <= 0):
        raise ValidationError("bandwidth must be positive")
    u = (q[:, None, :] - x[None, :, :]) / h
    logk = -0.5 * np.sum(u * u, axis=-1) - np.sum(np.log(h)) - 0.5 * x.shape[1] * np.log(2 * np.pi)
    return np.exp(logsumexp(logk, axis=1) - np.log(x.shape[0]))


def kde_grid(samples, n_grid=100, bandwidth=None, pad=3.0):
    """Density of 1-D or 2-D samples on a regular grid padded by ``pad`` bandwidths."""
    x = _as_matrix(samples)
    h = silverman_bandwidth(x) if bandwidth is None else np.broadcast_to(bandwidth, (x.shape[1],))
    axes = [np.linspace(x[:, j].min() - pad * h[j], x[:, j].max() + pad * h[j], n_grid)
            for j in range(x.shape[1])]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    return axes, kde_pdf(x, pts, h).reshape(mesh[0].shape)


def qoi_stress_samples(phis, shared, arch, protocol, lam, label="sigma_xx"):
    """sigma_xx of every parameter row at one point of a loading protocol."""
    import jax.numpy as jnp

    from .mechanics import protocol_stretches
    from .node import stress_batch

    lx, ly, _ = protocol_stretches(protocol, float(lam))
    phis = np.atleast_2d(np.asarray(phis, dtype=float))
    sxx, _ = stress_batch(arch, shared, jnp.asarray(phis), jnp.asarray([lx]), jnp.asarray([ly]))
    return SampleSet(np.asarray(sxx)[:, 0], label)

"""Glue between fitted populations, score models and observations."""
import jax.numpy as jnp
import numpy as np

from .diffusion import Observation, ScoreTrainConfig, standardize, train_score
from .errors import ValidationError
from .mechanics import protocol_stretches
from .node import _stress


def train_population_score(fit, config=None, schedule=None, seed=0):
    """Standardize fitted phis and train a score on them; returns (TrainResult, Standardizer)."""
    st, z = standardize(fit.phis)
    res = train_score(z, schedule, config or ScoreTrainConfig(), seed)
    return res, st


def stress_forward(arch, shared, standardizer, rows):
    """Map a standardized phi to the stresses named in ``rows``.

    ``rows`` holds (protocol, lambda, sigma_xx, sigma_yy or None); sigma_yy
    enters the output only where it was observed.
    """
    lx, ly, _ = zip(*(protocol_stretches(p, lam) for p, lam, _, _ in rows))
    lx, ly = jnp.asarray(lx), jnp.asarray(ly)
    yy_mask = np.array([r[3] is not None for r in rows])
    yy_idx = jnp.asarray(np.flatnonzero(yy_mask))
    mean, std = jnp.asarray(standardizer.mean), jnp.asarray(standardizer.std)

    def forward(z):
        sxx, syy = _stress(arch, shared, z * std + mean, lx, ly)
        return jnp.concatenate([sxx, syy[yy_idx]])

    return forward


def stress_observation(fit, standardizer, rows, sigma):
    """Gaussian stress observation acting on standardized phi."""
    if not rows:
        raise ValidationError("no stress observations")
    values = [r[2] for r in rows] + [r[3] for r in rows if r[3] is not None]
    return Observation(np.asarray(values), sigma, forward=stress_forward(fit.arch, fit.shared, standardizer, rows))


def param_observation(standardizer, indices, values, sigma):
    """Direct observation of raw-unit phi components, expressed in standardized coordinates."""
    indices = np.asarray(indices, dtype=int)
    dim = standardizer.mean.size
    if np.any(indices < 0) or np.any(indices >= dim):
        raise ValidationError(f"parameter indices must lie in [0, {dim})")
    z = (np.asarray(values, dtype=float) - standardizer.mean[indices]) / standardizer.std[indices]
    return Observation(z, sigma / standardizer.std[indices], indices=indices)

"""Variance-preserving (scaled OU) diffusion over standardized parameter vectors.

Forward process dphi = -beta(t)/2 phi dt + sqrt(beta(t)) dB with linear
beta(t); its marginals are N(mu(t) phi0, Sigma(t) I). Sampling integrates the
reverse SDE with Euler-Maruyama from t = T down to 0.
"""
import logging
import warnings
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import logsumexp

from .engine import DenseNet, adam_init, adam_step
from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    beta_min: float = 0.001
    beta_max: float = 3.0
    T: float = 1.0
    n_steps: int = 1000

    def __post_init__(self):
        if not 0 < self.beta_min <= self.beta_max:
            raise ValidationError("need 0 < beta_min <= beta_max")
        if self.T <= 0 or self.n_steps < 1:
            raise ValidationError("need T > 0 and n_steps >= 1")

    @property
    def dt(self):
        return self.T / self.n_steps

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def alpha(self, t):
        return self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)

    def mean_coef(self, t):
        return jnp.exp(-0.5 * self.alpha(t))

    def var(self, t):
        return -jnp.expm1(-self.alpha(t))

    def with_steps(self, n_steps):
        return DiffusionSchedule(self.beta_min, self.beta_max, self.T, n_steps)

    def to_dict(self):
        return {"beta_min": self.beta_min, "beta_max": self.beta_max, "T": self.T, "n_steps": self.n_steps}


def schedule_eval(schedule, t):
    """(beta, alpha, mu, Sigma) at time t."""
    if not 0.0 <= t <= schedule.T:
        raise ValidationError(f"t={t} outside [0, {schedule.T}]")
    alpha = schedule.alpha(t)
    return (float(schedule.beta(t)), float(alpha), float(np.exp(-0.5 * alpha)), float(-np.expm1(-alpha)))


def forward_marginal_sample(phi0, t, schedule, rng):
    """Draw phi_t | phi_0 from the closed-form Gaussian marginal."""
    _, _, mu, var = schedule_eval(schedule, t)
    phi0 = np.asarray(phi0, dtype=float)
    return mu * phi0 + np.sqrt(var) * rng.standard_normal(phi0.shape)


def forward_sde_euler(phi0, t_end, schedule, rng, dt=None):
    """Euler-Maruyama paths of the forward SDE from phi0 up to t_end."""
    dt = schedule.dt if dt is None else dt
    n = int(round(t_end / dt))
    x = np.array(phi0, dtype=float)
    for k in range(n):
        b = schedule.beta(k * dt)
        x = x - 0.5 * b * x * dt + np.sqrt(b * dt) * rng.standard_normal(x.shape)
    return x


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def standardize(data):
    data = np.atleast_2d(np.asarray(data, dtype=float))
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    bad = ~(std > 1e-12)
    if np.any(bad):
        warnings.warn(f"degenerate dimensions {np.flatnonzero(bad).tolist()} get unit std")
        std = np.where(bad, 1.0, std)
    st = Standardizer(mean, std)
    return st, st.transform(data)


def destandardize(st, z):
    return st.inverse(z)


def exact_mixture_score(data, schedule, phi, t):
    """Score of the noised empirical distribution (1/N) sum_i N(mu phi0_i, Sigma I).

    ``phi`` may be a single vector or a batch of rows.
    """
    if t <= 0:
        raise ValidationError("mixture score is singular at t = 0")
    data = np.atleast_2d(np.asarray(data, dtype=float))
    phi = np.asarray(phi, dtype=float)
    single = phi.ndim == 1
    x = np.atleast_2d(phi)
    _, _, mu, var = schedule_eval(schedule, min(t, schedule.T))
    centers = mu * data
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    logw = -0.5 * d2 / var
    w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    score = (w @ centers - x) / var
    return score[0] if single else score


def mixture_score_fn(data, schedule):
    """Exact mixture score as a ``score_fn(phi, t)`` callable."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    return lambda phi, t: exact_mixture_score(data, schedule, phi, t)


def _mixture_score_jax(data, mu, var, x):
    centers = mu[:, None, None] * data[None, :, :]
    d2 = jnp.sum((x[:, None, :] - centers) ** 2, axis=-1)
    w = jax.nn.softmax(-0.5 * d2 / var[:, None], axis=1)
    return (jnp.einsum("bn,bnp->bp", w, centers) - x) / var[:, None]


def _time_features(schedule, t):
    mu = schedule.mean_coef(t)
    var = schedule.var(t)
    return jnp.stack([t, mu, var], axis=-1), var


@partial(jax.jit, static_argnums=0)
def _score_apply(schedule, net, x, t):
    t = jnp.broadcast_to(t, x.shape[:1])
    feats, var = _time_features(schedule, t)
    return net(jnp.concatenate([x, feats], axis=-1)) / jnp.sqrt(var)[:, None]


@dataclass
class ScoreNetwork:
    """s_theta(phi, t) = net([phi, t, mu(t), Sigma(t)]) / sqrt(Sigma(t))."""

    net: DenseNet
    schedule: DiffusionSchedule
    dim: int

    @classmethod
    def init(cls, dim, schedule, rng, hidden=(256, 256, 256, 256), activation="tanh"):
        widths = [dim + 3, *hidden, dim]
        return cls(DenseNet.init(rng, widths, [activation] * len(hidden) + ["linear"]), schedule, dim)

    def apply(self, net, x, t):
        return _score_apply(self.schedule, net, x, t)

    def __call__(self, phi, t):
        phi = np.asarray(phi, dtype=float)
        single = phi.ndim == 1
        out = np.asarray(_score_apply(self.schedule, self.net, jnp.atleast_2d(phi), jnp.asarray(float(t))))
        return out[0] if single else out


@dataclass
class ScoreTrainConfig:
    hidden: tuple = (256, 256, 256, 256)
    activation: str = "tanh"
    lr: float = 1e-3
    lr_final: float = 1e-5
    epochs: int = 2000
    batch: int = 128
    target: str = "exact"
    weighting: str = "sigma"
    t_min: float = 1e-3

    def __post_init__(self):
        if self.target not in ("exact", "denoising"):
            raise ValidationError("target must be 'exact' or 'denoising'")
        if self.weighting not in ("sigma", "none"):
            raise ValidationError("weighting must be 'sigma' or 'none'")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self):
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainResult:
    score: ScoreNetwork
    epoch_loss: list = field(default_factory=list)


def train_score(data, schedule=None, config=None, seed=0):
    """Fit s_theta to the score of the noised empirical distribution of ``data``.

    Each batch draws data rows (one permutation per epoch), t ~ U(t_min, T)
    and phi_t from the closed-form marginal. The regression target is the
    exact mixture score over all rows (``target='exact'``) or the
    conditional score -(phi_t - mu phi0)/Sigma (``'denoising'``). With
    ``weighting='sigma'`` each squared error is multiplied by Sigma(t).
    """
    schedule = schedule or DiffusionSchedule()
    config = config or ScoreTrainConfig()
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, dim = data.shape
    if n < 2:
        raise ValidationError("score training needs at least two samples")
    rng = np.random.default_rng(seed)
    score = ScoreNetwork.init(dim, schedule, rng, config.hidden, config.activation)
    data_j = jnp.asarray(data)
    exact = config.target == "exact"
    weighted = config.weighting == "sigma"

    def loss_fn(net, idx, t, z):
        mu = schedule.mean_coef(t)
        var = schedule.var(t)
        x = mu[:, None] * data_j[idx] + jnp.sqrt(var)[:, None] * z
        target = _mixture_score_jax(data_j, mu, var, x) if exact else -z / jnp.sqrt(var)[:, None]
        pred = _score_apply(schedule, net, x, t)
        sq = jnp.sum((pred - target) ** 2, axis=-1)
        return jnp.mean(sq * var) if weighted else jnp.mean(sq)

    @jax.jit
    def step(state, net, idx, t, z, lr):
        loss, g = jax.value_and_grad(loss_fn)(net, idx, t, z)
        state, net = adam_step(state, net, g, lr=lr)
        return state, net, loss

    net = score.net
    state = adam_init(net, lr=config.lr)
    steps_per_epoch = max(1, -(-n // config.batch))
    total = config.epochs * steps_per_epoch
    decay = (config.lr_final / config.lr) ** (1.0 / max(total - 1, 1))
    reps = -(-config.batch * steps_per_epoch // n)
    history = []
    k = 0
    for epoch in range(config.epochs):
        order = np.concatenate([rng.permutation(n) for _ in range(reps)])
        acc = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * config.batch:(s + 1) * config.batch]
            t = rng.uniform(config.t_min, schedule.T, size=idx.size)
            z = rng.standard_normal((idx.size, dim))
            state, net, loss = step(state, net, idx, t, z, config.lr * decay ** k)
            acc += float(loss)
            k += 1
        history.append(acc / steps_per_epoch)
        if not np.isfinite(history[-1]):
            raise NumericalError(f"score-matching loss diverged in epoch {epoch}")
        if epoch % 200 == 0:
            log.debug("score epoch %d loss %.4g", epoch, history[-1])
    score.net = net
    return TrainResult(score, history)


def reverse_sde_sample(score_fn, schedule, rng, n_samples, dim, standardizer=None, noise=None):
    """Euler-Maruyama integration of the reverse SDE from N(0, I) at t = T to t = 0.

    ``noise(rng, shape)`` replaces the standard-normal increments and the
    initial draw (used for spatially correlated fields). Returns samples in
    raw units when a standardizer is given.
    """
    draw = noise or (lambda r, shape: r.standard_normal(shape))
    shape = (n_samples, dim)
    x = np.asarray(draw(rng, shape), dtype=float)
    dt = schedule.dt
    for k in range(schedule.n_steps):
        t = schedule.T - k * dt
        b = schedule.beta(t)
        x = x + (0.5 * b * x + b * np.asarray(score_fn(x, t))) * dt + np.sqrt(b * dt) * draw(rng, shape)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"reverse SDE state became non-finite at step {k} (t={t:.4g})")
    return x if standardizer is None else standardizer.inverse(x)


@dataclass
class Observation:
    """Gaussian observation y ~ N(forward(phi), noise^2 I).

    With ``forward`` unset the observation is of the parameters themselves,
    restricted to ``indices`` when given.
    """

    values: np.ndarray
    noise: float
    indices: np.ndarray = None
    forward: object = None

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if self.values.size < 1:
            raise ValidationError("need at least one observed value")
        noise = np.asarray(self.noise, dtype=float)
        if not np.all(noise > 0) or noise.ndim > 1 or (noise.ndim == 1 and noise.shape != self.values.shape):
            raise ValidationError("observation noise must be positive, scalar or one per value")
        self.noise = float(noise) if noise.ndim == 0 else noise
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=int)
            if self.indices.shape != self.values.shape:
                raise ValidationError("one index per observed parameter")
        self._grad = None

    @property
    def n_obs(self):
        return self.values.size

    def log_likelihood(self, phi):
        pred = self.predict(phi)
        r = self.values - pred
        noise = np.broadcast_to(self.noise, self.values.shape)
        return -0.5 * np.sum((r / noise) ** 2, axis=-1) - np.sum(np.log(np.sqrt(2 * np.pi) * noise))

    def predict(self, phi):
        phi = np.asarray(phi, dtype=float)
        if self.forward is not None:
            f = jax.jit(jax.vmap(self.forward))
            return np.asarray(f(jnp.atleast_2d(phi))).reshape(phi.shape[:-1] + (self.n_obs,))
        return phi[..., self.indices] if self.indices is not None else phi

    def _grad_fn(self):
        if self._grad is None:
            y, inv_var, fwd = jnp.asarray(self.values), jnp.asarray(1.0 / np.square(self.noise)), self.forward

            def one(phi):
                pred, vjp = jax.vjp(fwd, phi)
                return vjp(inv_var * (y - pred))[0]

            self._grad = jax.jit(jax.vmap(one))
        return self._grad


def likelihood_score(obs, phi):
    """Gradient of the Gaussian log-likelihood: (1/noise^2) J^T (y - forward(phi))."""
    phi = np.asarray(phi, dtype=float)
    single = phi.ndim == 1
    x = np.atleast_2d(phi)
    if obs.forward is not None:
        g = np.asarray(obs._grad_fn()(jnp.asarray(x)))
    else:
        g = np.zeros_like(x)
        idx = obs.indices if obs.indices is not None else np.arange(x.shape[1])
        if obs.indices is None and obs.values.size != x.shape[1]:
            raise ValidationError("direct observation must cover every parameter or give indices")
        np.add.at(g.T, idx, ((obs.values - x[:, idx]) / np.square(obs.noise)).T)
    return g[0] if single else g


def conditional_score_fn(score_fn, obs):
    return lambda phi, t: np.asarray(score_fn(phi, t)) + likelihood_score(obs, phi)


def conditional_sample(score_fn, obs, schedule, rng, n_samples, dim, standardizer=None, noise=None):
    """Reverse SDE with the likelihood score of ``obs`` added at the current iterate.

    The likelihood term has stiffness of order beta |J|^2 / noise^2, so small
    observation noise needs more steps than unconditional sampling; check by
    halving dt.
    """
    return reverse_sde_sample(conditional_score_fn(score_fn, obs), schedule, rng, n_samples, dim,
                              standardizer, noise)

"""Reverse-mode differentiation helpers, dense networks, RK4 unrolling and Adam.

JAX supplies the reverse-mode machinery; this module pins down the network
container, the fixed-step integrator that gets unrolled and differentiated,
and a plain bias-corrected Adam update shared by model fitting and score
training.
"""
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .errors import IntegrationError, NumericalError

ACTIVATIONS = {
    "tanh": jnp.tanh,
    "linear": lambda x: x,
    "softplus": jax.nn.softplus,
}


@jax.tree_util.register_pytree_node_class
class DenseNet:
    """Stack of affine layers, each followed by a named elementwise activation."""

    def __init__(self, weights, biases, activations):
        if not (len(weights) == len(biases) == len(activations)):
            raise ValueError("one weight, bias and activation per layer")
        for tag in activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        self.weights = list(weights)
        self.biases = list(biases)
        self.activations = tuple(activations)

    @classmethod
    def init(cls, rng, widths, activations, bias_scale=0.0):
        """Glorot-normal weights from a numpy Generator; ``widths`` includes input and output."""
        if len(widths) - 1 != len(activations):
            raise ValueError("need len(widths) - 1 activations")
        weights, biases = [], []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            std = np.sqrt(2.0 / (n_in + n_out))
            weights.append(jnp.asarray(rng.normal(0.0, std, size=(n_in, n_out))))
            biases.append(jnp.asarray(bias_scale * rng.normal(size=n_out)))
        return cls(weights, biases, activations)

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def __call__(self, x):
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            x = ACTIVATIONS[tag](x @ w + b)
        return x

    def n_params(self):
        return sum(int(np.prod(w.shape)) + int(b.size) for w, b in zip(self.weights, self.biases))

    def tree_flatten(self):
        return (self.weights, self.biases), self.activations

    @classmethod
    def tree_unflatten(cls, activations, children):
        weights, biases = children
        return cls(weights, biases, activations)

    def to_dict(self):
        return {
            "activations": list(self.activations),
            "weights": [np.asarray(w).tolist() for w in self.weights],
            "biases": [np.asarray(b).tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([jnp.asarray(w, dtype=jnp.float64).reshape(len(w), -1) for w in d["weights"]],
                   [jnp.asarray(b, dtype=jnp.float64) for b in d["biases"]],
                   d["activations"])


def flatten(params):
    """Flat float64 vector plus the function that rebuilds ``params`` from it."""
    return ravel_pytree(params)


def _all_finite(tree):
    return all(bool(jnp.all(jnp.isfinite(leaf))) for leaf in jax.tree_util.tree_leaves(tree))


def _diagnose(program, params):
    try:
        with jax.debug_nans(True), jax.debug_infs(True), jax.disable_jit():
            jax.value_and_grad(program)(params)
    except FloatingPointError as exc:
        return str(exc).splitlines()[0]
    return "non-finite value (no failing primitive isolated)"


def value_and_grad(program, params):
    """Value and exact reverse-mode gradient of a scalar program.

    Raises NumericalError naming the failing primitive when the value or any
    gradient entry is non-finite.
    """
    value, g = jax.value_and_grad(program)(params)
    if not (np.isfinite(float(value)) and _all_finite(g)):
        raise NumericalError(f"non-finite intermediate: {_diagnose(program, params)}")
    return value, g


def grad(program, params):
    return value_and_grad(program, params)[1]


class OptimizerState(NamedTuple):
    step: jnp.ndarray
    m: object
    v: object
    lr: float = 1e-5
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-5, b1=0.9, b2=0.999, eps=1e-8):
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return OptimizerState(jnp.asarray(0), zeros, zeros, lr, b1, b2, eps)


def adam_step(state, params, gradient, lr=None):
    """One bias-corrected Adam update; ``lr`` overrides the stored rate (schedules)."""
    lr = state.lr if lr is None else lr
    step = state.step + 1
    m = jax.tree_util.tree_map(lambda m, g: state.b1 * m + (1 - state.b1) * g, state.m, gradient)
    v = jax.tree_util.tree_map(lambda v, g: state.b2 * v + (1 - state.b2) * g * g, state.v, gradient)
    c1 = 1 - state.b1 ** step
    c2 = 1 - state.b2 ** step
    params = jax.tree_util.tree_map(
        lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + state.eps), params, m, v)
    return state._replace(step=step, m=m, v=v), params


def _is_traced(x):
    return isinstance(x, jax.core.Tracer)


def rk4_step(rhs, h, dt):
    k1 = rhs(h)
    k2 = rhs(h + 0.5 * dt * k1)
    k3 = rhs(h + 0.5 * dt * k2)
    k4 = rhs(h + dt * k3)
    return h + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_unroll(rhs, h0, steps=10, t_end=1.0):
    """Classical RK4 for dh/dtau = rhs(h) on [0, t_end], unrolled so it differentiates exactly."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = t_end / steps
    h = h0
    for i in range(steps):
        h = rk4_step(rhs, h, dt)
        if not _is_traced(h) and not bool(jnp.all(jnp.isfinite(h))):
            raise IntegrationError(f"non-finite state after RK4 step {i + 1}", step=i + 1)
    return h

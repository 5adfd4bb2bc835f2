"""Polyconvex strain energies built from monotone scalar neural ODEs.

Each derivative function dPsi_k/dI is ``softplus(h(1))`` where ``h`` solves
the scalar ODE ``dh/dtau = a . z(h) + c`` started at the (shifted) invariant.
``z`` is a tanh network shared across the population; the final layer
``(a, c)`` of every NODE is individual-specific, and the concatenation of
those final layers is the parameter vector ``phi`` the diffusion model works
on. Scalar flows are order preserving, softplus is positive and increasing,
so every phi yields non-negative, non-decreasing derivative functions.
"""
import logging
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .dataset import pack
from .engine import DenseNet, adam_init, adam_step, rk4_unroll
from .errors import NumericalError, ValidationError
from .mechanics import Invariants, Protocol, _invariants, _plane_stress, _stretches

log = logging.getLogger(__name__)

N_NODES = {"iso2": 2, "aniso5": 5}

# RK4 on h' = f(h) is order preserving when dt * Lip(f) <= ~0.69; keep a margin
SAFE_STEP = 0.5


@dataclass(frozen=True)
class NodeArch:
    kind: str = "iso2"
    hidden: tuple = (5, 5)
    node_hidden: tuple = None
    tau_steps: int = 10

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in N_NODES:
            raise ValidationError(f"unknown architecture {self.kind!r}; use iso2 or aniso5")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.node_hidden is not None:
            nh = tuple(tuple(int(h) for h in w) for w in self.node_hidden)
            if len(nh) != self.n_nodes:
                raise ValidationError(f"{kind} needs {self.n_nodes} hidden specs, got {len(nh)}")
            object.__setattr__(self, "node_hidden", nh)
        if self.tau_steps < 1:
            raise ValidationError("tau_steps must be >= 1")

    @property
    def n_nodes(self):
        return N_NODES[self.kind]

    @property
    def n_alpha(self):
        return 3 if self.kind == "aniso5" else 0

    def hidden_of(self, k):
        return self.node_hidden[k] if self.node_hidden is not None else self.hidden

    @property
    def phi_sizes(self):
        return [self.hidden_of(k)[-1] + 1 for k in range(self.n_nodes)]

    @property
    def n_phi(self):
        return sum(self.phi_sizes)

    def phi_split(self, phi):
        """Split phi into per-NODE (a, c) final-layer pairs."""
        out, pos = [], 0
        for size in self.phi_sizes:
            out.append((phi[..., pos:pos + size - 1], phi[..., pos + size - 1]))
            pos += size
        return out

    def to_dict(self):
        return {"kind": self.kind, "hidden": list(self.hidden),
                "node_hidden": None if self.node_hidden is None else [list(w) for w in self.node_hidden],
                "tau_steps": self.tau_steps}

    @classmethod
    def from_dict(cls, d):
        nh = d.get("node_hidden")
        return cls(d["kind"], tuple(d["hidden"]), None if nh is None else tuple(tuple(w) for w in nh),
                   int(d.get("tau_steps", 10)))


def init_shared(arch, rng):
    """Shared parameters: one tanh feature network per NODE plus mixing-weight pre-images."""
    nets = [DenseNet.init(rng, [1, *arch.hidden_of(k)], ["tanh"] * len(arch.hidden_of(k)), bias_scale=0.5)
            for k in range(arch.n_nodes)]
    return {"nets": nets, "alpha_pre": jnp.zeros(arch.n_alpha)}


def init_phi(arch, rng, offset=-3.0, scale=0.1):
    parts = []
    for size in arch.phi_sizes:
        parts.append(scale * rng.normal(size=size - 1))
        parts.append([offset])
    return np.concatenate(parts)


def lipschitz_bound(net, a):
    """Upper bound on |d/dh (a . z(h))| for a scalar-input network with 1-Lipschitz activations."""
    g = jnp.abs(net.weights[0])
    for w in net.weights[1:]:
        g = g @ jnp.abs(w)
    return jnp.abs(a) @ g[0]


def node_flow(net, a, c, x0, steps=10):
    """Pre-map NODE output h(1) for initial values ``x0`` (any shape).

    The RHS is divided by max(1, L dt / SAFE_STEP) with L a Lipschitz bound,
    which keeps every RK4 step strictly increasing (derivative >= 0.35) no
    matter how large the final-layer weights are. Below the threshold the
    flow is the plain time-1 map.
    """
    x0 = jnp.asarray(x0, dtype=jnp.float64)
    slow = jnp.maximum(1.0, lipschitz_bound(net, a) / (steps * SAFE_STEP))

    def rhs(h):
        return (net(h[..., None]) @ a + c) / slow

    return rk4_unroll(rhs, x0, steps)


def node_scalar_forward(net, final, x0, steps=10):
    """Derivative-function value softplus(h(1)); ``final`` is the (a, c) pair."""
    a, c = final
    return jax.nn.softplus(node_flow(net, a, c, x0, steps))


def mixing_weights(shared):
    return jax.nn.sigmoid(shared["alpha_pre"])


def _derivs(arch, shared, phi, inv):
    finals = arch.phi_split(phi)
    nets = shared["nets"]
    steps = arch.tau_steps

    def n(k, x):
        return node_scalar_forward(nets[k], finals[k], x, steps)

    d1 = n(0, inv.I1 - 3.0)
    d2 = n(1, inv.I2 - 3.0)
    if arch.kind == "iso2":
        zero = jnp.zeros_like(d1)
        return d1, d2, zero, zero
    # fiber-carrying terms are tension-only, n(xi) - n(0) for xi > 0, so the
    # reference state stays stress free; still >= 0 and non-decreasing
    def n_fiber(k, x):
        return jnp.where(x > 0, n(k, x) - n(k, jnp.zeros(())), 0.0)

    a1, a2, a3 = mixing_weights(shared)
    e1, e4v, e4w = inv.I1 - 3.0, inv.I4v - 1.0, inv.I4w - 1.0
    n3 = n_fiber(2, a1 * e1 + (1 - a1) * e4v)
    n4 = n_fiber(3, a2 * e1 + (1 - a2) * e4w)
    n5 = n_fiber(4, a3 * e4v + (1 - a3) * e4w)
    return (d1 + a1 * n3 + a2 * n4, d2,
            (1 - a1) * n3 + a3 * n5, (1 - a2) * n4 + (1 - a3) * n5)


def _stress(arch, shared, phi, lx, ly):
    inv = _invariants(lx, ly, 1.0 / (lx * ly))
    return _plane_stress(_derivs(arch, shared, phi, inv), lx, ly)


@partial(jax.jit, static_argnums=0)
def stress_batch(arch, shared, phis, lx, ly):
    """Stresses for a batch of phi rows; lx, ly broadcast against (n_phi_rows, n_points)."""
    lx = jnp.broadcast_to(lx, (phis.shape[0],) + jnp.shape(lx)[-1:])
    ly = jnp.broadcast_to(ly, lx.shape)
    return jax.vmap(lambda p, x, y: _stress(arch, shared, p, x, y))(phis, lx, ly)


@dataclass
class ConstitutiveModel:
    arch: NodeArch
    shared: dict
    phi: np.ndarray

    def __post_init__(self):
        self.phi = jnp.asarray(self.phi, dtype=jnp.float64)
        if self.phi.shape != (self.arch.n_phi,):
            raise ValidationError(f"phi must have length {self.arch.n_phi}, got {self.phi.shape}")

    @property
    def alphas(self):
        return np.asarray(mixing_weights(self.shared))

    def with_phi(self, phi):
        return ConstitutiveModel(self.arch, self.shared, phi)


def energy_derivs(model, inv):
    """(dPsi/dI1, dPsi/dI2, dPsi/dI4v, dPsi/dI4w) at the given invariants."""
    inv = Invariants(*(jnp.asarray(v, dtype=jnp.float64) for v in inv))
    return tuple(np.asarray(d) for d in _derivs(model.arch, model.shared, model.phi, inv))


def predict_stress(model, protocol, lam):
    """(sigma_xx, sigma_yy) predicted by the model along a protocol."""
    from .mechanics import protocol_stretches
    lx, ly, _ = protocol_stretches(protocol, np.asarray(lam, dtype=float))
    sxx, syy = _stress(model.arch, model.shared, model.phi, jnp.asarray(lx), jnp.asarray(ly))
    return np.asarray(sxx), np.asarray(syy)


def predict_stress_stretches(model, lx, ly):
    sxx, syy = _stress(model.arch, model.shared, model.phi, jnp.asarray(lx, dtype=float),
                       jnp.asarray(ly, dtype=float))
    return np.asarray(sxx), np.asarray(syy)


@dataclass
class FitConfig:
    lr: float = 1e-2
    lr_final: float = 1e-3
    iterations: int = 3000
    phi_offset: float = -3.0
    phi_init_scale: float = 0.1
    log_every: int = 500

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class PopulationFit:
    arch: NodeArch
    shared: dict
    phis: np.ndarray
    names: list
    mae: np.ndarray
    curve_rel_mae: np.ndarray
    loss_history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def model(self, i=None, phi=None):
        phi = self.phis[i] if phi is None else phi
        return ConstitutiveModel(self.arch, self.shared, phi)


def _loss(arch, shared, phis, data, scale):
    sxx, syy = stress_batch(arch, shared, phis, data["lx"], data["ly"])
    err = (jnp.abs(sxx - data["sxx"]) + jnp.abs(syy - data["syy"])) * data["mask"]
    return jnp.sum(err) / (2.0 * jnp.sum(data["mask"]) * scale)


def fitting_loss(arch, shared, phis, packed):
    """Mean absolute stress error over all individuals, curves, points and both components."""
    data = {k: jnp.asarray(getattr(packed, k)) for k in ("lx", "ly", "sxx", "syy", "mask")}
    return _loss(arch, shared, jnp.asarray(phis), data, 1.0)


def curve_errors(arch, shared, phis, packed):
    """Per-individual MAE and per-curve MAE relative to each curve's max |stress|."""
    sxx, syy = stress_batch(arch, shared, jnp.asarray(phis), packed.lx, packed.ly)
    err = (np.abs(np.asarray(sxx) - packed.sxx) + np.abs(np.asarray(syy) - packed.syy)) * packed.mask
    mae = err.sum(axis=1) / (2.0 * packed.mask.sum(axis=1))
    rel = np.zeros((err.shape[0], packed.n_curves))
    for j in range(packed.n_curves):
        sel = (packed.curve_id == j) * packed.mask
        rel[:, j] = (err * sel).sum(axis=1) / (2.0 * sel.sum(axis=1)) / np.maximum(packed.curve_scale[:, j], 1e-300)
    return mae, rel


def fit_population(dataset, arch=None, config=None, seed=0, shared=None):
    """Jointly fit shared NODE parameters and one phi per individual by minimising MAE.

    ``shared`` may be passed to start from (and keep training) an existing set
    of shared parameters.
    """
    arch = arch or NodeArch()
    config = config or FitConfig()
    individuals = list(dataset)
    if not individuals:
        raise ValidationError("empty dataset")
    packed = pack(individuals)
    rng = np.random.default_rng(seed)
    if shared is None:
        shared = init_shared(arch, rng)
    phi0 = init_phi(arch, rng, config.phi_offset, config.phi_init_scale)
    phis = jnp.asarray(np.tile(phi0, (len(individuals), 1)))
    data = {k: jnp.asarray(getattr(packed, k)) for k in ("lx", "ly", "sxx", "syy", "mask")}
    scale = float(max(np.max(np.abs(packed.sxx)), np.max(np.abs(packed.syy)), 1e-12))

    params = {"shared": shared, "phis": phis}
    state = adam_init(params, lr=config.lr)
    n_it = config.iterations
    decay = (config.lr_final / config.lr) ** (1.0 / max(n_it - 1, 1))

    @jax.jit
    def step(state, params, lr):
        loss, g = jax.value_and_grad(lambda p: _loss(arch, p["shared"], p["phis"], data, scale))(params)
        state, params = adam_step(state, params, g, lr=lr)
        return state, params, loss

    history = []
    for it in range(n_it):
        state, params, loss = step(state, params, config.lr * decay ** it)
        if it % config.log_every == 0 or it == n_it - 1:
            loss = float(loss)
            if not np.isfinite(loss):
                raise NumericalError(f"fitting loss became non-finite at iteration {it}")
            history.append((it, loss * scale))
            log.debug("fit iteration %d  mae %.4g", it, loss * scale)

    shared, phis = params["shared"], np.asarray(params["phis"])
    if not np.all(np.isfinite(phis)):
        raise NumericalError("fitted individual parameters are non-finite")
    mae, rel = curve_errors(arch, shared, phis, packed)
    return PopulationFit(arch, shared, phis, [ind.name for ind in individuals], mae, rel,
                         history, {"seed": seed, **config.to_dict()})

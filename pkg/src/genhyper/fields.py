"""Spatially correlated unit-variance fields and the field-valued reverse SDE.

Two samplers share the ``sampler(rng, shape)`` noise interface used by
:func:`genhyper.diffusion.reverse_sde_sample`:

* :class:`GPSampler` - squared-exponential GP on an arbitrary point set,
  drawn through a Cholesky factor of the kernel matrix.
* :class:`MaternSampler` - Matern field on a triangle mesh, expanded in
  Laplace-Beltrami eigenfunctions computed with linear finite elements.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .diffusion import reverse_sde_sample
from .errors import DomainError, NumericalError, ValidationError

log = logging.getLogger(__name__)

JITTER_LADDER = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def _lengths(ell, d):
    ell = np.broadcast_to(np.asarray(ell, dtype=float), (d,))
    if np.any(ell <= 0):
        raise DomainError(f"length scales must be positive, got {ell}")
    return ell


def rbf_kernel(x, x2, ell):
    """exp(-sum_i (x_i - x2_i)^2 / (2 ell_i^2)) for two points."""
    x, x2 = np.atleast_1d(np.asarray(x, dtype=float)), np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ValidationError("points must have matching dimensions")
    ell = _lengths(ell, x.size)
    return float(np.exp(-0.5 * np.sum(((x - x2) / ell) ** 2)))


def kernel_matrix(a, b, ell):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    ell = _lengths(ell, a.shape[1])
    d2 = (((a[:, None, :] - b[None, :, :]) / ell) ** 2).sum(-1)
    return np.exp(-0.5 * d2)


def as_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] not in (1, 2, 3):
        raise ValidationError("points must be an (n, d) array with d in {1, 2, 3}")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("point coordinates must be finite")
    return pts


def grid_points(nx, ny, lx=1.0, ly=1.0):
    """Cell-vertex grid on [0, lx] x [0, ly], x varying fastest."""
    xs, ys = np.linspace(0, lx, nx), np.linspace(0, ly, ny)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


class GPSampler:
    """Zero-mean squared-exponential GP draws on a fixed point set."""

    def __init__(self, points, ell):
        self.points = as_points(points)
        self.ell = _lengths(ell, self.points.shape[1])
        self.kernel = kernel_matrix(self.points, self.points, self.ell)
        n = self.kernel.shape[0]
        for jitter in JITTER_LADDER:
            try:
                self.chol = scipy.linalg.cholesky(self.kernel + jitter * np.eye(n), lower=True)
                self.jitter = jitter
                break
            except np.linalg.LinAlgError:
                log.debug("cholesky failed with jitter %g", jitter)
        else:
            raise NumericalError(f"kernel factorization failed up to jitter {JITTER_LADDER[-1]}")

    @property
    def n_points(self):
        return self.points.shape[0]

    def sample(self, rng, n_fields):
        """(n_points, n_fields) matrix, one field per column."""
        return self.chol @ rng.standard_normal((self.n_points, n_fields))

    def __call__(self, rng, shape):
        return _reshape_fields(self, rng, shape)


def _reshape_fields(sampler, rng, shape):
    # rows of ``shape`` enumerate (field realization, point); columns are components
    rows, cols = shape
    n = sampler.n_points
    if rows % n:
        raise ValidationError(f"state rows {rows} not a multiple of {n} points")
    reps = rows // n
    f = sampler.sample(rng, reps * cols).reshape(n, reps, cols)
    return f.transpose(1, 0, 2).reshape(rows, cols)


def gp_sample_points(points, ell, n_fields, rng):
    """Draw ``n_fields`` unit-variance RBF GP realizations; returns (n_points, n_fields)."""
    return GPSampler(points, ell).sample(rng, n_fields)


@dataclass
class TriMesh:
    nodes: np.ndarray
    tris: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.tris = np.asarray(self.tris, dtype=int)
        if self.nodes.ndim != 2 or self.nodes.shape[1] not in (2, 3):
            raise ValidationError("mesh nodes must be (n, 2) or (n, 3)")
        if self.tris.ndim != 2 or self.tris.shape[1] != 3:
            raise ValidationError("triangles must be (m, 3) index triples")
        if self.tris.size and (self.tris.min() < 0 or self.tris.max() >= self.nodes.shape[0]):
            raise ValidationError("triangle connectivity references a missing node")

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def areas(self):
        p = self.nodes
        if p.shape[1] == 2:
            p = np.column_stack([p, np.zeros(len(p))])
        e1 = p[self.tris[:, 1]] - p[self.tris[:, 0]]
        e2 = p[self.tris[:, 2]] - p[self.tris[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def translated(self, shift):
        return TriMesh(self.nodes + np.asarray(shift, dtype=float), self.tris.copy())


def rectangle_mesh(nx, ny, lx=1.0, ly=1.0):
    """Structured triangulation of [0, lx] x [0, ly] with nx x ny cells, two triangles each."""
    nodes = grid_points(nx + 1, ny + 1, lx, ly)
    tris = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 2, a + nx + 1
            tris += [(a, b, c), (a, c, d)]
    return TriMesh(nodes, np.array(tris))


def assemble_laplace_fem(mesh):
    """Linear-triangle stiffness and consistent mass matrices (scipy CSR).

    Works for planar meshes and triangulated surfaces in 3-D: local stiffness
    entries are (e_i . e_j) / (4 A) with e_i the edge opposite vertex i.
    """
    p = mesh.nodes
    if p.shape[1] == 2:
        p = np.column_stack([p, np.zeros(len(p))])
    t = mesh.tris
    areas = mesh.areas()
    scale = np.max(np.abs(p)) if p.size else 1.0
    bad = np.flatnonzero(areas <= 1e-14 * max(scale, 1.0) ** 2)
    if bad.size:
        raise DomainError(f"degenerate triangle {int(bad[0])} (nodes {t[bad[0]].tolist()})")
    edges = np.stack([p[t[:, 2]] - p[t[:, 1]], p[t[:, 0]] - p[t[:, 2]], p[t[:, 1]] - p[t[:, 0]]], axis=1)
    k_loc = np.einsum("eid,ejd->eij", edges, edges) / (4.0 * areas)[:, None, None]
    m_ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    m_loc = areas[:, None, None] * m_ref[None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    K = sp.coo_matrix((k_loc.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    M = sp.coo_matrix((m_loc.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return K, M


@dataclass
class EigenBasis:
    values: np.ndarray
    vectors: np.ndarray
    mass: object

    @property
    def n_eig(self):
        return self.values.size

    def to_dict(self):
        return {"values": self.values.tolist(), "vectors": self.vectors.tolist()}


DENSE_LIMIT = 3000


def laplace_eigenbasis(K, M, n_eig=None):
    """Smallest ``n_eig`` generalized eigenpairs of K e = lambda M e, M-orthonormal.

    ``n_eig`` defaults to min(256, node count).
    """
    n = K.shape[0]
    n_eig = min(256, n) if n_eig is None else int(n_eig)
    if not 1 <= n_eig <= n:
        raise ValidationError(f"n_eig must lie in [1, {n}]")
    if n <= DENSE_LIMIT:
        Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
        Md = M.toarray() if sp.issparse(M) else np.asarray(M)
        vals, vecs = scipy.linalg.eigh(Kd, Md, subset_by_index=[0, n_eig - 1])
    else:
        try:
            vals, vecs = spla.eigsh(K, k=n_eig, M=M, sigma=-1e-3, which="LM")
        except spla.ArpackNoConvergence as exc:
            raise NumericalError(f"eigensolver did not converge: {exc}") from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        gram = vecs.T @ (M @ vecs)
        vecs = vecs @ np.linalg.inv(np.linalg.cholesky(gram)).T
    # fix signs so each eigenvector has a positive M-weighted mean (constant mode positive)
    w = np.asarray(M.sum(axis=1)).ravel() if sp.issparse(M) else M.sum(axis=1)
    signs = np.sign(w @ vecs)
    signs[signs == 0] = 1.0
    return EigenBasis(vals, vecs * signs, M)


@dataclass
class MaternConfig:
    ell: float
    nu: float = 2.5
    dim: int = 2
    c_m: float = None

    def __post_init__(self):
        if not self.ell > 0:
            raise DomainError("Matern length scale must be positive")
        if not self.nu > 0:
            raise DomainError("Matern smoothness must be positive")


def lumped_weights(M):
    return np.asarray(M.sum(axis=1)).ravel() if sp.issparse(M) else np.asarray(M).sum(axis=1)


class MaternSampler:
    """f(x) = sum_n c_n gamma_n e_n(x), c_n ~ N(0, 1), unit mean variance over the mesh.

    gamma_n^2 = (2 nu / ell^2 + lambda_n)^(-nu - d/2) / C_m, where C_m makes the
    area-weighted (lumped-mass) mean of the pointwise variance equal to one.
    """

    def __init__(self, basis, cfg):
        self.basis = basis
        lam = np.maximum(basis.values, 0.0)
        spectral = (2.0 * cfg.nu / cfg.ell ** 2 + lam) ** (-cfg.nu - cfg.dim / 2.0)
        self.weights = lumped_weights(basis.mass)
        area = self.weights.sum()
        raw_diag = (basis.vectors ** 2) @ spectral
        cfg.c_m = float(self.weights @ raw_diag / area)
        self.cfg = cfg
        self.gamma = np.sqrt(spectral / cfg.c_m)

    @property
    def n_points(self):
        return self.basis.vectors.shape[0]

    def variance(self):
        """Pointwise variance k(x, x) at every node."""
        return (self.basis.vectors ** 2) @ (self.gamma ** 2)

    def mean_variance(self):
        return float(self.weights @ self.variance() / self.weights.sum())

    def sample(self, rng, n_fields):
        c = rng.standard_normal((self.basis.n_eig, n_fields))
        return self.basis.vectors @ (self.gamma[:, None] * c)

    def __call__(self, rng, shape):
        return _reshape_fields(self, rng, shape)


def matern_field_sampler(basis, cfg, rng=None, n_fields=1):
    """Build the sampler; with ``rng`` also draw ``n_fields`` nodal fields (n_nodes, n_fields)."""
    sampler = MaternSampler(basis, cfg)
    return sampler if rng is None else sampler.sample(rng, n_fields)


@dataclass
class ParameterField:
    """phi vectors per point; ``values`` is (n_fields, n_points, P)."""

    values: np.ndarray
    points: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def n_fields(self):
        return self.values.shape[0]

    def realization(self, i=0):
        return self.values[i]


def field_reverse_sde(score_fn, sampler, schedule, rng, dim, n_fields=1, standardizer=None,
                      points=None, provenance=None):
    """Reverse SDE where initial state and increments are correlated fields.

    The score acts pointwise: every (realization, point) row of the state is
    one phi vector.
    """
    n = sampler.n_points
    flat = reverse_sde_sample(score_fn, schedule, rng, n_fields * n, dim, standardizer, noise=sampler)
    pts = getattr(sampler, "points", None) if points is None else points
    return ParameterField(flat.reshape(n_fields, n, dim), pts, dict(provenance or {}))


def field_reverse_sde_pair(score_fn, sampler, schedule, rng, dim, n_fields=1, standardizer=None):
    """Run the field SDE at step dt and dt/2 on coupled Brownian increments.

    Each coarse increment is the normalized sum of the two fine increments
    it spans, so differences between the two outputs reflect time
    discretization rather than Monte Carlo noise.
    """
    n = sampler.n_points
    shape = (n_fields * n, dim)
    x0 = sampler(rng, shape)
    coarse, fine = x0.copy(), x0.copy()
    dt = schedule.dt
    h = dt / 2
    for k in range(schedule.n_steps):
        t = schedule.T - k * dt
        z1, z2 = sampler(rng, shape), sampler(rng, shape)
        b = schedule.beta(t)
        coarse = coarse + (0.5 * b * coarse + b * np.asarray(score_fn(coarse, t))) * dt \
            + np.sqrt(b * dt) * (z1 + z2) / np.sqrt(2.0)
        for j, z in enumerate((z1, z2)):
            tf = t - j * h
            bf = schedule.beta(tf)
            fine = fine + (0.5 * bf * fine + bf * np.asarray(score_fn(fine, tf))) * h + np.sqrt(bf * h) * z
        if not (np.all(np.isfinite(coarse)) and np.all(np.isfinite(fine))):
            raise NumericalError(f"field SDE became non-finite at step {k}")
    if standardizer is not None:
        coarse, fine = standardizer.inverse(coarse), standardizer.inverse(fine)
    return coarse.reshape(n_fields, n, dim), fine.reshape(n_fields, n, dim)


def pointwise_stress_field(values, shared, arch, lx, ly):
    """sigma_xx at every point of a (n_points, P) parameter field under uniform stretch."""
    import jax.numpy as jnp

    from .node import stress_batch

    phis = np.atleast_2d(np.asarray(values, dtype=float))
    sxx, _ = stress_batch(arch, shared, jnp.asarray(phis), jnp.asarray([float(lx)]), jnp.asarray([float(ly)]))
    return np.asarray(sxx)[:, 0]

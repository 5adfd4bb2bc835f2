"""Synthetic May-Newman populations with gamma-distributed parameters."""
from dataclasses import dataclass, field

import numpy as np

from .dataset import Individual, Population
from .errors import ValidationError
from .mechanics import ALL_PROTOCOLS, LoadingProtocol, MayNewmanParams, Protocol, may_newman_curve


@dataclass
class SynthConfig:
    # (shape, scale) of independent gamma distributions
    mu: tuple = (5.0, 0.01)
    k1: tuple = (2.0, 0.02)
    k2: tuple = (4.0, 0.5)
    protocols: tuple = ALL_PROTOCOLS
    lam_min: float = 1.0
    lam_max: float = 1.25
    n_points: int = 20
    n: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("mu", "k1", "k2"):
            shape, scale = getattr(self, name)
            if shape <= 0 or scale <= 0:
                raise ValidationError(f"gamma hyperparameters for {name} must be positive")
        if self.n < 0:
            raise ValidationError("n must be >= 0")
        if self.n_points < 2 or self.lam_max <= self.lam_min or self.lam_min <= 0:
            raise ValidationError("invalid stretch grid")
        self.protocols = tuple(Protocol.parse(p) for p in self.protocols)

    @property
    def stretch_grid(self):
        return np.linspace(self.lam_min, self.lam_max, self.n_points)

    def to_dict(self):
        d = dict(self.__dict__)
        d["protocols"] = [p.value for p in self.protocols]
        d["mu"], d["k1"], d["k2"] = list(self.mu), list(self.k1), list(self.k2)
        return d


def draw_params(cfg, rng, n=None):
    """(n, 3) array of (mu, k1, k2) draws."""
    n = cfg.n if n is None else n
    cols = [rng.gamma(shape, scale, size=n) for shape, scale in (cfg.mu, cfg.k1, cfg.k2)]
    return np.column_stack(cols) if n else np.zeros((0, 3))


def synth_generate(cfg, rng=None):
    """Population of May-Newman individuals evaluated on every protocol of ``cfg``."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params = draw_params(cfg, rng)
    grid = cfg.stretch_grid
    individuals = []
    for i, (mu, k1, k2) in enumerate(params):
        mn = MayNewmanParams(mu, k1, k2)
        curves = [may_newman_curve(mn, LoadingProtocol(p, grid)) for p in cfg.protocols]
        individuals.append(Individual(f"ind{i:05d}", curves, {"mu": mu, "k1": k1, "k2": k2}))
    return Population(individuals, {"source": "may-newman", "config": cfg.to_dict()})

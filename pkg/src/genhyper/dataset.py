"""In-memory population dataset: individuals, each with one curve per protocol."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class Individual:
    name: str
    curves: list
    params: dict = field(default_factory=dict)

    def protocols(self):
        return [c.kind for c in self.curves]

    def curve(self, kind):
        for c in self.curves:
            if c.kind == kind:
                return c
        raise KeyError(kind)


@dataclass
class Population:
    individuals: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.individuals)

    def __iter__(self):
        return iter(self.individuals)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Population(self.individuals[i], dict(self.meta))
        return self.individuals[i]


@dataclass
class PackedData:
    """Curves of all individuals flattened into padded (M, n) arrays."""

    lx: np.ndarray
    ly: np.ndarray
    sxx: np.ndarray
    syy: np.ndarray
    mask: np.ndarray
    curve_id: np.ndarray
    n_curves: int
    curve_scale: np.ndarray


def pack(individuals):
    """Flatten every individual's curves into padded arrays with a validity mask."""
    from .mechanics import _stretches

    individuals = list(individuals)
    if not individuals:
        raise ValidationError("empty dataset")
    kinds = individuals[0].protocols()
    for ind in individuals:
        if ind.protocols() != kinds:
            raise ValidationError(f"individual {ind.name!r} has protocols {ind.protocols()}, expected {kinds}")
    lengths = [sum(c.stretch.size for c in ind.curves) for ind in individuals]
    m, n = len(individuals), max(lengths)
    out = {k: np.ones((m, n)) for k in ("lx", "ly")}
    out.update({k: np.zeros((m, n)) for k in ("sxx", "syy", "mask")})
    curve_id = np.zeros((m, n), dtype=int)
    scale = np.zeros((m, len(kinds)))
    for i, ind in enumerate(individuals):
        pos = 0
        for j, c in enumerate(ind.curves):
            k = c.stretch.size
            lx, ly, _ = _stretches(c.kind, c.stretch)
            sl = slice(pos, pos + k)
            out["lx"][i, sl], out["ly"][i, sl] = lx, ly
            out["sxx"][i, sl], out["syy"][i, sl] = c.sigma_xx, c.sigma_yy
            out["mask"][i, sl] = 1.0
            curve_id[i, sl] = j
            scale[i, j] = c.max_abs_stress()
            pos += k
    return PackedData(out["lx"], out["ly"], out["sxx"], out["syy"], out["mask"],
                      curve_id, len(kinds), scale)

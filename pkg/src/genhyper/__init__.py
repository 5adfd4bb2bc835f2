"""Generative polyconvex hyperelasticity.

Monotone neural-ODE strain energies fitted to biaxial stress-stretch data, a
score-based diffusion model over the individual-specific parameters, and
spatially correlated parameter fields on grids and triangle meshes.
"""
import jax

# every differentiable path in the package runs in double precision
jax.config.update("jax_enable_x64", True)

from .errors import NumericalError, ValidationError  # noqa: E402

__version__ = "0.1.0"

__all__ = ["NumericalError", "ValidationError", "__version__"]

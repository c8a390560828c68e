"""Holographic single particle imaging: simulation and EMC reconstruction.

Two holographic reference geometries are supported: a sphere attached to
the object, and a 2D crystal lattice. The reconstruction engine is an
expectation-maximization loop over latent (rotation, shift, diameter)
states whose compress step is a divide-and-concur difference map.
"""

from .errors import ConfigError, ContractError, FormatError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "FormatError", "__version__"]

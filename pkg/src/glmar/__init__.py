"""Bayesian inference for the spatiotemporal GLM-AR model on voxel lattices.

The package provides a voxel-lattice smoothing prior (`lattice`), the model
density and its gradient (`model`), two inference backends (`hmc`, `vb`),
a data simulator (`simulate`), evaluation statistics (`metrics`), and a
command-line interface (`cli`).
"""

__version__ = "0.1.0"

from .errors import DataError, GlmarError, NumericalError

__all__ = ["DataError", "GlmarError", "NumericalError", "__version__"]

"""Probabilistic human-motion forecasting on SO(3).

Typed-graph recurrent network with a discrete-latent mixture of
Concentrated Gaussian rotation distributions, plus training, metrics,
synthetic data, and a CLI.
"""

from motionforecast.errors import NumericalError, ParseError

__version__ = "0.1.0"

__all__ = ["NumericalError", "ParseError", "__version__"]

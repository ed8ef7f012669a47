"""HMC-enhanced variational inference on a small numpy autodiff engine."""
from . import autodiff, bound, data, estimators, hmc, leapfrog, models, potential, training

__all__ = ["autodiff", "bound", "data", "estimators", "hmc", "leapfrog", "models", "potential", "training"]

__version__ = "0.1.0"

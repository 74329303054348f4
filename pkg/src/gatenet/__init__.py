"""Gating-network toolkit: learn hidden gate dynamics of ionic models.

Pipeline: simulate a reference ionic model, train a recurrent network
whose core cell integrates Hodgkin-Huxley style gates, retrain it on
observables from perturbed recordings, and export the result as an
interpretable neural ODE for current reconstruction.
"""

__version__ = "0.1.0"

from .models import get_model, with_perturbation  # noqa: F401

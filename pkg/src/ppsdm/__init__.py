"""Poisson point process species distribution models.

Log-linear intensity fitting by maximum likelihood and by minimum
beta / gamma / U-cdf divergence, Maxent and logistic-regression bridges,
quasi-linear intensities, and integrated presence-background plus
site-occupancy models.
"""

__version__ = "0.1.0"

from .divergence import (  # noqa: E402
    CdfSpec,
    DivergenceSpec,
    FitOptions,
    fit_beta_power,
    fit_divergence,
    fit_gamma_power,
    fit_mle,
    fit_u_cdf,
)
from .grid import CovariateGrid, GridSchema, PresenceSet, load_grid, write_grid  # noqa: E402
from .optimize import FitResult  # noqa: E402

__all__ = [
    "CdfSpec", "CovariateGrid", "DivergenceSpec", "FitOptions", "FitResult", "GridSchema", "PresenceSet",
    "fit_beta_power", "fit_divergence", "fit_gamma_power", "fit_mle", "fit_u_cdf", "load_grid", "write_grid",
]

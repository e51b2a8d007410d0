"""Generalized Langevin sampling toolkit.

Subpackages: potentials (targets and mirror metrics), dynamics (drift/curl
assembly and stationarity checks), samplers (Euler-Maruyama chains and
ensembles), ratelab (large-deviation rate functions on grids), lyapunov
(drift-bound verification), blr (Bayesian logistic regression experiments)
and cli (command-line entry point).
"""

__version__ = "0.1.0"

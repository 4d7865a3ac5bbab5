"""Monte Carlo derivative formulas for tensor fields under geometric flows.

Modules
-------
geom       conformal charts, metric evaluation, curvature, geodesic distance
flows      desk-scale flow solvers producing a :class:`FlowHistory`
stoch      Brownian motion and orthonormal frames for a time-changing metric
estimator  damping operators, cutoff, control and the derivative estimators
harness    oracles, inequality audits, scenario configs, run storage and CLI
"""

__version__ = "0.1.0"

from .flows import FlowConfig, FlowHistory, reparametrize_history, run_flow
from .estimator import (
    make_coefficients,
    martingale_diagnostic,
    run_derivative_estimate,
    run_second_order_estimate,
)

__all__ = [
    "FlowConfig",
    "FlowHistory",
    "make_coefficients",
    "martingale_diagnostic",
    "reparametrize_history",
    "run_derivative_estimate",
    "run_flow",
    "run_second_order_estimate",
]

"""Named reference scenarios shared by the CLI suites, calibration and tests."""

from __future__ import annotations

import numpy as np

from ..flows import FlowConfig, analytic_sphere_mcf, run_flow

REFERENCE_FLOWS = {
    "heat_flat": dict(family="HeatStatic", initial={"modes": [[1, 0, 0.0, 1.0]]},
                      T=0.25, dt=0.25 / 200, resolution=(32, 32)),
    "ricci_flat": dict(family="Ricci2D", initial={"preset": "flat"}, T=0.1, dt=0.1 / 100,
                       resolution=(32, 32)),
    "ricci_bump": dict(family="Ricci2D", initial={"preset": "bump", "eps": 0.4, "beta": 1.0},
                       T=0.25, dt=0.25 / 200, resolution=(64, 64)),
    "ricci_bump_fine": dict(family="Ricci2D", initial={"preset": "bump", "eps": 0.4, "beta": 1.0},
                            T=0.25, dt=0.25 / 400, resolution=(128, 128)),
    "ricci_rough": dict(family="Ricci2D", initial={"preset": "rough", "eps": 0.3, "seed": 7},
                        T=0.2, dt=0.2 / 160, resolution=(64, 64)),
    "ricci_rough_fine": dict(family="Ricci2D", initial={"preset": "rough", "eps": 0.3, "seed": 7},
                             T=0.2, dt=0.2 / 320, resolution=(128, 128)),
    "round_sphere_ricci": dict(family="Ricci2D", initial={"preset": "round-sphere", "radius": 1.0},
                               T=0.1, dt=0.1 / 100),
    "yamabe_sine": dict(family="Yamabe3DConformal", initial={"preset": "sine", "eps": 0.1},
                        T=0.1, dt=0.1 / 100, resolution=(32, 32, 32)),
    "csf_circle": dict(family="CurveShortening", initial={"preset": "circle", "radius": 1.0},
                       T=0.2, dt=0.2 / 200, resolution=(64,)),
    "csf_ellipse": dict(family="CurveShortening", initial={"preset": "ellipse", "a": 1.5, "b": 1.0},
                        T=0.2, dt=0.2 / 200, resolution=(128,)),
    "csf_ellipse_fine": dict(family="CurveShortening",
                             initial={"preset": "ellipse", "a": 1.5, "b": 1.0},
                             T=0.2, dt=0.2 / 400, resolution=(256,)),
    "csf_rough": dict(family="CurveShortening",
                      initial={"preset": "rough", "r0": 1.0, "eps": 0.15, "seed": 3,
                               "kmax": 12, "decay": 3.5},
                      T=0.1, dt=0.1 / 320, resolution=(128,)),
    "csf_rough_fine": dict(family="CurveShortening",
                           initial={"preset": "rough", "r0": 1.0, "eps": 0.15, "seed": 3,
                                    "kmax": 12, "decay": 3.5},
                           T=0.1, dt=0.1 / 640, resolution=(256,)),
    "forced1_ellipse": dict(family="ForcedCSF-I", initial={"preset": "ellipse", "a": 1.5, "b": 1.0},
                            T=0.2, dt=0.2 / 200, resolution=(128,), forcing=0.5),
    "forced2_ellipse": dict(family="ForcedCSF-II", initial={"preset": "ellipse", "a": 1.5, "b": 1.0},
                            T=0.2, dt=0.2 / 200, resolution=(128,), forcing=0.5),
    "forced1_circle": dict(family="ForcedCSF-I", initial={"preset": "circle", "radius": 1.0},
                           T=0.2, dt=0.2 / 200, resolution=(64,), forcing=1.0),
    "forced2_circle": dict(family="ForcedCSF-II", initial={"preset": "circle", "radius": 1.0},
                           T=0.2, dt=0.2 / 200, resolution=(64,), forcing=1.0),
}

SPHERE_MCF = {
    "sphere_mcf": dict(n=2, rho0=1.0, T=0.1, dt=0.1 / 100),
    "circle_mcf": dict(n=1, rho0=1.0, T=0.2, dt=0.2 / 200),
}

# audit tag -> (scenario, x0, r); ceilings in data/ceilings.json are frozen from these
REFERENCE_AUDITS = {
    "4.1": ("ricci_bump", (0.8, 0.3), 1.0),
    "4.2": ("ricci_bump", (0.8, 0.3), 1.0),
    "4.3": ("csf_ellipse", (0.7,), 1.0),
    "4.4": ("forced1_ellipse", (0.7,), 1.0),
    "4.5": ("forced2_ellipse", (0.7,), 1.0),
    "4.6": ("yamabe_sine", (0.8, 0.0, 0.0), 1.0),
    "remark-4.1-scaling": ("ricci_rough", (1.0, 2.0), 1.0),
    "remark-4.3-eta": ("ricci_bump", (0.8, 0.3), 1.0),
    "remark-4.5": ("yamabe_sine", (0.8, 0.0, 0.0), 1.0),
}


def flow_config(name: str, **overrides) -> FlowConfig:
    spec = dict(REFERENCE_FLOWS[name])
    spec.update(overrides)
    return FlowConfig(**spec)


def reference_history(name: str, **overrides):
    """Forward history of a named scenario."""
    if name in SPHERE_MCF:
        spec = dict(SPHERE_MCF[name])
        spec.update(overrides)
        return analytic_sphere_mcf(**spec)
    return run_flow(flow_config(name, **overrides))


def heat_initial_grid(history) -> np.ndarray:
    """Initial field of a HeatStatic history, for the flat-torus heat oracle."""
    return history.snapshots[0].fields.grid("a")

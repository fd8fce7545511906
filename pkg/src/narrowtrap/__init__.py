"""Narrow-capture toolkit: mean first-passage times of Brownian motion on
surfaces with a small absorbing geodesic-disk trap.

Submodules: geometry (surfaces, distances, charts), green (mean-zero and
Neumann Green's functions, regular parts), asymptotics (capture-time
expansion), pde (direct grid solves and scaling checks), montecarlo
(path sampling), optimizer (trap placement), cli (batch front door).
"""

from .geometry import SurfacePoint, SurfaceSpec, surface_from_json
from .green import GreenValue, RegularPartEstimate
from .asymptotics import MFPTResult, TrapSpec, mfpt_average, mfpt_pointwise

__all__ = [
    "SurfaceSpec",
    "SurfacePoint",
    "surface_from_json",
    "GreenValue",
    "RegularPartEstimate",
    "MFPTResult",
    "TrapSpec",
    "mfpt_average",
    "mfpt_pointwise",
]

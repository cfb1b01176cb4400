"""Desk-scale laboratory for quadratic derivative nonlinear waves.

Subpackages cover Lorentzian geometry and geodesic flow (:mod:`geometry`),
null-form algebra (:mod:`nullform`), four-wave interaction coefficients
(:mod:`symbolcalc`), a finite-difference forward solver with asymptotic
expansion extraction (:mod:`wavesolver`), light observation sets
(:mod:`obsets`), and the scenario runner (:mod:`cli`).
"""

__version__ = "0.1.0"

"""Optimal transport, Jensen-Shannon divergence and low-dimensional supports.

Submodules: ``transport`` (exact and entropic OT), ``divergence`` (grid
KL/JSD and restricted F-distances), ``manifolds`` (charts, overlap,
translation), ``gradients`` (loss gradients with finite-difference audits),
``experiments`` (reproducible suites) and ``cli``.
"""

from __future__ import annotations

__version__ = "0.1.0"

"""Membership inference against transfer-learned classifiers, at desk scale.

Modules: ``nn`` (dense nets and SGD), ``transfer`` (shallow-stack reuse),
``shadow`` (shadow ensembles), ``attacks`` (learned and entropy adversaries),
``metrics``, ``data`` and ``experiment`` (config-driven sweeps, used by ``cli``).
"""

__version__ = "0.1.0"

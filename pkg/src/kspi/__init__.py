"""Kronecker single-pixel imaging toolkit.

Simulates the factored measurement model Y = phi X psi^T, reconstructs with
classical tensor ISTA (TV or l1 prox) or an unfolded hybrid-attention
network, and ships the training/evaluation/benchmark harness around them.
"""

from .sensing import (
    FactorPair,
    add_noise,
    adjoint,
    build_factor_pair,
    forward,
    kron_expand,
    sequency_order,
    sylvester_hadamard,
)
from .solvers import IstaConfig, SolveTrace, ista_solve, objective, soft_threshold, tgd_step, tv_prox
from .unfolding import HATNet, HatnetConfig, build_hatnet, measurements_for_ratio

__all__ = [
    "FactorPair",
    "add_noise",
    "adjoint",
    "build_factor_pair",
    "forward",
    "kron_expand",
    "sequency_order",
    "sylvester_hadamard",
    "IstaConfig",
    "SolveTrace",
    "ista_solve",
    "objective",
    "soft_threshold",
    "tgd_step",
    "tv_prox",
    "HATNet",
    "HatnetConfig",
    "build_hatnet",
    "measurements_for_ratio",
]

__version__ = "0.1.0"

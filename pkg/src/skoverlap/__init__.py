"""skoverlap: high-temperature SK multi-overlap fluctuation toolkit.

Theory side: deterministic computation of the limiting Gaussian covariance
structure of scaled truncated multi-overlaps (moment tables, covariance
recursions, Wick moments).  Experiment side: exact quenched Gibbs
computation at small N by full configuration enumeration, averaged over
Gaussian disorder, with 1/sqrt(N) extrapolation and z-score comparison
against the theory.
"""

from .moments import (
    ModelParams,
    QuadratureRule,
    QTable,
    CoeffTable,
    hermite_rule,
    solve_q2,
    q_table,
    coeff_table,
)

__all__ = [
    "ModelParams",
    "QuadratureRule",
    "QTable",
    "CoeffTable",
    "hermite_rule",
    "solve_q2",
    "q_table",
    "coeff_table",
]

__version__ = "0.1.0"

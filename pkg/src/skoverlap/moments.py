"""Disorder-level moment tables for the high-temperature SK model.

The scalar backbone of the theory side: the fixed point ``q2`` of

    q2 = E[tanh²(β·√q2·Y + h)],   Y ~ N(0, 1),

the moment sequence ``q_p = E[tanh^p(β·√q2·Y + h)]`` and the coefficient
families derived from it,

    ρ_p = q_p − 2·q_{p+2} + q_{p+4}
    π_p = q_{p+1} − q_{p+3}            (p ≥ −1, else 0)
    φ_p = p·π_{p−2} − 3·π_p
    λ_p = C(p,2)(q_{p−2} − q_p q_2) + C(p+1,2)(q_{p+2} − q_p q_2)
          − p²(q_p − q_p q_2)
    κ_{p,p̃} = p·p̃·(first factor) − p̃(p+1)(q_{p+2} − q_p q_2)
    ω_{p,p̃} = C(p̃,2)(q_{p+2} − q_p q_2)

which drive the covariance recursions downstream.  κ exists in two
transcription variants that differ in the first factor, (q_p − q_{p+2})
versus (q_p − q_p·q_2); both are kept behind a selector (see
``CoeffTable.kappa``).

All expectations over Y are deterministic Gauss-Hermite sums normalized
against the standard Gaussian weight, so everything here is pure and
reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AmbiguityError, SolverError

BETA_GUARD_DEFAULT = 0.25
DEFAULT_QUAD_ORDER = 61
DEFAULT_P_MAX = 12


@dataclass(frozen=True)
class ModelParams:
    """Inverse temperature and external field strength.

    beta must lie in [0, beta_guard] unless ``allow_high_beta`` is set: the
    limiting covariance structure is only valid below some positive
    threshold, and the guard is a pragmatic stand-in for it, not a theorem.
    h = 0 is accepted but recorded as a warning (uniqueness of the q2 fixed
    point is only guaranteed for h > 0).
    """

    beta: float
    h: float
    beta_guard: float = BETA_GUARD_DEFAULT
    allow_high_beta: bool = False
    warnings: tuple[str, ...] = field(init=False, default=())

    def __post_init__(self):
        if not math.isfinite(self.beta) or self.beta < 0.0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if not math.isfinite(self.h) or self.h < 0.0:
            raise ValueError(f"h must be finite and >= 0, got {self.h}")
        if self.beta > self.beta_guard and not self.allow_high_beta:
            raise ValueError(
                f"beta={self.beta} exceeds the high-temperature guard "
                f"beta_guard={self.beta_guard}; pass allow_high_beta=True to "
                "override (results are unsupported there)"
            )
        notes = []
        if self.h == 0.0:
            notes.append(
                "h=0: uniqueness of the q2 fixed point is not guaranteed; "
                "q2=0 is always a root and is the one returned"
            )
        object.__setattr__(self, "warnings", tuple(notes))


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for expectations against a standard Gaussian.

    Weights are normalized to sum to 1 so ``expect`` is literally a weighted
    average; nodes are symmetric about 0 with matching mirrored weights.
    """

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape:
            raise ValueError("nodes and weights must be 1-D and equal length")
        if abs(weights.sum() - 1.0) > 1e-14:
            raise ValueError("weights must sum to 1 within 1e-14")
        if np.max(np.abs(nodes + nodes[::-1])) > 1e-14:
            raise ValueError("nodes must be symmetric about 0 within 1e-14")
        if np.max(np.abs(weights - weights[::-1])) > 1e-14:
            raise ValueError("mirrored nodes must carry equal weights")
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def order(self) -> int:
        return self.nodes.shape[0]

    def expect(self, fn) -> float:
        """E[fn(Y)] for Y ~ N(0,1); exact for polynomials of degree < 2·order."""
        return float(self.weights @ fn(self.nodes))


def hermite_rule(order: int) -> QuadratureRule:
    """Gauss-Hermite rule for the standard Gaussian (probabilists' weight).

    Exact for polynomial integrands of degree <= 2*order - 1.
    """
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / weights.sum()
    # hermegauss returns symmetric nodes up to roundoff; make the symmetry
    # exact so the rule invariants hold bit for bit.
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(nodes, weights)


def _q2_map(q: float, beta: float, h: float, rule: QuadratureRule) -> float:
    t = np.tanh(beta * math.sqrt(max(q, 0.0)) * rule.nodes + h)
    return float(rule.weights @ (t * t))


def _bisect_q2(beta: float, h: float, rule: QuadratureRule, width: float = 1e-16) -> float:
    """Root of q - E[tanh²(β√q·Y + h)] on [0, 1] by plain bisection."""
    lo, hi = 0.0, 1.0
    f_lo = lo - _q2_map(lo, beta, h, rule)
    if f_lo == 0.0:
        return lo
    f_hi = hi - _q2_map(hi, beta, h, rule)
    if f_lo > 0.0 or f_hi < 0.0:
        raise SolverError("bisection bracket [0,1] does not straddle a root")
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        f_mid = mid - _q2_map(mid, beta, h, rule)
        if f_mid == 0.0:
            return mid
        if f_mid < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve_q2(
    params: ModelParams,
    rule: QuadratureRule,
    tol: float = 1e-13,
    max_iter: int = 300,
) -> float:
    """Fixed point of q = E[tanh²(β√q·Y + h)].

    Damped fixed-point iteration (factor 0.5) with a bisection fallback; the
    result is always cross-validated against an independent sign-change
    bisection on [0, 1].  Raises SolverError on non-convergence and
    AmbiguityError if the two routes disagree beyond 10*tol.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    beta, h = params.beta, params.h
    q = math.tanh(h) ** 2
    residual = abs(q - _q2_map(q, beta, h, rule))
    converged = residual < tol
    for _ in range(max_iter):
        if converged:
            break
        q = 0.5 * q + 0.5 * _q2_map(q, beta, h, rule)
        residual = abs(q - _q2_map(q, beta, h, rule))
        converged = residual < tol
    if not converged:
        # Contraction can stall near the guard; fall back to bisection.
        q = _bisect_q2(beta, h, rule)
        residual = abs(q - _q2_map(q, beta, h, rule))
        if residual >= tol:
            raise SolverError(
                f"q2 solver did not reach tol={tol} (last residual {residual})",
                residual=residual,
            )
    q_bis = _bisect_q2(beta, h, rule)
    if abs(q - q_bis) > 10.0 * tol:
        raise AmbiguityError(
            f"fixed-point q2={q!r} and bisection q2={q_bis!r} disagree beyond {10 * tol}"
        )
    return q


@dataclass(frozen=True)
class QTable:
    """q2 and the moment sequence q_p, p = 0..p_max, for fixed (beta, h)."""

    params: ModelParams
    q2: float
    q: np.ndarray
    p_max: int
    residual: float

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.shape != (self.p_max + 1,):
            raise ValueError("q must have length p_max + 1")
        if q[0] != 1.0:
            raise ValueError("q[0] must be exactly 1")
        if np.max(np.abs(q)) > 1.0 + 1e-12:
            raise ValueError("all |q_p| must be <= 1")
        if not 0.0 <= self.q2 <= 1.0:
            raise ValueError("q2 must lie in [0, 1]")
        if q[2] != self.q2:
            raise ValueError("q[2] must equal q2")
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    def at(self, p: int) -> float:
        """q_p, raising a descriptive error past the table end."""
        if p < 0:
            raise ValueError(f"q_{p} requested; q is defined for p >= 0")
        if p > self.p_max:
            raise ValueError(
                f"q_{p} requested but the table stops at p_max={self.p_max}"
            )
        return float(self.q[p])


def q_table(
    params: ModelParams,
    rule: QuadratureRule,
    p_max: int = DEFAULT_P_MAX,
    tol: float = 1e-13,
    max_iter: int = 300,
) -> QTable:
    """Moment table q_p = E[tanh^p(β√q2·Y + h)] for p = 0..p_max.

    p_max must be at least 4 (the covariance formulas index up to
    p + p̃ + 2|S|).  q[0] is pinned to 1 (empty product) and q[2] to the
    solved q2.
    """
    if p_max < 4:
        raise ValueError(f"p_max must be >= 4, got {p_max}")
    q2 = solve_q2(params, rule, tol=tol, max_iter=max_iter)
    th = np.tanh(params.beta * math.sqrt(q2) * rule.nodes + params.h)
    powers = np.empty(p_max + 1)
    acc = np.ones_like(th)
    for p in range(p_max + 1):
        powers[p] = float(rule.weights @ acc)
        acc = acc * th
    powers[0] = 1.0
    residual = abs(q2 - powers[2])
    powers[2] = q2
    return QTable(params=params, q2=q2, q=powers, p_max=p_max, residual=residual)


KAPPA_VARIANTS = ("proof", "statement")


@dataclass(frozen=True)
class CoeffTable:
    """Coefficient families ρ, π, φ (arrays) and λ, κ, ω (evaluators).

    ``pi`` is indexed from p = −1 (π_{−1} = 1 − q2 since q_0 = 1) and is 0
    for p < −1.  κ honors ``kappa_variant``; both transcriptions stay
    available through kappa_proof / kappa_statement.
    """

    q: QTable
    rho: np.ndarray
    _pi: np.ndarray
    _phi: np.ndarray
    kappa_variant: str = "proof"

    def __post_init__(self):
        if self.kappa_variant not in KAPPA_VARIANTS:
            raise ValueError(f"kappa_variant must be one of {KAPPA_VARIANTS}")
        for name in ("rho", "_pi", "_phi"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        self._recheck()

    def _recheck(self):
        """Re-derive every array entry from the q table; construction bug guard."""
        q = self.q
        for p in range(self.rho.shape[0]):
            expected = q.at(p) - 2.0 * q.at(p + 2) + q.at(p + 4)
            if self.rho[p] != expected:
                raise ValueError(f"rho[{p}] inconsistent with the q table")
        for idx in range(self._pi.shape[0]):
            p = idx - 1
            expected = q.at(p + 1) - q.at(p + 3)
            if self._pi[idx] != expected:
                raise ValueError(f"pi[{p}] inconsistent with the q table")
        for p in range(self._phi.shape[0]):
            expected = p * self.pi(p - 2) - 3.0 * self.pi(p)
            if self._phi[p] != expected:
                raise ValueError(f"phi[{p}] inconsistent with the q table")

    # -- array accessors ---------------------------------------------------

    @property
    def p_max(self) -> int:
        return self.q.p_max

    def rho_at(self, p: int) -> float:
        if p < 0 or p >= self.rho.shape[0]:
            raise ValueError(
                f"rho_{p} needs q_{p + 4}; table stops at p_max={self.q.p_max}"
            )
        return float(self.rho[p])

    def pi(self, p: int) -> float:
        if p < -1:
            return 0.0
        idx = p + 1
        if idx >= self._pi.shape[0]:
            raise ValueError(
                f"pi_{p} needs q_{p + 3}; table stops at p_max={self.q.p_max}"
            )
        return float(self._pi[idx])

    def phi(self, p: int) -> float:
        if p < 0 or p >= self._phi.shape[0]:
            raise ValueError(
                f"phi_{p} out of range; table stops at p_max={self.q.p_max}"
            )
        return float(self._phi[p])

    # -- scalar evaluators -------------------------------------------------

    def lam(self, p: int) -> float:
        """λ_p; terms with a structurally zero binomial coefficient are skipped."""
        q = self.q
        val = 0.0
        c = math.comb(p, 2)
        if c:
            val += c * (q.at(p - 2) - q.at(p) * q.q2)
        c = math.comb(p + 1, 2)
        if c:
            val += c * (q.at(p + 2) - q.at(p) * q.q2)
        if p:
            val -= p * p * (q.at(p) - q.at(p) * q.q2)
        return val

    def kappa_statement(self, p: int, pt: int) -> float:
        q = self.q
        val = 0.0
        if p and pt:
            val += p * pt * (q.at(p) - q.at(p + 2))
        if pt:
            val -= pt * (p + 1) * (q.at(p + 2) - q.at(p) * q.q2)
        return val

    def kappa_proof(self, p: int, pt: int) -> float:
        q = self.q
        val = 0.0
        if p and pt:
            val += p * pt * (q.at(p) - q.at(p) * q.q2)
        if pt:
            val -= pt * (p + 1) * (q.at(p + 2) - q.at(p) * q.q2)
        return val

    def kappa(self, p: int, pt: int) -> float:
        if self.kappa_variant == "proof":
            return self.kappa_proof(p, pt)
        return self.kappa_statement(p, pt)

    def omega(self, p: int, pt: int) -> float:
        c = math.comb(pt, 2)
        if not c:
            return 0.0
        q = self.q
        return c * (q.at(p + 2) - q.at(p) * q.q2)


def coeff_table(q: QTable, kappa_variant: str = "proof") -> CoeffTable:
    """Build the coefficient table from a moment table.

    Index ranges are the widest the q table supports: ρ_p for
    p <= p_max − 4, π_p for −1 <= p <= p_max − 3, φ_p for p <= p_max − 3.
    """
    p_max = q.p_max
    rho = np.array(
        [q.at(p) - 2.0 * q.at(p + 2) + q.at(p + 4) for p in range(p_max - 3)]
    )
    pi = np.array([q.at(p + 1) - q.at(p + 3) for p in range(-1, p_max - 2)])

    def pi_of(p: int) -> float:
        return pi[p + 1] if p >= -1 else 0.0

    phi = np.array(
        [p * pi_of(p - 2) - 3.0 * pi_of(p) for p in range(p_max - 2)]
    )
    return CoeffTable(q=q, rho=rho, _pi=pi, _phi=phi, kappa_variant=kappa_variant)

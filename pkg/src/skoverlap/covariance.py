"""Limiting covariance structure of scaled truncated overlap families.

For a replica subset S and power p, the truncated overlap

    T_{S,p} = (1/N) Σ_i Π_{ℓ∈S} (σ_i^ℓ − ⟨σ_i⟩) ⟨σ_i⟩^p     (S ≠ ∅)
    T_{∅,p} = (1/N) Σ_i ⟨σ_i⟩^p − q_p

has, at high temperature, N·ν(T_{S,p} T_{S̃,p̃}) → δ_{S,S̃} A_{|S|}(p,p̃)
with an explicit family A_s.  This module evaluates A_s N-free (all 1/N
prefactors stripped, so the stored number is exactly the limiting
covariance of √N·T):

    s ≥ 3:  A_s(p,p̃) = Σ_{ℓ=0..s} C(s,ℓ)(−1)^ℓ q_{p+p̃+2ℓ}
    s = 2:  A_2(p,p̃) = ρ_{p+p̃} + β²ρ_p ρ_{p̃} + β⁴ρ_p ρ_{p̃} ρ₀/(1−β²ρ₀)
    s = 1:  A_1(p,p̃) = π_{p+p̃−1} + β²c_p·A_1(p̃,1) + β²p̃·π_p·A_2(p̃−1,0)
    s = 0:  A_0(p,p̃) = (q_{p+p̃} − q_p q_{p̃}) + β²λ_p·A_0(p̃,2)
                        + β²κ_{p,p̃}·A_1(p̃−1,1) + β²ω_{p,p̃}·A_2(p̃−2,0)

The s = 1 and s = 0 recursions close through one scalar linear solve each
(A_1(1,1) and A_0(2,2)); c_p is φ_p by default with the alternative
(p+2)π_p transcription selectable.  Terms whose structural coefficient is 0
evaluate to 0 before their A-argument index is formed, so negative indices
never arise.  The recursions are not manifestly symmetric in (p,p̃); public
lookups return the symmetrized value and the raw asymmetry is logged.

Multi-overlap covariances follow from R_S − q_{|S|} = Σ_{S'⊆S} T_{S',|S|−|S'|};
predicted joint moments of centered families use Wick pairing.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ModelConstructionError, ModelInconsistencyError
from .moments import (
    CoeffTable,
    ModelParams,
    QTable,
    coeff_table,
    hermite_rule,
    q_table,
    DEFAULT_P_MAX,
    DEFAULT_QUAD_ORDER,
)

PHI_VARIANTS = ("proof", "statement")
ASYMMETRY_FLAG_RELATIVE = 1e-6


# ---------------------------------------------------------------------------
# keys and monomials
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class OverlapKey:
    """A truncated-overlap label: replica subset S (sorted tuple) and power p."""

    replicas: tuple[int, ...]
    power: int

    def __post_init__(self):
        reps = tuple(sorted(int(r) for r in self.replicas))
        if any(r <= 0 for r in reps):
            raise ValueError(f"replica labels must be positive, got {reps}")
        if len(set(reps)) != len(reps):
            raise ValueError(f"replica labels must be distinct, got {reps}")
        if self.power < 0:
            raise ValueError(f"power must be >= 0, got {self.power}")
        object.__setattr__(self, "replicas", reps)

    @property
    def size(self) -> int:
        return len(self.replicas)

    def label(self) -> str:
        inner = ",".join(str(r) for r in self.replicas)
        return f"S={{{inner}}},p={self.power}"

    @classmethod
    def parse(cls, text: str) -> "OverlapKey":
        """Parse the compact form ``{1,2}:0`` (empty set: ``{}:2``)."""
        text = text.strip()
        if not text.startswith("{") or ":" not in text:
            raise ValueError(f"cannot parse overlap key {text!r}")
        body, _, ptxt = text.partition(":")
        inner = body.strip()[1:-1].strip()
        reps = tuple(int(tok) for tok in inner.split(",") if tok.strip()) if inner else ()
        return cls(reps, int(ptxt))


@dataclass(frozen=True)
class Monomial:
    """Product Π T_{S,p}^{k(S,p)} with positive integer exponents."""

    factors: tuple[tuple[OverlapKey, int], ...]

    def __post_init__(self):
        seen = {}
        for key, exp in self.factors:
            if exp <= 0:
                raise ValueError("exponents must be positive integers")
            seen[key] = seen.get(key, 0) + int(exp)
        canon = tuple(sorted(seen.items()))
        if not canon:
            raise ValueError("a monomial needs at least one factor")
        object.__setattr__(self, "factors", canon)

    @property
    def degree(self) -> int:
        return sum(exp for _, exp in self.factors)

    def expanded(self) -> list[OverlapKey]:
        """Factor list with multiplicity."""
        out = []
        for key, exp in self.factors:
            out.extend([key] * exp)
        return out

    def label(self) -> str:
        return "*".join(
            f"{{{','.join(map(str, k.replicas))}}}:{k.power}" + (f"^{e}" if e > 1 else "")
            for k, e in self.factors
        )

    @classmethod
    def parse(cls, text: str) -> "Monomial":
        """Parse ``{1,2}:0^2*{1,3}:1`` style products."""
        factors = []
        for tok in text.strip().split("*"):
            tok = tok.strip()
            if "^" in tok:
                keytxt, _, etxt = tok.rpartition("^")
                factors.append((OverlapKey.parse(keytxt), int(etxt)))
            else:
                factors.append((OverlapKey.parse(tok), 1))
        return cls(tuple(factors))


# ---------------------------------------------------------------------------
# the A_s family
# ---------------------------------------------------------------------------


def a_high(s: int, p: int, pt: int, q: QTable) -> float:
    """A_s(p,p̃) for s >= 3: the alternating binomial sum in q."""
    if s < 3:
        raise ValueError(f"a_high needs s >= 3, got {s}")
    if p < 0 or pt < 0:
        raise ValueError("powers must be >= 0")
    return sum(
        math.comb(s, ell) * (-1) ** ell * q.at(p + pt + 2 * ell) for ell in range(s + 1)
    )


def a_two(p: int, pt: int, coeffs: CoeffTable, params: ModelParams) -> float:
    """A_2(p,p̃): closed three-term form (resums to ρ_{p+p̃} + β²ρ_pρ_{p̃}/(1−β²ρ₀))."""
    b2 = params.beta * params.beta
    rho0 = coeffs.rho_at(0)
    den = 1.0 - b2 * rho0
    if den <= 0.0:
        raise ModelConstructionError(f"1 - beta^2*rho_0 = {den} is not positive")
    rp, rpt = coeffs.rho_at(p), coeffs.rho_at(pt)
    return coeffs.rho_at(p + pt) + b2 * rp * rpt + b2 * b2 * rp * rpt * rho0 / den


def _a_one_coeff(p: int, coeffs: CoeffTable, phi_variant: str) -> float:
    """Coefficient multiplying A_1(p̃,1): φ_p, or the (p+2)π_p transcription."""
    if phi_variant == "proof":
        return coeffs.phi(p)
    return p * coeffs.pi(p - 2) - (p + 2) * coeffs.pi(p)


def _a_one_seed(coeffs: CoeffTable, params: ModelParams, phi_variant: str) -> float:
    """A_1(1,1) from its 1x1 linear solve (variant-independent: both
    coefficients coincide at p = 1)."""
    b2 = params.beta * params.beta
    c1 = _a_one_coeff(1, coeffs, phi_variant)
    den = 1.0 - b2 * c1
    if den <= 0.0:
        raise ModelConstructionError(f"1 - beta^2*phi_1 = {den} is not positive")
    pi1 = coeffs.pi(1)
    return (pi1 + b2 * pi1 * a_two(0, 0, coeffs, params)) / den


def _a_one_raw(
    p: int, pt: int, coeffs: CoeffTable, params: ModelParams, phi_variant: str, seed: float
) -> float:
    if (p, pt) == (1, 1):
        return seed
    b2 = params.beta * params.beta
    val = coeffs.pi(p + pt - 1)
    val += b2 * _a_one_coeff(p, coeffs, phi_variant) * _a_one_raw(
        pt, 1, coeffs, params, phi_variant, seed
    )
    if pt:  # coefficient p̃·π_p is structurally 0 at p̃ = 0
        val += b2 * pt * coeffs.pi(p) * a_two(pt - 1, 0, coeffs, params)
    return val


def _a_one_sym(
    p: int, pt: int, coeffs: CoeffTable, params: ModelParams, phi_variant: str, seed: float
) -> float:
    raw = _a_one_raw(p, pt, coeffs, params, phi_variant, seed)
    mirror = _a_one_raw(pt, p, coeffs, params, phi_variant, seed)
    return 0.5 * (raw + mirror)


def a_one(
    p: int,
    pt: int,
    coeffs: CoeffTable,
    params: ModelParams,
    phi_variant: str = "proof",
) -> float:
    """Symmetrized A_1(p,p̃); see module docstring for the recursion."""
    if p < 0 or pt < 0:
        raise ValueError("powers must be >= 0")
    if phi_variant not in PHI_VARIANTS:
        raise ValueError(f"phi_variant must be one of {PHI_VARIANTS}")
    seed = _a_one_seed(coeffs, params, phi_variant)
    return _a_one_sym(p, pt, coeffs, params, phi_variant, seed)


def _a_zero_seed(
    coeffs: CoeffTable, params: ModelParams, phi_variant: str, a11: float
) -> float:
    """A_0(2,2) from its closed linear equation."""
    q = coeffs.q
    b2 = params.beta * params.beta
    den = 1.0 - b2 * coeffs.lam(2)
    if den <= 0.0:
        raise ModelConstructionError(f"1 - beta^2*lambda_2 = {den} is not positive")
    const = q.at(4) - q.q2 * q.q2
    val = const + b2 * coeffs.kappa(2, 2) * a11
    val += b2 * coeffs.omega(2, 2) * a_two(0, 0, coeffs, params)
    return val / den


def _a_zero_raw(
    p: int,
    pt: int,
    coeffs: CoeffTable,
    params: ModelParams,
    phi_variant: str,
    a11: float,
    seed22: float,
) -> float:
    if p == 0 or pt == 0:
        return 0.0  # T_{∅,0} ≡ 0 (q_0 = 1)
    if (p, pt) == (2, 2):
        return seed22
    q = coeffs.q
    b2 = params.beta * params.beta
    val = q.at(p + pt) - q.at(p) * q.at(pt)
    if p:  # λ_0 is structurally 0
        val += b2 * coeffs.lam(p) * _a_zero_raw(
            pt, 2, coeffs, params, phi_variant, a11, seed22
        )
    kap = coeffs.kappa(p, pt)
    if pt:  # κ carries an overall factor p̃
        val += b2 * kap * _a_one_sym(pt - 1, 1, coeffs, params, phi_variant, a11)
    if pt >= 2:  # ω carries C(p̃,2)
        val += b2 * coeffs.omega(p, pt) * a_two(pt - 2, 0, coeffs, params)
    return val


def a_zero(
    p: int,
    pt: int,
    coeffs: CoeffTable,
    params: ModelParams,
    phi_variant: str = "proof",
) -> float:
    """Symmetrized A_0(p,p̃); returns 0 when either power is 0."""
    if p < 0 or pt < 0:
        raise ValueError("powers must be >= 0")
    a11 = _a_one_seed(coeffs, params, phi_variant)
    seed22 = _a_zero_seed(coeffs, params, phi_variant, a11)
    raw = _a_zero_raw(p, pt, coeffs, params, phi_variant, a11, seed22)
    mirror = _a_zero_raw(pt, p, coeffs, params, phi_variant, a11, seed22)
    return 0.5 * (raw + mirror)


# ---------------------------------------------------------------------------
# the assembled model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AsymmetryRecord:
    s: int
    p: int
    pt: int
    raw_asymmetry: float
    relative: float
    flagged: bool


class CovarianceModel:
    """Immutable bundle of (params, q table, coefficients) with memoized
    seeds; all lookups are pure and thread-safe.

    ``lookup(s, p, p̃)`` returns the symmetrized limiting covariance of
    √N·T_{S,p} and √N·T_{S,p̃} for |S| = s.  Construction fails if any
    recursion denominator is degenerate.
    """

    def __init__(
        self,
        params: ModelParams,
        p_max: int = DEFAULT_P_MAX,
        quad_order: int = DEFAULT_QUAD_ORDER,
        kappa_variant: str = "proof",
        phi_variant: str = "proof",
        qtable: QTable | None = None,
        asymmetry_power_cap: int = 4,
    ):
        if phi_variant not in PHI_VARIANTS:
            raise ValueError(f"phi_variant must be one of {PHI_VARIANTS}")
        self.params = params
        self.qtable = qtable if qtable is not None else q_table(
            params, hermite_rule(quad_order), p_max=p_max
        )
        self.coeffs = coeff_table(self.qtable, kappa_variant=kappa_variant)
        self.phi_variant = phi_variant
        self.a_one_seed = _a_one_seed(self.coeffs, params, phi_variant)
        self.a_zero_seed = _a_zero_seed(self.coeffs, params, phi_variant, self.a_one_seed)
        self._lookup = lru_cache(maxsize=None)(self._lookup_uncached)
        self.asymmetry_log = self._build_asymmetry_log(asymmetry_power_cap)

    # -- raw values, for the asymmetry log ----------------------------------

    def _raw(self, s: int, p: int, pt: int) -> float:
        if s == 0:
            return _a_zero_raw(
                p, pt, self.coeffs, self.params, self.phi_variant,
                self.a_one_seed, self.a_zero_seed,
            )
        if s == 1:
            return _a_one_raw(p, pt, self.coeffs, self.params, self.phi_variant, self.a_one_seed)
        if s == 2:
            return a_two(p, pt, self.coeffs, self.params)
        return a_high(s, p, pt, self.qtable)

    def _build_asymmetry_log(self, power_cap: int) -> tuple[AsymmetryRecord, ...]:
        records = []
        for s in (0, 1):
            for p in range(power_cap + 1):
                for pt in range(p, power_cap + 1):
                    try:
                        raw = self._raw(s, p, pt)
                        mirror = self._raw(s, pt, p)
                    except ValueError:
                        continue  # beyond the q table; not part of the log
                    asym = raw - mirror
                    scale = max(abs(raw), abs(mirror), 1e-300)
                    rel = abs(asym) / scale
                    records.append(
                        AsymmetryRecord(s, p, pt, asym, rel, rel > ASYMMETRY_FLAG_RELATIVE)
                    )
        return tuple(records)

    # -- public lookups ------------------------------------------------------

    def _lookup_uncached(self, s: int, p: int, pt: int) -> float:
        if s < 0 or p < 0 or pt < 0:
            raise ValueError("s, p, p̃ must be >= 0")
        if s >= 2:
            return self._raw(s, p, pt)
        return 0.5 * (self._raw(s, p, pt) + self._raw(s, pt, p))

    def lookup(self, s: int, p: int, pt: int) -> float:
        if pt < p:
            p, pt = pt, p  # symmetrized by construction; canonical order
        return self._lookup(s, p, pt)

    def limit_cov(self, k1: OverlapKey, k2: OverlapKey) -> float:
        """lim N·ν(T_{S,p} T_{S̃,p̃}): 0 unless S = S̃, else A_{|S|}(p,p̃)."""
        if k1.replicas != k2.replicas:
            return 0.0
        return self.lookup(k1.size, k1.power, k2.power)

    def multioverlap_cov(self, s1: tuple[int, ...], s2: tuple[int, ...]) -> float:
        """Limiting covariance of √N(R_S − q_{|S|}) and √N(R_{S̃} − q_{|S̃|}).

        Sum of A_{|S'|}(|S|−|S'|, |S̃|−|S'|) over common subsets S' ⊆ S∩S̃,
        including the empty set (the A_0 term).
        """
        s1 = tuple(sorted(set(s1)))
        s2 = tuple(sorted(set(s2)))
        if not s1 or not s2:
            raise ValueError("multi-overlap subsets must be nonempty")
        common = sorted(set(s1) & set(s2))
        total = 0.0
        for r in range(len(common) + 1):
            for sub in itertools.combinations(common, r):
                total += self.lookup(r, len(s1) - r, len(s2) - r)
        return total

    # -- predictions ---------------------------------------------------------

    def joint_moment_prediction(self, m: Monomial) -> float:
        """N-free limit of N^{k/2}·ν(Π T^{k}): product over replica subsets S
        of the Wick moment of the Gaussian block for S."""
        groups: dict[tuple[int, ...], list[tuple[int, int]]] = {}
        for key, exp in m.factors:
            groups.setdefault(key.replicas, []).append((key.power, exp))
        result = 1.0
        for reps, plist in sorted(groups.items()):
            if sum(e for _, e in plist) % 2 == 1:
                return 0.0
            powers = [p for p, _ in plist]
            exps = [e for _, e in plist]
            cov = np.array(
                [[self.lookup(len(reps), pa, pb) for pb in powers] for pa in powers]
            )
            result *= wick_moment(cov, exps)
        return result

    # -- serialization --------------------------------------------------------

    def covariance_matrix(self, keys: list[OverlapKey]) -> np.ndarray:
        n = len(keys)
        out = np.zeros((n, n))
        for i, k1 in enumerate(keys):
            for j in range(i, n):
                v = self.limit_cov(k1, keys[j])
                out[i, j] = v
                out[j, i] = v
        return out

    def serialize_covariance(self, keys: list[OverlapKey], fmt: str = "json") -> str:
        """Covariance matrix over a key set as CSV or JSON (full precision)."""
        mat = self.covariance_matrix(keys)
        labels = [k.label() for k in keys]
        if fmt == "json":
            doc = {
                "beta": self.params.beta,
                "h": self.params.h,
                "keys": labels,
                "matrix": [[float(v) for v in row] for row in mat],
                "asymmetry": [
                    {
                        "s": r.s,
                        "p": r.p,
                        "pt": r.pt,
                        "raw_asymmetry": r.raw_asymmetry,
                        "relative": r.relative,
                        "flagged": r.flagged,
                    }
                    for r in self.asymmetry_log
                ],
            }
            return json.dumps(doc, indent=2, sort_keys=True)
        if fmt == "csv":
            lines = ["key," + ",".join(f'"{lab}"' for lab in labels)]
            for lab, row in zip(labels, mat):
                lines.append(f'"{lab}",' + ",".join(format(v, ".17g") for v in row))
            lines.append("")
            lines.append("# asymmetry log: s,p,pt,raw,relative,flagged")
            for r in self.asymmetry_log:
                lines.append(
                    f"asym,{r.s},{r.p},{r.pt},{format(r.raw_asymmetry, '.17g')},"
                    f"{format(r.relative, '.17g')},{int(r.flagged)}"
                )
            return "\n".join(lines) + "\n"
        raise ValueError(f"unknown format {fmt!r}")


def limit_cov(k1: OverlapKey, k2: OverlapKey, model: CovarianceModel) -> float:
    return model.limit_cov(k1, k2)


def multioverlap_cov(s1, s2, model: CovarianceModel) -> float:
    return model.multioverlap_cov(tuple(s1), tuple(s2))


def joint_moment_prediction(m: Monomial, model: CovarianceModel) -> float:
    return model.joint_moment_prediction(m)


# ---------------------------------------------------------------------------
# Wick / Isserlis engines
# ---------------------------------------------------------------------------


def _matchings(slots: tuple[int, ...]):
    """All perfect matchings of the slot list (first element paired in turn)."""
    if not slots:
        yield ()
        return
    a = slots[0]
    for i in range(1, len(slots)):
        b = slots[i]
        rest = slots[1:i] + slots[i + 1 :]
        for m in _matchings(rest):
            yield ((a, b),) + m


def wick_pairing_sum(cov, slots):
    """Σ over perfect matchings of Π cov[a][b]; generic arithmetic so exact
    types (e.g. Fraction) pass through untouched."""
    slots = tuple(slots)
    if len(slots) % 2 == 1:
        return 0
    total = None
    for m in _matchings(slots):
        prod = None
        for a, b in m:
            prod = cov[a][b] if prod is None else prod * cov[a][b]
        term = prod if prod is not None else 1
        total = term if total is None else total + term
    return total if total is not None else 1


def wick_isserlis(cov, slots):
    """Recursive reduction: contract the first slot against each other slot."""
    slots = tuple(slots)
    if len(slots) % 2 == 1:
        return 0
    if not slots:
        return 1
    a = slots[0]
    total = None
    for i in range(1, len(slots)):
        rest = slots[1:i] + slots[i + 1 :]
        term = cov[a][slots[i]] * wick_isserlis(cov, rest)
        total = term if total is None else total + term
    return total


def wick_moment(cov: np.ndarray, exponents, psd_tol: float = 1e-10) -> float:
    """Joint moment E[Π X_i^{k_i}] of centered Gaussians with covariance cov.

    cov must be symmetric and PSD within psd_tol (eigenvalue floor); a
    violation raises ModelInconsistencyError rather than being repaired.
    Odd total degree returns 0.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("cov must be square")
    if not np.allclose(cov, cov.T, atol=0.0, rtol=0.0):
        raise ModelInconsistencyError("covariance matrix is not exactly symmetric")
    if cov.shape[0]:
        w = np.linalg.eigvalsh(cov)
        if w[0] < -psd_tol:
            raise ModelInconsistencyError(
                f"covariance matrix has eigenvalue {w[0]} below the -{psd_tol} floor"
            )
    exponents = list(exponents)
    if len(exponents) != cov.shape[0]:
        raise ValueError("one exponent per variable required")
    slots = tuple(i for i, k in enumerate(exponents) for _ in range(int(k)))
    if len(slots) % 2 == 1:
        return 0.0
    return float(wick_pairing_sum(cov, slots))

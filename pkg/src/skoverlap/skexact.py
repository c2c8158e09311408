"""Exact quenched Gibbs computation at small N by full enumeration.

One disorder sample at a time: couplings g_{ij} are i.i.d. standard
Gaussians from a counter-based stream (Philox keyed by seed with the sample
index in the counter block, Box-Muller on top), the Gibbs weight of a
configuration is e^{βH} with

    H(σ) = Σ_{i<j} g_{ij} σ_i σ_j / √N + h Σ_i σ_i

(sign convention: the exponent is +βH), and every spin-correlation sum is
exact.  The hot path is O(2^N·N): a Gray-code walk fills the exponent table
with incremental energy updates, and an in-place Walsh-Hadamard transform of
the weight vector then yields Σ_c w_c Π_{i∈A} σ_i(c) for every subset A at
once (σ_i(c) = 1 − 2·bit_i(c), so the transform coefficient at a mask is
exactly the correlation sum for that subset).  Coincident indices reduce via
σ² = 1, which the mask arithmetic performs automatically; the stored dense
tensors therefore have the reductions baked in (pair diag = 1, etc.).

A test-only independent-field mode replaces βH by h·Σσ_i with no couplings,
so every site magnetization is exactly tanh(h); this realizes the β=0
anchors with t = tanh(h) despite β multiplying h in the Hamiltonian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidStateError, NumericError, UnsupportedDegreeError
from .covariance import Monomial, OverlapKey
from .moments import ModelParams, QTable

N_CAP_ORDER2 = 24
N_CAP_ORDER3 = 20
N_CAP_ORDER4 = 14

COUPLING_STREAM = 0
REPLICA_STREAM = 1
TAIL_STREAM = 2

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# counter-based randomness
# ---------------------------------------------------------------------------


def counter_stream(seed: int, sample_index: int, purpose: int = COUPLING_STREAM) -> np.random.Generator:
    """Philox generator positioned at the (sample_index, purpose) counter block.

    Each (seed, sample_index, purpose) triple owns a disjoint 2^64-block of
    the counter space, so draws are independent of iteration order and of
    how many other streams were consumed.
    """
    if sample_index < 0 or purpose < 0:
        raise ValueError("sample_index and purpose must be >= 0")
    key = int(seed) & 0xFFFFFFFFFFFFFFFF
    counter = (int(sample_index) << 128) | (int(purpose) << 64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def gaussian_box_muller(gen: np.random.Generator, count: int) -> np.ndarray:
    """Standard normals via Box-Muller over the stream's uniforms.

    The transform is pinned (rather than the generator's native method) so
    the sampled disorder is a fixed function of the counter stream.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    half = (count + 1) // 2
    u1 = gen.random(half)
    u2 = gen.random(half)
    r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1]: no log(0)
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * half)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:count]


@dataclass(frozen=True)
class DisorderSample:
    """One realization of the couplings, upper triangle (i<j) row-major.

    The 1/√N scaling is applied at energy evaluation, not stored.
    """

    n_sites: int
    couplings: np.ndarray
    seed: int
    sample_index: int

    def __post_init__(self):
        g = np.asarray(self.couplings, dtype=float)
        expected = self.n_sites * (self.n_sites - 1) // 2
        if g.shape != (expected,):
            raise ValueError(
                f"couplings must have length N(N-1)/2 = {expected}, got {g.shape}"
            )
        g.flags.writeable = False
        object.__setattr__(self, "couplings", g)

    def coupling_matrix(self) -> np.ndarray:
        """Full symmetric matrix with zero diagonal (unscaled)."""
        n = self.n_sites
        mat = np.zeros((n, n))
        iu = np.triu_indices(n, 1)
        mat[iu] = self.couplings
        return mat + mat.T


def sample_disorder(n_sites: int, seed: int, sample_index: int) -> DisorderSample:
    """Draw the coupling array for one disorder sample; deterministic in
    (seed, sample_index) and independent of how many samples were drawn
    before."""
    if not 2 <= n_sites <= N_CAP_ORDER2:
        raise ValueError(f"n_sites must be in [2, {N_CAP_ORDER2}], got {n_sites}")
    count = n_sites * (n_sites - 1) // 2
    gen = counter_stream(seed, sample_index, COUPLING_STREAM)
    return DisorderSample(n_sites, gaussian_box_muller(gen, count), seed, sample_index)


# ---------------------------------------------------------------------------
# enumeration kernels
# ---------------------------------------------------------------------------


def _gray_exponents_py(jmat: np.ndarray, field: float, out: np.ndarray) -> None:
    """Gray-code walk over all configurations with O(1)-flip energy updates.

    out[mask] = Σ_{i<j} J_ij s_i s_j + field·Σ_i s_i for the configuration
    with s_i = 1 − 2·bit_i(mask).  J must be symmetric with zero diagonal.
    """
    n = jmat.shape[0]
    size = out.shape[0]
    s = np.ones(n)
    loc = jmat.sum(axis=1).astype(np.float64)
    e = float(jmat.sum()) * 0.5 + field * n
    out[0] = e
    mask = 0
    for k in range(1, size):
        kk = k
        b = 0
        while kk & 1 == 0:
            kk >>= 1
            b += 1
        mask ^= 1 << b
        snew = -s[b]
        s[b] = snew
        e += 2.0 * snew * (loc[b] + field)
        loc += (2.0 * snew) * jmat[:, b]
        out[mask] = e


def _wht_py(a: np.ndarray) -> None:
    """In-place Walsh-Hadamard transform: a'[m] = Σ_c a[c]·(−1)^{popcount(c&m)}."""
    size = a.shape[0]
    h = 1
    while h < size:
        view = a.reshape(-1, 2 * h)
        x = view[:, :h].copy()
        y = view[:, h:]
        view[:, :h] = x + y
        view[:, h:] = x - y
        h *= 2


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _gray_exponents_nb(jmat, field, out):  # pragma: no cover - jitted
        n = jmat.shape[0]
        size = out.shape[0]
        s = np.ones(n)
        loc = np.zeros(n)
        e = 0.0
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += jmat[i, j]
            loc[i] = acc
            for j in range(i + 1, n):
                e += jmat[i, j]
        e += field * n
        out[0] = e
        mask = 0
        for k in range(1, size):
            kk = k
            b = 0
            while kk & 1 == 0:
                kk >>= 1
                b += 1
            mask ^= 1 << b
            snew = -s[b]
            s[b] = snew
            e += 2.0 * snew * (loc[b] + field)
            for j in range(n):
                loc[j] += 2.0 * snew * jmat[j, b]
            out[mask] = e

    @numba.njit(cache=True)
    def _wht_nb(a):  # pragma: no cover - jitted
        size = a.shape[0]
        h = 1
        while h < size:
            step = h * 2
            for i in range(0, size, step):
                for j in range(i, i + h):
                    x = a[j]
                    y = a[j + h]
                    a[j] = x + y
                    a[j + h] = x - y
            h = step

    _gray_exponents = _gray_exponents_nb
    _wht_inplace = _wht_nb
else:  # pragma: no cover
    _gray_exponents = _gray_exponents_py
    _wht_inplace = _wht_py


def warm_up_kernels() -> None:
    """Trigger JIT compilation on a tiny problem (call before forking workers)."""
    out = np.empty(4)
    _gray_exponents(np.zeros((2, 2)), 0.1, out)
    _wht_inplace(out)


# ---------------------------------------------------------------------------
# Gibbs summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GibbsSummary:
    """Exact per-disorder Gibbs data: magnetizations and correlation tensors.

    Dense tensors with σ²=1 reductions baked in: ``pair[i,i] = 1``,
    ``triple[i,i,k] = m[k]``, etc.  ``config_weights`` (normalized, over all
    2^N configurations, indexed by spin bitmask) is retained only when exact
    replica sampling was requested.
    """

    n_sites: int
    params: ModelParams
    independent_field: bool
    order: int
    m: np.ndarray
    pair: np.ndarray
    triple: np.ndarray | None
    quad: np.ndarray | None
    log_z: float
    config_weights: np.ndarray | None
    seed: int = -1
    sample_index: int = -1

    def __post_init__(self):
        for name in ("m", "pair", "triple", "quad", "config_weights"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)
        if np.max(np.abs(self.m)) > 1.0 + 1e-9:
            raise NumericError("|<sigma_i>| exceeded 1 beyond tolerance")
        if np.max(np.abs(self.pair)) > 1.0 + 1e-9:
            raise NumericError("|<sigma_i sigma_j>| exceeded 1 beyond tolerance")
        if self.config_weights is not None:
            tot = float(self.config_weights.sum())
            if abs(tot - 1.0) > 1e-12:
                raise NumericError(f"config weights sum to {tot}, not 1 within 1e-12")

    def central_pair(self) -> np.ndarray:
        """U_ij = <σ_i σ_j> − m_i m_j (diagonal: 1 − m_i²)."""
        return self.pair - np.outer(self.m, self.m)


def _mask_bits(n: int) -> np.ndarray:
    return (1 << np.arange(n)).astype(np.int64)


def gibbs_correlations(
    d: DisorderSample | None,
    params: ModelParams,
    order: int = 2,
    keep_weights: bool = False,
    independent_field: bool = False,
    n_sites: int | None = None,
) -> GibbsSummary:
    """Exact Gibbs summary for one disorder sample.

    order ∈ {2, 3, 4} selects the highest correlation tensor kept (site
    caps 24 / 20 / 14).  In independent-field mode the exponent is h·Σσ_i
    with no couplings and ``d`` may be None (then ``n_sites`` is required).
    """
    if order not in (2, 3, 4):
        raise ValueError(f"order must be 2, 3 or 4, got {order}")
    if independent_field:
        n = d.n_sites if d is not None else n_sites
        if n is None:
            raise ValueError("independent-field mode needs a DisorderSample or n_sites")
    else:
        if d is None:
            raise ValueError("a DisorderSample is required unless independent_field")
        n = d.n_sites
    cap = {2: N_CAP_ORDER2, 3: N_CAP_ORDER3, 4: N_CAP_ORDER4}[order]
    if not 1 <= n <= cap:
        raise ValueError(f"order {order} supports 1 <= N <= {cap}, got {n}")

    size = 1 << n
    expo = np.empty(size)
    if independent_field:
        jmat = np.zeros((n, n))
        field = params.h
    else:
        jmat = (params.beta / math.sqrt(n)) * d.coupling_matrix()
        field = params.beta * params.h
    _gray_exponents(jmat, field, expo)
    if not np.isfinite(expo).all():
        raise NumericError("non-finite exponent encountered during enumeration")

    shift = float(expo.max())
    np.subtract(expo, shift, out=expo)
    np.exp(expo, out=expo)  # expo is now the shifted weight table
    z = float(expo.sum())
    log_z = shift + math.log(z)
    if not (math.isfinite(z) and z > 0.0 and math.isfinite(log_z)):
        raise NumericError("partition function overflow/underflow guard tripped")

    weights = expo / z if keep_weights else None
    table = expo if not keep_weights else expo.copy()
    _wht_inplace(table)
    np.divide(table, table[0], out=table)  # table[0] = Σw = z

    bits = _mask_bits(n)
    m = table[bits]
    pair = table[bits[:, None] ^ bits[None, :]]
    triple = None
    quad = None
    if order >= 3:
        triple = table[bits[:, None, None] ^ bits[None, :, None] ^ bits[None, None, :]]
    if order >= 4:
        quad = table[
            bits[:, None, None, None]
            ^ bits[None, :, None, None]
            ^ bits[None, None, :, None]
            ^ bits[None, None, None, :]
        ]
    return GibbsSummary(
        n_sites=n,
        params=params,
        independent_field=independent_field,
        order=order,
        m=m,
        pair=pair,
        triple=triple,
        quad=quad,
        log_z=log_z,
        config_weights=weights,
        seed=d.seed if d is not None else -1,
        sample_index=d.sample_index if d is not None else -1,
    )


# ---------------------------------------------------------------------------
# truncated-overlap moments for one disorder sample
# ---------------------------------------------------------------------------


def _empty_set_value(s: GibbsSummary, p: int, q: QTable) -> float:
    """T_{∅,p} = (1/N) Σ m_i^p − q_p (deterministic given the disorder)."""
    return float(np.mean(s.m**p)) - q.at(p)


def truncated_pair_moment(
    s: GibbsSummary, k1: OverlapKey, k2: OverlapKey, qtable: QTable | None = None
) -> float:
    """Exact ⟨T_{S,p} T_{S̃,p̃}⟩ for this disorder sample.

    Replicas are i.i.d. under the product Gibbs state, so the expectation
    factorizes per replica into central correlations: with
    U_ij = pair_ij − m_i m_j,

        S = S̃ ≠ ∅ :  (1/N²) Σ_{ij} U_ij^{|S|} m_i^p m_j^{p̃}
        S ≠ S̃      :  exactly 0 (a replica in SΔS̃ appears once, zero mean)
        S = S̃ = ∅ :  T_{∅,p} · T_{∅,p̃}   (needs the q table)
    """
    if k1.size > 3 or k2.size > 3:
        raise ValueError("pair moments support |S| <= 3")
    if k1.replicas != k2.replicas:
        return 0.0
    if k1.size == 0:
        if qtable is None:
            raise ValueError("empty-set keys need a QTable for q_p")
        return _empty_set_value(s, k1.power, qtable) * _empty_set_value(
            s, k2.power, qtable
        )
    u = s.central_pair()
    mp = s.m**k1.power
    mpt = s.m**k2.power
    n = s.n_sites
    return float(mp @ (u**k1.size) @ mpt) / (n * n)


def _central_triple(s: GibbsSummary) -> np.ndarray:
    """⟨(σ_i−m_i)(σ_j−m_j)(σ_k−m_k)⟩, dense with coincidences reduced."""
    if s.triple is None:
        raise ValueError("order-3 tensors were not computed for this summary")
    m = s.m
    p = s.pair
    t = s.triple
    mi = m[:, None, None]
    mj = m[None, :, None]
    mk = m[None, None, :]
    return (
        t
        - mi * p[None, :, :]
        - mj * p[:, None, :]
        - mk * p[:, :, None]
        + 2.0 * mi * mj * mk
    )


def _central_quartic_kernel(s: GibbsSummary) -> np.ndarray:
    """⟨σ̇_iσ̇_jσ̇_kσ̇_l⟩ reshaped to the (N², N²) pair kernel."""
    if s.quad is None:
        raise ValueError("order-4 tensors were not computed for this summary")
    n = s.n_sites
    m = s.m
    p2 = s.pair
    p3 = s.triple
    p4 = s.quad
    mi = m[:, None, None, None]
    mj = m[None, :, None, None]
    mk = m[None, None, :, None]
    ml = m[None, None, None, :]
    cen = p4.copy()
    cen -= mi * p3[None, :, :, :]
    cen -= mj * p3[:, None, :, :]
    cen -= mk * p3[:, :, None, :]
    cen -= ml * p3[:, :, :, None]
    cen += (mi * mj) * p2[None, None, :, :]
    cen += (mi * mk) * p2[None, :, None, :]
    cen += (mi * ml) * p2[None, :, :, None]
    cen += (mj * mk) * p2[:, None, None, :]
    cen += (mj * ml) * p2[:, None, :, None]
    cen += (mk * ml) * p2[:, :, None, None]
    cen -= 3.0 * (mi * mj * mk * ml)
    return cen.reshape(n * n, n * n)


def _quartic_self_moment(s: GibbsSummary, key: OverlapKey) -> float:
    """⟨T_{S,p}⁴⟩: the special-cased degree-4 kernel.

    Each replica in S appears in all four factors, contributing one central
    4-point factor per site quadruple, so with the pair-space kernel
    M[(ij),(kl)] = ⟨σ̇_iσ̇_jσ̇_kσ̇_l⟩ and v_(ij) = m_i^p m_j^p:

        ⟨T⁴⟩ = vᵀ (M∘|S|) v / N⁴    (∘ = entrywise power).
    """
    if key.size == 0:
        raise ValueError("degree-4 special case applies to nonempty S")
    kernel = _central_quartic_kernel(s)
    mp = s.m**key.power
    v = np.outer(mp, mp).reshape(-1)
    n = s.n_sites
    return float(v @ (kernel**key.size) @ v) / float(n) ** 4


def truncated_monomial_moment(
    s: GibbsSummary,
    m: Monomial,
    qtable: QTable | None = None,
    allow_degree4: bool = False,
) -> float:
    """Exact ⟨Π T_{S,p}^{k}⟩ for this disorder sample.

    Empty-S factors are per-disorder scalars and multiply through; the
    replica-carrying part factorizes per replica into central correlations
    contracted over one site index per factor.  Replica-degree cap 3; the
    single-key fourth power is special-cased behind ``allow_degree4``
    (requires an order-4 summary, N <= 14).
    """
    scalar = 1.0
    replica_factors: list[OverlapKey] = []
    for key, exp in m.factors:
        if key.size == 0:
            if qtable is None:
                raise ValueError("empty-set factors need a QTable for q_p")
            scalar *= _empty_set_value(s, key.power, qtable) ** exp
        else:
            replica_factors.extend([key] * exp)

    k = len(replica_factors)
    if k == 0:
        return scalar
    if k == 1:
        return 0.0  # lone replicas have zero-mean truncated spins
    if k == 2:
        return scalar * truncated_pair_moment(
            s, replica_factors[0], replica_factors[1], qtable
        )
    if k == 4 and allow_degree4 and len({key for key in replica_factors}) == 1:
        return scalar * _quartic_self_moment(s, replica_factors[0])
    if k > 3:
        raise UnsupportedDegreeError(
            f"replica degree {k} unsupported (cap 3; single-key ^4 behind allow_degree4)"
        )

    # degree 3: one site slot per factor, one central tensor per replica
    replica_slots: dict[int, list[int]] = {}
    for slot, key in enumerate(replica_factors):
        for r in key.replicas:
            replica_slots.setdefault(r, []).append(slot)
    if any(len(slots) == 1 for slots in replica_slots.values()):
        return 0.0

    u = s.central_pair()
    slot_names = "abc"
    operands = []
    subscripts = []
    for slots in replica_slots.values():
        if len(slots) == 2:
            operands.append(u)
        elif len(slots) == 3:
            operands.append(_central_triple(s))
        else:  # a replica in all three factors of a cube, etc.
            raise UnsupportedDegreeError("replica multiplicity beyond 3 at degree 3")
        subscripts.append("".join(slot_names[i] for i in slots))
    for slot, key in enumerate(replica_factors):
        if key.power:
            operands.append(s.m**key.power)
            subscripts.append(slot_names[slot])
    value = np.einsum(",".join(subscripts) + "->", *operands, optimize=True)
    return scalar * float(value) / float(s.n_sites) ** k


# ---------------------------------------------------------------------------
# exact replica sampling and tail diagnostics
# ---------------------------------------------------------------------------


def sample_replicas(
    s: GibbsSummary, count: int, rng_stream: np.random.Generator
) -> np.ndarray:
    """i.i.d. exact Gibbs samples via inverse CDF over the 2^N weight table.

    Returns (count, N) spin vectors in {−1, +1}; consumes ``count`` uniforms
    from the stream, so identical stream states reproduce identical draws.
    """
    if s.config_weights is None:
        raise InvalidStateError(
            "config_weights were not retained; rebuild the summary with keep_weights=True"
        )
    if count < 0:
        raise ValueError("count must be >= 0")
    cum = np.cumsum(s.config_weights)
    u = rng_stream.random(count)
    idx = np.searchsorted(cum, u, side="right")
    np.clip(idx, 0, s.config_weights.shape[0] - 1, out=idx)
    bits = (idx[:, None] >> np.arange(s.n_sites)[None, :]) & 1
    return (1 - 2 * bits).astype(np.int8)


def overlap_tail_statistic(
    s: GibbsSummary,
    q2: float,
    t_values,
    pair_count: int,
    rng_stream: np.random.Generator,
) -> list[float]:
    """Empirical mean of exp(t·N·(R₁₂ − q2)²) over exact replica pairs,
    one entry per t (t = 0 gives exactly 1)."""
    t_values = [float(t) for t in t_values]
    if any(t < 0 for t in t_values):
        raise ValueError("t values must be >= 0")
    if pair_count <= 0:
        raise ValueError("pair_count must be positive")
    reps = sample_replicas(s, 2 * pair_count, rng_stream).astype(np.float64)
    r12 = np.mean(reps[0::2] * reps[1::2], axis=1)
    dev = s.n_sites * (r12 - q2) ** 2
    return [float(np.mean(np.exp(t * dev))) for t in t_values]


# ---------------------------------------------------------------------------
# binary cache format
# ---------------------------------------------------------------------------

_MAGIC = b"SKGS"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIddqqBB")  # magic, version, n, order, beta, h,
# seed, sample_index, independent_field, has_weights


def dump_summary(s: GibbsSummary, path) -> None:
    """Versioned little-endian dump (header + float64 tensors)."""
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _MAGIC,
                _VERSION,
                s.n_sites,
                s.order,
                s.params.beta,
                s.params.h,
                s.seed,
                s.sample_index,
                1 if s.independent_field else 0,
                1 if s.config_weights is not None else 0,
            )
        )
        fh.write(struct.pack("<d", s.log_z))
        fh.write(np.ascontiguousarray(s.m, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(s.pair, dtype="<f8").tobytes())
        if s.order >= 3:
            fh.write(np.ascontiguousarray(s.triple, dtype="<f8").tobytes())
        if s.order >= 4:
            fh.write(np.ascontiguousarray(s.quad, dtype="<f8").tobytes())
        if s.config_weights is not None:
            fh.write(np.ascontiguousarray(s.config_weights, dtype="<f8").tobytes())


def load_summary(path, allow_high_beta: bool = True) -> GibbsSummary:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        magic, version, n, order, beta, h, seed, sample_index, anchor, has_w = (
            _HEADER.unpack(header)
        )
        if magic != _MAGIC:
            raise ValueError("not a GibbsSummary dump (bad magic)")
        if version != _VERSION:
            raise ValueError(f"unsupported dump version {version}")
        (log_z,) = struct.unpack("<d", fh.read(8))

        def read_arr(shape):
            count = int(np.prod(shape))
            buf = fh.read(8 * count)
            return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

        m = read_arr((n,))
        pair = read_arr((n, n))
        triple = read_arr((n, n, n)) if order >= 3 else None
        quad = read_arr((n, n, n, n)) if order >= 4 else None
        weights = read_arr((1 << n,)) if has_w else None
    params = ModelParams(beta, h, allow_high_beta=allow_high_beta)
    return GibbsSummary(
        n_sites=n,
        params=params,
        independent_field=bool(anchor),
        order=order,
        m=m,
        pair=pair,
        triple=triple,
        quad=quad,
        log_z=log_z,
        config_weights=weights,
        seed=seed,
        sample_index=sample_index,
    )

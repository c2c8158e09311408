"""Disorder-averaged experiments against the covariance theory.

For each target (a pair ν(T_{S,p}T_{S̃,p̃}), a monomial ν(Π T^{k}), or a
centered multi-overlap pair ν((R_S − q_{|S|})(R_{S̃} − q_{|S̃|}))) and each N
on a grid, the exact per-disorder Gibbs moment is averaged over M
independent disorder samples, scaled by N^{k/2}, and extrapolated in
N^{−1/2} by stderr-weighted least squares:

    scaled_mean(N) = c0 + c1·N^{−1/2}

The remainder of the limit theorem sits one factor N^{−1/2} below the main
term, so a single correction term is the minimal faithful model.  The
intercept c0 is compared with the theory value via z = (c0 − theory)/σ(c0).

Reductions run in fixed sample-index order, so reports are bit-identical
for any worker count; nothing time- or host-dependent enters a report.
"""

from __future__ import annotations

import json
import math
import multiprocessing
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import skexact
from .covariance import CovarianceModel, Monomial, OverlapKey
from .errors import ConfigError, FitError
from .moments import DEFAULT_P_MAX, DEFAULT_QUAD_ORDER, ModelParams, QTable
from .skexact import (
    TAIL_STREAM,
    counter_stream,
    gibbs_correlations,
    overlap_tail_statistic,
    sample_disorder,
    truncated_monomial_moment,
    truncated_pair_moment,
)

Z_PASS = 3.0
Z_DISCRIMINATE = 5.0
TAIL_BLOWUP_RATIO = 10.0
MIN_SAMPLES = 100


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairTarget:
    """ν(T_{S,p} T_{S̃,p̃}); degree 2."""

    k1: OverlapKey
    k2: OverlapKey
    grid: tuple[int, ...] | None = None


@dataclass(frozen=True)
class MonomialTarget:
    """ν(Π T_{S,p}^{k}); degree = total exponent sum."""

    monomial: Monomial
    grid: tuple[int, ...] | None = None


@dataclass(frozen=True)
class MultiOverlapTarget:
    """ν((R_S − q_{|S|})(R_{S̃} − q_{|S̃|})); degree 2."""

    s1: tuple[int, ...]
    s2: tuple[int, ...]
    grid: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("s1", "s2"):
            s = tuple(sorted(set(int(x) for x in getattr(self, name))))
            if not s:
                raise ValueError("multi-overlap subsets must be nonempty")
            object.__setattr__(self, name, s)


Target = PairTarget | MonomialTarget | MultiOverlapTarget


def target_label(t: Target) -> str:
    if isinstance(t, PairTarget):
        return f"pair {t.k1.label()} x {t.k2.label()}"
    if isinstance(t, MonomialTarget):
        return f"mono {t.monomial.label()}"
    inner1 = ",".join(map(str, t.s1))
    inner2 = ",".join(map(str, t.s2))
    return f"rcov {{{inner1}}} x {{{inner2}}}"


def target_kind(t: Target) -> str:
    if isinstance(t, PairTarget):
        return "pair"
    if isinstance(t, MonomialTarget):
        return "mono"
    return "rcov"


def target_degree(t: Target) -> int:
    if isinstance(t, MonomialTarget):
        return t.monomial.degree
    return 2


def target_order(t: Target) -> int:
    """Highest central-correlation order the exact evaluation needs."""
    if not isinstance(t, MonomialTarget):
        return 2
    mult: dict[int, int] = {}
    for key in t.monomial.expanded():
        for r in key.replicas:
            mult[r] = mult.get(r, 0) + 1
    return max(mult.values(), default=2) if mult else 2


def target_theory(t: Target, model: CovarianceModel) -> float:
    if isinstance(t, PairTarget):
        return model.limit_cov(t.k1, t.k2)
    if isinstance(t, MonomialTarget):
        return model.joint_moment_prediction(t.monomial)
    return model.multioverlap_cov(t.s1, t.s2)


def target_value(t: Target, summary: skexact.GibbsSummary, qtable: QTable) -> float:
    """Exact per-disorder Gibbs expectation of the target."""
    if isinstance(t, PairTarget):
        return truncated_pair_moment(summary, t.k1, t.k2, qtable)
    if isinstance(t, MonomialTarget):
        return truncated_monomial_moment(
            summary, t.monomial, qtable, allow_degree4=True
        )
    total = 0.0
    common = sorted(set(t.s1) & set(t.s2))
    import itertools

    for r in range(len(common) + 1):
        for sub in itertools.combinations(common, r):
            total += truncated_pair_moment(
                summary,
                OverlapKey(sub, len(t.s1) - r),
                OverlapKey(sub, len(t.s2) - r),
                qtable,
            )
    return total


_ORDER_CAP = {2: skexact.N_CAP_ORDER2, 3: skexact.N_CAP_ORDER3, 4: skexact.N_CAP_ORDER4}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    params: ModelParams
    n_grid: tuple[int, ...]
    samples_per_n: int
    seed: int
    targets: tuple[Target, ...]
    kappa_variant: str = "proof"
    phi_variant: str = "proof"
    anchor_mode: bool = False
    workers: int = 0
    p_max: int = DEFAULT_P_MAX
    quad_order: int = DEFAULT_QUAD_ORDER
    keep_weights: bool = False
    tail_t: tuple[float, ...] = (0.0, 0.05, 0.1)
    tail_pairs: int = 256
    cache_dir: str | None = None
    out_csv: str | None = None
    out_json: str | None = None

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        if len(grid) == 0:
            raise ConfigError("n_grid must be nonempty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"n_grid must be strictly increasing, got {grid}")
        object.__setattr__(self, "n_grid", grid)
        if self.samples_per_n < MIN_SAMPLES:
            raise ConfigError(
                f"samples_per_n must be >= {MIN_SAMPLES}, got {self.samples_per_n}"
            )
        if self.workers < 0:
            raise ConfigError("workers must be >= 0 (0 = auto)")
        for t in self.targets:
            cap = _ORDER_CAP[target_order(t)]
            for n in t.grid or grid:
                if not 2 <= n <= cap:
                    raise ConfigError(
                        f"target '{target_label(t)}' needs order "
                        f"{target_order(t)} (N cap {cap}); grid point {n} invalid"
                    )
        object.__setattr__(
            self, "targets", tuple(self.targets)
        )
        object.__setattr__(self, "tail_t", tuple(float(t) for t in self.tail_t))

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def echo(self) -> dict:
        """Configuration fingerprint for reports: everything that affects
        values, nothing that only affects execution (workers, output paths)."""
        return {
            "beta": self.params.beta,
            "h": self.params.h,
            "n_grid": list(self.n_grid),
            "samples_per_n": self.samples_per_n,
            "seed": self.seed,
            "targets": [target_label(t) for t in self.targets],
            "target_grids": [list(t.grid) if t.grid else None for t in self.targets],
            "kappa_variant": self.kappa_variant,
            "phi_variant": self.phi_variant,
            "anchor_mode": self.anchor_mode,
            "p_max": self.p_max,
            "quad_order": self.quad_order,
            "tail_t": list(self.tail_t),
            "tail_pairs": self.tail_pairs,
        }


# ---------------------------------------------------------------------------
# report structures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatePoint:
    n_sites: int
    m_used: int
    mean: float
    stderr: float
    scaled_mean: float
    scaled_stderr: float


@dataclass(frozen=True)
class TargetResult:
    label: str
    kind: str
    degree: int
    theory: float
    points: tuple[EstimatePoint, ...]
    intercept: float
    intercept_stderr: float
    chi2: float
    dof: int
    z: float


@dataclass(frozen=True)
class ExperimentReport:
    config: dict
    targets: tuple[TargetResult, ...]
    asymmetry: tuple[dict, ...]
    variant_verdicts: dict | None = None
    tails: dict | None = None

    def to_doc(self) -> dict:
        doc = {
            "config": self.config,
            "targets": [
                {
                    "label": t.label,
                    "kind": t.kind,
                    "degree": t.degree,
                    "theory": t.theory,
                    "points": [
                        {
                            "n": p.n_sites,
                            "m": p.m_used,
                            "mean": p.mean,
                            "stderr": p.stderr,
                            "scaled_mean": p.scaled_mean,
                            "scaled_stderr": p.scaled_stderr,
                        }
                        for p in t.points
                    ],
                    "intercept": t.intercept,
                    "intercept_stderr": t.intercept_stderr,
                    "chi2": t.chi2,
                    "dof": t.dof,
                    "z": t.z,
                }
                for t in self.targets
            ],
            "asymmetry": list(self.asymmetry),
        }
        if self.variant_verdicts is not None:
            doc["variant_verdicts"] = self.variant_verdicts
        if self.tails is not None:
            doc["tails"] = self.tails
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["kind,label,n,m,mean,stderr,scaled_mean,scaled_stderr"]
        for t in self.targets:
            for p in t.points:
                lines.append(
                    f'point,"{t.label}",{p.n_sites},{p.m_used},'
                    f"{format(p.mean, '.17g')},{format(p.stderr, '.17g')},"
                    f"{format(p.scaled_mean, '.17g')},{format(p.scaled_stderr, '.17g')}"
                )
        lines.append("kind,label,degree,theory,intercept,intercept_stderr,chi2,dof,z")
        for t in self.targets:
            lines.append(
                f'summary,"{t.label}",{t.degree},{format(t.theory, ".17g")},'
                f"{format(t.intercept, '.17g')},{format(t.intercept_stderr, '.17g')},"
                f"{format(t.chi2, '.17g')},{t.dof},{format(t.z, '.17g')}"
            )
        lines.append("kind,s,p,pt,raw_asymmetry,relative,flagged")
        for r in self.asymmetry:
            lines.append(
                f"asym,{r['s']},{r['p']},{r['pt']},"
                f"{format(r['raw_asymmetry'], '.17g')},{format(r['relative'], '.17g')},"
                f"{int(r['flagged'])}"
            )
        if self.tails is not None:
            lines.append("kind,n,t,mean,stderr")
            for row in self.tails["rows"]:
                lines.append(
                    f"tail,{row['n']},{format(row['t'], '.17g')},"
                    f"{format(row['mean'], '.17g')},{format(row['stderr'], '.17g')}"
                )
        return "\n".join(lines) + "\n"

    def all_pass(self) -> bool:
        """True iff every target has |z| < 3 and no tail blow-up was flagged."""
        if any(not (abs(t.z) < Z_PASS) for t in self.targets):
            return False
        if self.tails is not None and self.tails.get("blowup_flag"):
            return False
        return True


def write_report(report: ExperimentReport, out_csv=None, out_json=None) -> None:
    if out_csv:
        with open(out_csv, "w") as fh:
            fh.write(report.to_csv())
    if out_json:
        with open(out_json, "w") as fh:
            fh.write(report.to_json())


# ---------------------------------------------------------------------------
# weighted least squares in N^{-1/2}
# ---------------------------------------------------------------------------


def fit_intercept(points: list[EstimatePoint]) -> tuple[float, float, float]:
    """Stderr-weighted least squares of scaled_mean on {1, N^{−1/2}}.

    Returns (c0, c0_stderr, chi2).  Degenerate scatter (all stderr 0) is
    accepted when every scaled mean coincides: the fit is then exact with
    zero uncertainty.  Fewer than 2 points or a singular design raise
    FitError.
    """
    if len(points) < 2:
        raise FitError("need at least 2 points to extrapolate")
    x = np.array([1.0 / math.sqrt(p.n_sites) for p in points])
    y = np.array([p.scaled_mean for p in points])
    s = np.array([p.scaled_stderr for p in points])
    if np.unique(x).size < 2:
        raise FitError("singular design: duplicate grid points")
    if np.any(s == 0.0):
        if not np.all(s == 0.0):
            raise FitError("mixed zero/positive stderr; cannot weight the fit")
        # deterministic target (exactly-zero per disorder, or anchor mode):
        # unweighted OLS, zero reported uncertainty
        design = np.column_stack([np.ones_like(x), x])
        sol, *_ = np.linalg.lstsq(design, y, rcond=None)
        return float(sol[0]), 0.0, 0.0
    w = 1.0 / (s * s)
    a11 = float(w.sum())
    a12 = float((w * x).sum())
    a22 = float((w * x * x).sum())
    det = a11 * a22 - a12 * a12
    if det <= 0.0 or not math.isfinite(det):
        raise FitError("singular weighted design")
    b1 = float((w * y).sum())
    b2 = float((w * x * y).sum())
    c0 = (a22 * b1 - a12 * b2) / det
    c1 = (a11 * b2 - a12 * b1) / det
    c0_var = a22 / det
    resid = y - c0 - c1 * x
    chi2 = float((w * resid * resid).sum())
    return float(c0), math.sqrt(c0_var), chi2


def z_score(intercept: float, intercept_stderr: float, theory: float) -> float:
    if intercept_stderr == 0.0:
        if abs(intercept - theory) <= 1e-12 * max(1.0, abs(theory)):
            return 0.0
        return math.copysign(math.inf, intercept - theory)
    return (intercept - theory) / intercept_stderr


# ---------------------------------------------------------------------------
# worker machinery
# ---------------------------------------------------------------------------

_CTX: dict | None = None


def _build_ctx(cfg: ExperimentConfig, mode: str) -> dict:
    return {
        "mode": mode,
        "beta": cfg.params.beta,
        "h": cfg.params.h,
        "allow_high_beta": cfg.params.allow_high_beta,
        "anchor": cfg.anchor_mode,
        "seed": cfg.seed,
        "p_max": cfg.p_max,
        "quad_order": cfg.quad_order,
        "targets": cfg.targets,
        "cache_dir": cfg.cache_dir,
        "tail_t": cfg.tail_t,
        "tail_pairs": cfg.tail_pairs,
    }


def _init_worker(ctx: dict) -> None:
    global _CTX
    from .moments import hermite_rule, q_table

    ctx = dict(ctx)
    params = ModelParams(ctx["beta"], ctx["h"], allow_high_beta=ctx["allow_high_beta"])
    theory_params = ModelParams(0.0, ctx["h"]) if ctx["anchor"] else params
    ctx["params"] = params
    ctx["qtable"] = q_table(theory_params, hermite_rule(ctx["quad_order"]), ctx["p_max"])
    ctx["anchor_cache"] = {}
    _CTX = ctx


def _summary_for(ctx: dict, n: int, idx: int, order: int, keep_weights: bool):
    params = ctx["params"]
    if ctx["anchor"]:
        key = (n, order, keep_weights)
        cached = ctx["anchor_cache"].get(key)
        if cached is None:
            cached = gibbs_correlations(
                None, params, order=order, keep_weights=keep_weights,
                independent_field=True, n_sites=n,
            )
            ctx["anchor_cache"][key] = cached
        return cached
    cache_dir = ctx.get("cache_dir")
    if cache_dir:
        name = (
            f"gs_s{ctx['seed']}_i{idx}_n{n}_b{params.beta!r}_h{params.h!r}"
            f"_o{order}_w{int(keep_weights)}.bin"
        )
        path = os.path.join(cache_dir, name)
        if os.path.exists(path):
            return skexact.load_summary(path)
        d = sample_disorder(n, ctx["seed"], idx)
        summary = gibbs_correlations(d, params, order=order, keep_weights=keep_weights)
        skexact.dump_summary(summary, path)
        return summary
    d = sample_disorder(n, ctx["seed"], idx)
    return gibbs_correlations(d, params, order=order, keep_weights=keep_weights)


def _eval_chunk(task):
    """One worker task: samples [start, stop) at a single N."""
    n, start, stop, active, order = task
    ctx = _CTX
    qtable = ctx["qtable"]
    if ctx["mode"] == "tails":
        t_values = ctx["tail_t"]
        out = np.empty((stop - start, len(t_values)))
        for row, idx in enumerate(range(start, stop)):
            summary = _summary_for(ctx, n, idx, 2, keep_weights=True)
            stream = counter_stream(ctx["seed"], idx, TAIL_STREAM)
            out[row] = overlap_tail_statistic(
                summary, qtable.q2, t_values, ctx["tail_pairs"], stream
            )
        return n, start, out
    targets = [ctx["targets"][i] for i in active]
    out = np.empty((stop - start, len(targets)))
    for row, idx in enumerate(range(start, stop)):
        summary = _summary_for(ctx, n, idx, order, keep_weights=False)
        for col, t in enumerate(targets):
            out[row, col] = target_value(t, summary, qtable)
    return n, start, out


def _run_tasks(cfg: ExperimentConfig, ctx: dict, tasks: list):
    """Run tasks serially or on a fork pool; yields raw task results."""
    workers = cfg.effective_workers()
    skexact.warm_up_kernels()  # compile before forking so children inherit
    if workers <= 1 or len(tasks) <= 1:
        _init_worker(ctx)
        for task in tasks:
            yield _eval_chunk(task)
        return
    mp = multiprocessing.get_context("fork")
    with mp.Pool(workers, initializer=_init_worker, initargs=(ctx,)) as pool:
        for result in pool.imap_unordered(_eval_chunk, tasks, chunksize=1):
            yield result


def _chunks(m: int, workers: int) -> list[tuple[int, int]]:
    size = max(8, min(256, m // max(workers * 4, 1) or m))
    return [(start, min(start + size, m)) for start in range(0, m, size)]


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------


def theory_model(cfg: ExperimentConfig) -> CovarianceModel:
    params = ModelParams(0.0, cfg.params.h) if cfg.anchor_mode else cfg.params
    return CovarianceModel(
        params,
        p_max=cfg.p_max,
        quad_order=cfg.quad_order,
        kappa_variant=cfg.kappa_variant,
        phi_variant=cfg.phi_variant,
    )


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Average each target's exact per-disorder moment over M samples per N,
    scale by N^{k/2}, extrapolate, and attach theory values and z-scores.

    Deterministic given cfg: the disorder sample set is a pure function of
    (seed, sample_index, N) and the reduction order is fixed."""
    if not cfg.targets:
        raise ConfigError("no targets configured")
    if len(cfg.n_grid) < 2:
        raise ConfigError("n_grid needs at least 2 points for extrapolation")
    model = theory_model(cfg)
    m_samples = cfg.samples_per_n

    # per-N active targets and tensor order
    all_ns = sorted(
        {n for t in cfg.targets for n in (t.grid or cfg.n_grid)}
    )
    active_at: dict[int, list[int]] = {n: [] for n in all_ns}
    for i, t in enumerate(cfg.targets):
        for n in t.grid or cfg.n_grid:
            active_at[n].append(i)
    order_at = {
        n: max(target_order(cfg.targets[i]) for i in ids)
        for n, ids in active_at.items()
    }

    tasks = []
    for n in all_ns:
        for start, stop in _chunks(m_samples, cfg.effective_workers()):
            tasks.append((n, start, stop, tuple(active_at[n]), order_at[n]))
    # large-N tasks first: better tail latency on the pool
    tasks.sort(key=lambda t: (-t[0], t[1]))

    values: dict[tuple[int, int], np.ndarray] = {
        (i, n): np.empty(m_samples)
        for i, t in enumerate(cfg.targets)
        for n in (t.grid or cfg.n_grid)
    }
    ctx = _build_ctx(cfg, "experiment")
    for n, start, out in _run_tasks(cfg, ctx, tasks):
        for col, i in enumerate(active_at[n]):
            values[(i, n)][start : start + out.shape[0]] = out[:, col]

    results = []
    for i, t in enumerate(cfg.targets):
        grid = t.grid or cfg.n_grid
        k = target_degree(t)
        points = []
        for n in grid:
            arr = values[(i, n)]
            mean = float(np.mean(arr))
            stderr = (
                float(np.std(arr, ddof=1) / math.sqrt(m_samples))
                if m_samples > 1
                else 0.0
            )
            scale = float(n) ** (k / 2.0)
            points.append(
                EstimatePoint(
                    n_sites=n,
                    m_used=m_samples,
                    mean=mean,
                    stderr=stderr,
                    scaled_mean=scale * mean,
                    scaled_stderr=scale * stderr,
                )
            )
        c0, c0_err, chi2 = fit_intercept(points)
        theory = target_theory(t, model)
        results.append(
            TargetResult(
                label=target_label(t),
                kind=target_kind(t),
                degree=k,
                theory=theory,
                points=tuple(points),
                intercept=c0,
                intercept_stderr=c0_err,
                chi2=chi2,
                dof=len(grid) - 2,
                z=z_score(c0, c0_err, theory),
            )
        )

    asym = tuple(
        {
            "s": r.s,
            "p": r.p,
            "pt": r.pt,
            "raw_asymmetry": r.raw_asymmetry,
            "relative": r.relative,
            "flagged": r.flagged,
        }
        for r in model.asymmetry_log
    )
    report = ExperimentReport(config=cfg.echo(), targets=tuple(results), asymmetry=asym)
    write_report(report, cfg.out_csv, cfg.out_json)
    return report


# ---------------------------------------------------------------------------
# coefficient-variant oracle
# ---------------------------------------------------------------------------

_ORACLE_REQUIRED = (
    PairTarget(OverlapKey((), 2), OverlapKey((), 3)),
    PairTarget(OverlapKey((1,), 2), OverlapKey((1,), 1)),
)


def variant_oracle(cfg: ExperimentConfig, report: ExperimentReport | None = None) -> dict:
    """Score both κ and both φ transcriptions against one experiment run.

    The estimates do not depend on the variants (only theory values do), so
    a single run scores every variant with identical Monte Carlo noise.
    Verdict per conflict: the variant whose |z| < 3 on every sensitive
    target while the alternative exceeds |z| > 5 somewhere; otherwise
    "inconclusive" (which is always the outcome at β = 0, where the
    variants coincide).
    """
    labels = [target_label(t) for t in cfg.targets]
    for req in _ORACLE_REQUIRED:
        if target_label(req) not in labels:
            raise ConfigError(
                f"oracle needs the discriminating target '{target_label(req)}'"
            )
    if report is None:
        report = run_experiment(cfg)
    verdicts: dict = {}
    for conflict in ("kappa", "phi"):
        table: dict = {}
        sensitive: dict[str, bool] = {}
        for variant in ("proof", "statement"):
            kwargs = {
                "kappa_variant": variant if conflict == "kappa" else cfg.kappa_variant,
                "phi_variant": variant if conflict == "phi" else cfg.phi_variant,
            }
            model_v = CovarianceModel(
                ModelParams(0.0, cfg.params.h) if cfg.anchor_mode else cfg.params,
                p_max=cfg.p_max,
                quad_order=cfg.quad_order,
                **kwargs,
            )
            rows = []
            for t, res in zip(cfg.targets, report.targets):
                theory = target_theory(t, model_v)
                rows.append(
                    {
                        "label": res.label,
                        "theory": theory,
                        "z": z_score(res.intercept, res.intercept_stderr, theory),
                    }
                )
            table[variant] = rows
        for r_p, r_s in zip(table["proof"], table["statement"]):
            scale = max(abs(r_p["theory"]), abs(r_s["theory"]), 1e-300)
            sensitive[r_p["label"]] = (
                abs(r_p["theory"] - r_s["theory"]) / scale > 1e-12
            )
        sens_labels = [lab for lab, flag in sensitive.items() if flag]
        if not sens_labels:
            verdict = "inconclusive"
        else:
            zmap = {
                v: {r["label"]: abs(r["z"]) for r in rows} for v, rows in table.items()
            }
            passing = [
                v
                for v in ("proof", "statement")
                if all(zmap[v][lab] < Z_PASS for lab in sens_labels)
            ]
            if len(passing) == 1:
                other = "statement" if passing[0] == "proof" else "proof"
                if any(zmap[other][lab] > Z_DISCRIMINATE for lab in sens_labels):
                    verdict = passing[0]
                else:
                    verdict = "inconclusive"
            else:
                verdict = "inconclusive"
        verdicts[conflict] = {
            "verdict": verdict,
            "sensitive_targets": sens_labels,
            "z_tables": table,
        }
    return verdicts


# ---------------------------------------------------------------------------
# scaling and tail diagnostics
# ---------------------------------------------------------------------------


def scaling_check(
    cfg: ExperimentConfig, target: Target, result: TargetResult | None = None
) -> dict:
    """Log-log decay diagnostic for one target.

    Nonzero-limit targets: slope of log|mean| vs log N (expected ≈ −k/2).
    Zero-limit targets: the scaled intercept must vanish within 3σ.
    Means statistically indistinguishable from 0 yield "indeterminate"."""
    if result is None:
        sub = replace(cfg, targets=(target,), out_csv=None, out_json=None)
        result = run_experiment(sub).targets[0]
    k = target_degree(target)
    if result.theory == 0.0:
        ok = abs(result.intercept) <= Z_PASS * result.intercept_stderr
        return {
            "kind": "zero-limit",
            "intercept": result.intercept,
            "intercept_stderr": result.intercept_stderr,
            "pass": bool(ok),
        }
    if any(abs(p.mean) <= Z_PASS * p.stderr for p in result.points):
        return {"kind": "indeterminate"}
    x = np.array([math.log(p.n_sites) for p in result.points])
    y = np.array([math.log(abs(p.mean)) for p in result.points])
    s = np.array([p.stderr / abs(p.mean) for p in result.points])
    w = 1.0 / (s * s)
    a11, a12, a22 = w.sum(), (w * x).sum(), (w * x * x).sum()
    det = a11 * a22 - a12 * a12
    if det <= 0:
        raise FitError("singular design in scaling fit")
    b1, b2 = (w * y).sum(), (w * x * y).sum()
    slope = (a11 * b2 - a12 * b1) / det
    slope_err = math.sqrt(a11 / det)
    return {
        "kind": "slope",
        "slope": float(slope),
        "slope_stderr": float(slope_err),
        "expected": -k / 2.0,
    }


# ---------------------------------------------------------------------------
# config file format: line-oriented `key = value`, `#` comments, lists
# comma-separated, repeated `target =` lines
# ---------------------------------------------------------------------------

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

_SCALAR_KEYS = {
    "beta": float,
    "h": float,
    "samples": int,
    "seed": int,
    "workers": int,
    "p_max": int,
    "quad_order": int,
    "tail_pairs": int,
    "kappa_variant": str,
    "phi_variant": str,
    "out_csv": str,
    "out_json": str,
    "cache_dir": str,
}
_FLAG_KEYS = ("anchor_mode", "allow_high_beta", "keep_weights")
_LIST_KEYS = {"n_grid": int, "tail_t": float}


def parse_target(text: str) -> Target:
    """Parse one target spec.

    Forms: ``pair {1,2}:0 {1,2}:1``, ``mono {1,2}:0^4``,
    ``rcov {1,2} {1,3}``; an optional trailing ``grid=8,10,12`` pins a
    per-target N grid."""
    toks = text.split()
    if not toks:
        raise ConfigError("empty target spec")
    grid = None
    if toks and toks[-1].startswith("grid="):
        grid = tuple(int(x) for x in toks.pop()[5:].split(","))
    kind, args = toks[0], toks[1:]
    if kind == "pair":
        if len(args) != 2:
            raise ConfigError(f"pair target needs two keys: {text!r}")
        return PairTarget(OverlapKey.parse(args[0]), OverlapKey.parse(args[1]), grid)
    if kind == "mono":
        if len(args) != 1:
            raise ConfigError(f"mono target needs one monomial: {text!r}")
        return MonomialTarget(Monomial.parse(args[0]), grid)
    if kind == "rcov":
        if len(args) != 2:
            raise ConfigError(f"rcov target needs two subsets: {text!r}")

        def subset(tok: str) -> tuple[int, ...]:
            tok = tok.strip()
            if not (tok.startswith("{") and tok.endswith("}")):
                raise ConfigError(f"bad subset {tok!r}")
            return tuple(int(x) for x in tok[1:-1].split(",") if x.strip())

        return MultiOverlapTarget(subset(args[0]), subset(args[1]), grid)
    raise ConfigError(f"unknown target kind {kind!r} in {text!r}")


def load_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from a key = value text file."""
    raw: dict[str, str] = {}
    targets: list[Target] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "target":
                targets.append(parse_target(value))
            elif key in _SCALAR_KEYS or key in _FLAG_KEYS or key in _LIST_KEYS:
                if key in raw:
                    raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
                raw[key] = value
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    try:
        beta = float(raw.get("beta", "0.15"))
        h = float(raw.get("h", "0.3"))
        flags = {}
        for key in _FLAG_KEYS:
            val = raw.get(key, "false").lower()
            if val not in _BOOL:
                raise ConfigError(f"bad boolean for {key!r}: {val!r}")
            flags[key] = _BOOL[val]
        params = ModelParams(beta, h, allow_high_beta=flags["allow_high_beta"])
        n_grid = tuple(
            int(x) for x in raw.get("n_grid", "8,12,16,20").split(",") if x.strip()
        )
        tail_t = tuple(
            float(x) for x in raw.get("tail_t", "0.0,0.05,0.1").split(",") if x.strip()
        )
        return ExperimentConfig(
            params=params,
            n_grid=n_grid,
            samples_per_n=int(raw.get("samples", "20000")),
            seed=int(raw.get("seed", str(DEFAULT_SEED))),
            targets=tuple(targets),
            kappa_variant=raw.get("kappa_variant", "proof"),
            phi_variant=raw.get("phi_variant", "proof"),
            anchor_mode=flags["anchor_mode"],
            workers=int(raw.get("workers", "0")),
            p_max=int(raw.get("p_max", str(DEFAULT_P_MAX))),
            quad_order=int(raw.get("quad_order", str(DEFAULT_QUAD_ORDER))),
            keep_weights=flags["keep_weights"],
            tail_t=tail_t,
            tail_pairs=int(raw.get("tail_pairs", "256")),
            cache_dir=raw.get("cache_dir"),
            out_csv=raw.get("out_csv"),
            out_json=raw.get("out_json"),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


DEFAULT_SEED = 20260811

DEFAULT_TARGET_SPECS = (
    "pair {1,2}:0 {1,2}:0",
    "pair {1,2}:1 {1,2}:0",
    "pair {1,2,3}:0 {1,2,3}:0",
    "pair {1}:1 {1}:1",
    "pair {1}:2 {1}:1",
    "pair {}:2 {}:2",
    "pair {}:2 {}:3",
    "rcov {1,2} {1,2}",
    "mono {1,2}:0^4 grid=8,10,12,14",
    "mono {1,2}:0*{1,3}:0*{2,3}:0",
)


def default_verify_config(**overrides) -> ExperimentConfig:
    """The default verification experiment: β=0.15, h=0.3, grid 8..20,
    M=20000, the standard target battery."""
    base = dict(
        params=ModelParams(0.15, 0.3),
        n_grid=(8, 12, 16, 20),
        samples_per_n=20000,
        seed=DEFAULT_SEED,
        targets=tuple(parse_target(s) for s in DEFAULT_TARGET_SPECS),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def tail_check(cfg: ExperimentConfig) -> dict:
    """Disorder-averaged exponential overlap-tail table.

    One row per (N, t): the empirical mean over disorder of the per-sample
    replica-pair statistic.  Flags blow-up when max/min over the grid at
    t = 0.1 exceeds 10."""
    ctx = _build_ctx(cfg, "tails")
    m_samples = cfg.samples_per_n
    tasks = []
    for n in cfg.n_grid:
        for start, stop in _chunks(m_samples, cfg.effective_workers()):
            tasks.append((n, start, stop, (), 2))
    tasks.sort(key=lambda t: (-t[0], t[1]))
    acc = {n: np.empty((m_samples, len(cfg.tail_t))) for n in cfg.n_grid}
    for n, start, out in _run_tasks(cfg, ctx, tasks):
        acc[n][start : start + out.shape[0]] = out
    rows = []
    for n in cfg.n_grid:
        means = np.mean(acc[n], axis=0)
        errs = np.std(acc[n], axis=0, ddof=1) / math.sqrt(m_samples)
        for t, mu, se in zip(cfg.tail_t, means, errs):
            rows.append({"n": n, "t": float(t), "mean": float(mu), "stderr": float(se)})
    blowup = False
    ratio = None
    probe = [r for r in rows if abs(r["t"] - 0.1) < 1e-12]
    if probe:
        col = [r["mean"] for r in probe]
        ratio = max(col) / min(col)
        blowup = ratio > TAIL_BLOWUP_RATIO
    return {"rows": rows, "blowup_ratio": ratio, "blowup_flag": blowup}

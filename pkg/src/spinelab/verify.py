"""Comparators that turn ensembles and analytic targets into pass/fail rows.

Every Monte Carlo statistic is judged by its z-score against an exact target
(|z| ≤ z_max) or, for the two-sample spine/forward comparison, against 0 for
the difference of independent estimates. Deterministic identities use the same
row layout with a zero standard error.
"""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import dataclasses as dc
import enum
import logging
import math
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
import pandas as pd

from spinelab.config import Thresholds
from spinelab.cumulant import (
    Regime,
    RegimeClassification,
    classify_regime,
    laplace_functional,
    q_measure_laplace,
)
from spinelab.estimators import Estimate, batch_means, difference
from spinelab.forward_sim import FlowMatrix, TrajectoryBundle, ensemble
from spinelab.model import ModelSpec
from spinelab.spectral import (
    SpectralData,
    analyze,
    assumption4_grid,
    assumption4_scan,
    ptilde_matrix,
    spectral_gap,
    spine_transition,
)
from spinelab.spine_sim import (
    GammaBundle,
    SpinePath,
    conditional_mean_given_G,
    gamma_ensemble,
    revival_sum_moments,
)

log = logging.getLogger("verify")

INDEPENDENT_NOTE = "independent streams; no shared-seed variance reduction"
HEURISTIC_NOTE = (
    "finite-horizon heuristic: median and mean of W^h_T along the ladder stand in for the almost-sure limit"
)


@dc.dataclass
class Check:
    test: str
    statistic: float
    target: float | None
    se: float
    z: float | None
    passed: bool
    note: str = ""

    @classmethod
    def from_estimate(cls, test: str, est: Estimate, z_max: float, note: str = "") -> "Check":
        return cls(test, est.value, est.target, est.standard_error, est.z_score, est.passes(z_max), note)

    def to_row(self) -> dict[str, Any]:
        return {
            "test": self.test,
            "statistic": self.statistic,
            "target": self.target,
            "se": self.se,
            "z": self.z,
            "pass": self.passed,
            "note": self.note,
        }


def _exact(test: str, residual: float) -> Check:
    est = Estimate(float(residual), 0.0, 1, 0.0)
    return Check.from_estimate(test, est, z_max=0.0)


def test_spectral_identities(
    spectral: SpectralData, t_values: Sequence[float] = (0.5, 1.0, 2.0), seed: int = 0
) -> list[Check]:
    """Eigen relations, normalizations, spine identities and many-to-one as residual rows."""
    A, u, v, h, Lam = spectral.A, spectral.u, spectral.v, spectral.h, spectral.Lambda
    checks = [
        _exact("spectral/right_eigen", np.abs(A @ u - Lam * u).max()),
        _exact("spectral/left_eigen", np.abs(v @ A - Lam * v).max()),
        _exact("spectral/sum_u", u.sum() - 1.0),
        _exact("spectral/sum_uv", u @ v - 1.0),
        _exact("spectral/norm_h", h @ h - 1.0),
        _exact("spectral/h_dot_h_hat", h @ spectral.h_hat - 1.0),
        # π has a zero diagonal, so a(i) = −A_ii
        _exact("spectral/q_eq_Lambda_plus_a", np.abs(spectral.q - Lam + np.diag(A)).max()),
        _exact("spectral/Q_row_sums", np.abs(spectral.Q_spine.sum(axis=1)).max()),
        _exact("spectral/pi_h_row_sums", np.abs(spectral.pi_h.sum(axis=1) - 1.0).max()),
        _exact("spectral/sum_rho", spectral.rho.sum() - 1.0),
    ]
    rng = np.random.default_rng(seed)
    for t in t_values:
        P = ptilde_matrix(spectral, t)
        E = spine_transition(spectral, t)
        M = spectral.M(t)
        f = rng.uniform(0.0, 1.0, spectral.K)
        checks += [
            _exact(f"spectral/ptilde_rows t={t:g}", np.abs(P @ spectral.rho - 1.0).max()),
            _exact(f"spectral/rho_invariance t={t:g}", np.abs(spectral.rho @ P - 1.0).max()),
            _exact(
                f"spectral/spine_transition t={t:g}",
                np.abs(E - math.exp(-Lam * t) * M * u[None, :] / u[:, None]).max(),
            ),
            _exact(
                f"spectral/many_to_one t={t:g}",
                np.abs(math.exp(Lam * t) * h * (E @ f) - M @ (f * h)).max()
                / max(1.0, np.abs(M @ (f * h)).max()),
            ),
            _exact(
                f"spectral/semigroup t={t:g}",
                np.abs(M @ spectral.M(0.5) - spectral.M(t + 0.5)).max() / max(1.0, np.abs(M).max()),
            ),
        ]
    return checks


def test_mean_consistency(bundle: TrajectoryBundle, spectral: SpectralData, z_max: float, min_batches: int = 30) -> list[Check]:
    """Ensemble mean of X_t against M(t)ᵀμ, per coordinate."""
    checks = []
    for k, t in enumerate(bundle.eval_times):
        target = spectral.M(t).T @ bundle.mu0
        for j in range(spectral.K):
            est = batch_means(bundle.states[:, k, j], min_batches, float(target[j]))
            checks.append(Check.from_estimate(f"forward/mean X_{j + 1} t={t:g}", est, z_max))
    return checks


def test_martingale(
    bundle: TrajectoryBundle, spectral: SpectralData, times: Sequence[float] | None = None, z_max: float = 4.0, min_batches: int = 30
) -> list[Check]:
    """Ê[e^{λ₁t}⟨h, X_t⟩] against ⟨h, μ⟩ along the ladder."""
    times = bundle.eval_times if times is None else times
    target = float(spectral.h @ bundle.mu0)
    W = bundle.pairing(spectral.h)
    checks = []
    for t in times:
        samples = math.exp(spectral.lambda1 * t) * W[:, bundle.time_index(t)]
        est = batch_means(samples, min_batches, target)
        checks.append(Check.from_estimate(f"martingale t={t:g}", est, z_max))
    return checks


def test_laplace(
    bundle: TrajectoryBundle,
    spec: ModelSpec,
    f_panel: Sequence[np.ndarray],
    times: Sequence[float] | None = None,
    z_max: float = 4.0,
    min_batches: int = 30,
) -> list[Check]:
    """Ê e^{−⟨f, X_t⟩} against e^{−⟨V_t f, μ⟩}."""
    times = bundle.eval_times if times is None else times
    checks = []
    for n, f in enumerate(f_panel):
        values = np.exp(-bundle.pairing(f))
        for t in times:
            target = laplace_functional(spec, bundle.mu0, f, t)
            est = batch_means(values[:, bundle.time_index(t)], min_batches, target)
            checks.append(Check.from_estimate(f"laplace f{n} t={t:g}", est, z_max))
    return checks


def test_spine_equivalence(
    spec: ModelSpec,
    spectral: SpectralData,
    mu,
    g_panel: Sequence[np.ndarray],
    times: Sequence[float],
    n_paths: int,
    seed: int,
    thresholds: Thresholds | None = None,
    threads: int = 1,
    forward: TrajectoryBundle | None = None,
    spine: GammaBundle | None = None,
) -> list[Check]:
    """Spine Monte Carlo, reweighted forward Monte Carlo and the analytic value, pairwise."""
    thresholds = Thresholds() if thresholds is None else thresholds
    mu = np.asarray(mu, dtype=np.float64)
    times = sorted(float(t) for t in times)
    T = max(times)
    fm = FlowMatrix.from_spec(spec, thresholds.window)
    if forward is None:
        forward = ensemble(spec, mu, T, times, n_paths, seed, fm, threads, thresholds.event_cap)
    if spine is None:
        spine = gamma_ensemble(spec, spectral, mu, T, times, n_paths, seed + 1, fm, threads, thresholds.event_cap)
    h_mu = float(spectral.h @ mu)
    W = forward.pairing(spectral.h)
    z_max, nb = thresholds.z_max, thresholds.min_batches
    checks = []
    for n, g in enumerate(g_panel):
        g = np.asarray(g, dtype=np.float64)
        spine_values = np.exp(-spine.pairing(g))
        forward_values = np.exp(-forward.pairing(g))
        for t in times:
            analytic = q_measure_laplace(spec, spectral, mu, g, t)
            k_s, k_f = spine.time_index(t), forward.time_index(t)
            spine_est = batch_means(spine_values[:, k_s], nb, analytic)
            weights = math.exp(spectral.lambda1 * t) * W[:, k_f] / h_mu
            forward_est = batch_means(forward_values[:, k_f] * weights, nb, analytic)
            label = f"g{n} t={t:g}"
            checks += [
                Check.from_estimate(f"spine/analytic {label}", spine_est, z_max),
                Check.from_estimate(f"reweighted/analytic {label}", forward_est, z_max),
                Check.from_estimate(f"spine/reweighted {label}", difference(spine_est, forward_est), z_max, INDEPENDENT_NOTE),
            ]
    return checks


def test_conditional_decomposition(
    spine: GammaBundle, spectral: SpectralData, f, times: Sequence[float] | None = None, z_max: float = 4.0, min_batches: int = 30
) -> list[Check]:
    """⟨f, Γ_t⟩ minus its conditional mean given the spine and immigration has mean 0."""
    if spine.realizations is None:
        raise ValueError("conditional decomposition needs a bundle with realizations")
    times = spine.eval_times if times is None else times
    f = np.asarray(f, dtype=np.float64)
    values = spine.pairing(f)
    checks = []
    for t in times:
        k = spine.time_index(t)
        residuals = np.array(
            [values[p, k] - conditional_mean_given_G(spectral, r.events, spine.mu, f, t) for p, r in enumerate(spine.realizations)]
        )
        finite = residuals[np.isfinite(residuals)]
        note = "" if finite.size == residuals.size else f"{residuals.size - finite.size} paths with infinite marks dropped"
        if finite.size == 0:
            continue
        est = batch_means(finite, min_batches, 0.0)
        checks.append(Check.from_estimate(f"conditional_mean t={t:g}", est, z_max, note))
    return checks


def test_revival_moments(
    spectral: SpectralData, spines: Sequence[SpinePath], mu, fn: Callable, t: float, label: str, z_max: float = 4.0, min_batches: int = 30
) -> list[Check]:
    moments = revival_sum_moments(spectral, list(spines), mu, fn, t, min_batches=min_batches)
    return [
        Check.from_estimate(f"revivals/first {label} t={t:g}", moments.first, z_max),
        Check.from_estimate(f"revivals/second {label} t={t:g}", moments.second, z_max),
    ]


try:
    from enum import StrEnum
except ImportError:  # Python 3.10: same str()/format() behaviour as 3.11's StrEnum

    class StrEnum(str, enum.Enum):
        def __str__(self) -> str:
            return str(self.value)


class Verdict(StrEnum):
    NONDEGENERATE = "NONDEGENERATE"
    DEGENERATE = "DEGENERATE"
    INCONCLUSIVE = "INCONCLUSIVE"


def verdict_agrees(verdict: Verdict, regime: Regime) -> bool:
    """Whether an empirical verdict is compatible with the analytic regime."""
    if regime == Regime.INDETERMINATE:
        return True
    if verdict == Verdict.NONDEGENERATE:
        return regime == Regime.NONDEGENERATE
    if verdict == Verdict.DEGENERATE:
        return regime in (Regime.DEGENERATE_LLOGL, Regime.DEGENERATE_SUBCRITICAL)
    return False


@dc.dataclass
class RegimeReport:
    classification: RegimeClassification
    ladder: pd.DataFrame
    verdict: Verdict
    consistent: bool
    thresholds: Thresholds
    note: str = HEURISTIC_NOTE

    def to_dict(self) -> dict[str, Any]:
        return {
            "classification": self.classification.to_dict(),
            "ladder": self.ladder.to_dict(orient="records"),
            "verdict": str(self.verdict),
            "consistent": self.consistent,
            "note": self.note,
        }


def _ks_verdict(ladder: pd.DataFrame, th: Thresholds) -> Verdict:
    tail = ladder.iloc[len(ladder) // 2 :]
    final = ladder.iloc[-1]
    if (tail["median_ratio"] >= th.median_nondegenerate).all():
        return Verdict.NONDEGENERATE
    mean_holds = (tail["z"].abs() <= th.z_max).all()
    if final["median_ratio"] < th.median_degenerate and (mean_holds or final["collapsed"] >= 0.5):
        return Verdict.DEGENERATE
    return Verdict.INCONCLUSIVE


def kesten_stigum_experiment(
    spec: ModelSpec,
    spectral: SpectralData,
    mu,
    T_ladder: Sequence[float],
    n_paths: int,
    seed: int,
    thresholds: Thresholds | None = None,
    threads: int = 1,
    progress: bool = False,
    bundle: TrajectoryBundle | None = None,
) -> RegimeReport:
    """Track W^h_T along a ladder of horizons and compare with classify_regime."""
    th = Thresholds() if thresholds is None else thresholds
    mu = np.asarray(mu, dtype=np.float64)
    ladder_times = sorted(float(t) for t in T_ladder)
    if not ladder_times or ladder_times[0] <= 0:
        raise ValueError("the horizon ladder needs positive times")
    lambda1 = spectral.lambda1
    if lambda1 != 0 and ladder_times[-1] < 10.0 / abs(lambda1):
        log.warning(f"largest horizon {ladder_times[-1]} is below 10/|lambda1| = {10.0 / abs(lambda1):.3g}")
    classification = classify_regime(spec, spectral)
    if bundle is None:
        fm = FlowMatrix.from_spec(spec, th.window)
        bundle = ensemble(spec, mu, ladder_times[-1], ladder_times, n_paths, seed, fm, threads, th.event_cap, progress=progress)
    h_mu = float(spectral.h @ mu)
    W = bundle.pairing(spectral.h)
    totals = bundle.states.sum(axis=-1)
    rows = []
    for T in ladder_times:
        k = bundle.time_index(T)
        w = math.exp(lambda1 * T) * W[:, k]
        est = batch_means(w, th.min_batches, h_mu)
        median = float(np.median(w))
        rows.append(
            {
                "T": T,
                "mean": est.value,
                "se": est.standard_error,
                "z": est.z_score,
                "median": median,
                "median_ratio": median / h_mu,
                "frac_small": float(np.mean(w < th.degenerate_epsilon * h_mu)),
                "collapsed": float(np.mean(totals[:, k] < th.degenerate_epsilon * mu.sum())),
            }
        )
    ladder = pd.DataFrame(rows)
    verdict = _ks_verdict(ladder, th)
    consistent = verdict_agrees(verdict, classification.regime)
    if not consistent:
        log.warning(f"verdict {verdict} disagrees with {classification.regime}")
    log.info(f"{verdict=!s} regime={classification.regime!s} {consistent=}")
    return RegimeReport(classification, ladder, verdict, consistent, th)


@dc.dataclass
class ExtinctionReport:
    skipped: bool
    table: pd.DataFrame
    passed: bool
    epsilon: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "skipped": self.skipped,
            "passed": self.passed,
            "epsilon": self.epsilon,
            "table": self.table.to_dict(orient="records"),
        }


def weak_extinction_test(
    bundle: TrajectoryBundle, epsilon: float, lambda1: float, thresholds: Thresholds | None = None
) -> ExtinctionReport:
    """P̂(X_T^{(i)} > ε) along the ladder: non-increasing on the tail and small at the end."""
    th = Thresholds() if thresholds is None else thresholds
    if lambda1 <= 0:
        log.info(f"weak extinction skipped: {lambda1=}")
        return ExtinctionReport(True, pd.DataFrame(), True, epsilon)
    n = bundle.n_paths
    probs = (bundle.states > epsilon).mean(axis=0)  # (n_eval, K)
    table = pd.DataFrame(probs, columns=[f"P(X_{k + 1}>eps)" for k in range(probs.shape[1])])
    table.insert(0, "T", bundle.eval_times)
    tail = probs[len(probs) // 2 :]
    slack = th.z_max * np.sqrt(np.maximum(tail * (1.0 - tail), 1.0 / n) / n)
    trend_ok = bool(np.all(np.diff(tail, axis=0) <= slack[1:] + slack[:-1]))
    final_ok = bool(probs[-1].max() <= th.extinction_final)
    return ExtinctionReport(False, table, trend_ok and final_ok, epsilon)


@dc.dataclass
class SuiteReport:
    checks: list[Check]
    thresholds: Thresholds

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([check.to_row() for check in self.checks])

    def failures(self) -> list[Check]:
        return [check for check in self.checks if not check.passed]


def default_panel(spectral: SpectralData, seed: int, size: int = 5) -> list[np.ndarray]:
    """Test functions: constants, h, a point mass and random draws."""
    K = spectral.K
    rng = np.random.default_rng(seed)
    panel = [0.5 * np.ones(K), np.ones(K), np.array(spectral.h), 2.0 * np.eye(K)[0]]
    while len(panel) < size:
        panel.append(rng.uniform(0.0, 2.0, K))
    return panel[:size]


def run_suite(
    spec: ModelSpec,
    mu,
    eval_times: Sequence[float],
    n_paths: int,
    seed: int,
    thresholds: Thresholds | None = None,
    threads: int = 1,
    progress: bool = False,
) -> SuiteReport:
    """Every identity and Monte Carlo comparison for one model."""
    th = Thresholds() if thresholds is None else thresholds
    mu = np.asarray(mu, dtype=np.float64)
    times = sorted({float(t) for t in eval_times})
    if not times or times[0] <= 0:
        raise ValueError("evaluation times must be positive")
    T = times[-1]
    spectral = analyze(spec)
    checks = test_spectral_identities(spectral, seed=seed)

    scan = assumption4_scan(spectral, assumption4_grid(spectral), th.assumption4_tol)
    note = f"settles at t={scan.settle_time:.4g} (gap {spectral_gap(spectral):.4g}); monotone tail={scan.monotone_tail}"
    checks.append(
        Check("assumption4", float(scan.deviation[-1]), th.assumption4_tol, 0.0, None, scan.passed, note)
    )

    fm = FlowMatrix.from_spec(spec, th.window)
    forward = ensemble(spec, mu, T, times, n_paths, seed, fm, threads, th.event_cap, progress=progress)
    spine = gamma_ensemble(
        spec, spectral, mu, T, times, n_paths, seed + 1, fm, threads, th.event_cap, keep_realizations=True, progress=progress
    )
    z_max, nb = th.z_max, th.min_batches
    checks += test_mean_consistency(forward, spectral, z_max, nb)
    checks += test_martingale(forward, spectral, times, z_max, nb)
    panel = default_panel(spectral, seed)
    checks += test_laplace(forward, spec, panel, times, z_max, nb)
    checks += test_spine_equivalence(
        spec, spectral, mu, panel[:3], times, n_paths, seed, th, threads, forward=forward, spine=spine
    )
    for name, f in (("h", spectral.h), ("ones", np.ones(spec.K))):
        for check in test_conditional_decomposition(spine, spectral, f, times, z_max, nb):
            check.test = f"{check.test} f={name}"
            checks.append(check)
    spines = [r.spine for r in spine.realizations]
    checks += test_revival_moments(spectral, spines, mu, lambda s, i, j: 1.0, T, "count", z_max, nb)
    checks += test_revival_moments(
        spectral, spines, mu, lambda s, i, j: np.exp(-s) * (1.0 + j) / (1.0 + i), T, "weighted", z_max, nb
    )
    report = SuiteReport(checks, th)
    log.info(f"suite passed={report.passed} failures={len(report.failures())} of {len(checks)}")
    return report

"""Deterministic analytics: cumulant and weighted-moment ODEs, Laplace targets, regimes.

The Laplace functional of the process is E_μ e^{−⟨f,X_t⟩} = e^{−⟨V_t f, μ⟩}
where dV/dt = −ψ(V). With b ≡ 0 the branching mechanism of type i is

    ψ(i, f) = a_i f_i + ∫(e^{−f_iθ} − 1 + f_iθ)Π^L(i,dθ)
              − c_i π(i,f) − ∫(1 − e^{−θπ(i,f)})Π^NL(i,dθ).
"""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import dataclasses as dc
import enum
import logging
import math

import numpy as np
import pandas as pd
from scipy import integrate

from spinelab.model import ModelSpec, llogl_reduced_finite, unbounded_support_types
from spinelab.spectral import SpectralData, matrix_exponential

log = logging.getLogger("cumulant")

RTOL = 1e-8
ATOL = 1e-10
METHOD = "DOP853"


def psi_eval(spec: ModelSpec, i: int, lam: float, f: np.ndarray) -> float:
    """ψ(i, f) with f(i) = lam."""
    f = np.array(f, dtype=np.float64)
    f[i] = lam
    local, nonlocal_ = spec.piL[i], spec.piNL[i]
    pf = float(spec.pi[i] @ f)
    value = spec.a[i] * lam - spec.c[i] * pf
    if local is not None:
        value += local.compensated_laplace(lam)
    if nonlocal_ is not None:
        value -= nonlocal_.laplace_deficit(pf)
    return float(value)


def psi_vector(spec: ModelSpec, f: np.ndarray) -> np.ndarray:
    """(ψ(1, f), ..., ψ(K, f)).

    >>> from spinelab.model import spec_from_dict
    >>> spec = spec_from_dict({"K": 2, "a": [1, 2], "c": [0, 0], "pi": [[0, 1], [1, 0]],
    ...     "piL": [None, None], "piNL": [None, None]})
    >>> psi_vector(spec, np.array([3.0, 1.0])).tolist()
    [3.0, 2.0]
    """
    f = np.asarray(f, dtype=np.float64)
    return np.array([psi_eval(spec, i, f[i], f) for i in range(spec.K)])


def weighted_psi_vector(spec: ModelSpec, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Ψ(i, f, g) = g_i(a_i + ∫θ(1−e^{−f_iθ})Π^L) − π(i,g)(c_i + ∫θe^{−θπ(i,f)}Π^NL)."""
    pf = spec.pi @ f
    pg = spec.pi @ g
    out = np.empty(spec.K)
    for i in range(spec.K):
        local, nonlocal_ = spec.piL[i], spec.piNL[i]
        own = spec.a[i] + (0.0 if local is None else local.weighted_deficit(f[i]))
        spread = spec.c[i] + (0.0 if nonlocal_ is None else nonlocal_.weighted_laplace(pf[i]))
        out[i] = g[i] * own - pg[i] * spread
    return out


def _integrate(fun, y0: np.ndarray, t_grid: np.ndarray, rtol: float = RTOL, atol: float = ATOL):
    """Integrate from 0 and return (states on t_grid, function evaluations)."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or np.any(t_grid < 0) or np.any(np.diff(t_grid) < 0):
        raise ValueError("time grid must be non-negative and non-decreasing")
    horizon = float(t_grid.max(initial=0.0))
    if horizon == 0:
        return np.tile(y0, (t_grid.size, 1)), 0
    sol = integrate.solve_ivp(
        fun, (0.0, horizon), y0, method=METHOD, t_eval=t_grid, rtol=rtol, atol=atol
    )
    if sol.status < 0:
        raise RuntimeError(f"ODE integration failed: {sol.message}")
    return sol.y.T, sol.nfev


@dc.dataclass
class CumulantSolution:
    f0: np.ndarray
    t: np.ndarray
    V: np.ndarray  # shape (len(t), K)
    nfev: int

    def at(self, t: float) -> np.ndarray:
        index = int(np.flatnonzero(np.isclose(self.t, t, rtol=0, atol=1e-12))[0])
        return self.V[index]


def solve_V(spec: ModelSpec, f0, T: float, t_grid=None) -> CumulantSolution:
    """Solve dV/dt = −ψ(V), V(0) = f0, reporting V on t_grid (default: [T])."""
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.shape != (spec.K,) or np.any(f0 < 0) or not np.all(np.isfinite(f0)):
        raise ValueError(f"f0 must be a finite non-negative length-{spec.K} vector")
    t_grid = np.array([T] if t_grid is None else t_grid, dtype=np.float64)
    if t_grid.size and t_grid.max() > T:
        raise ValueError("evaluation times must not exceed T")

    def rhs(_t, V):
        return -psi_vector(spec, np.maximum(V, 0.0))

    V, nfev = _integrate(rhs, f0, t_grid)
    V = np.maximum(V, 0.0)
    log.debug(f"solve_V {T=} {nfev=}")
    return CumulantSolution(f0=f0, t=t_grid, V=V, nfev=nfev)


def laplace_functional(spec: ModelSpec, mu, f0, t: float) -> float:
    """E_μ e^{−⟨f0, X_t⟩} = e^{−⟨V_t f0, μ⟩}."""
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu < 0):
        raise ValueError("mu must be non-negative")
    V = solve_V(spec, f0, t).V[-1]
    return math.exp(-float(V @ mu))


@dc.dataclass
class MomentSolution:
    t: np.ndarray
    V: np.ndarray
    W: np.ndarray


def solve_weighted_moment(spec: ModelSpec, g0, f_weight, T: float, t_grid=None) -> MomentSolution:
    """Solve the coupled pair dV/dt = −ψ(V), dW/dt = −Ψ(V, W) with V(0)=g0, W(0)=f_weight.

    E_μ[⟨f,X_t⟩e^{−⟨g,X_t⟩}] = e^{−⟨V_t g, μ⟩}⟨W_t, μ⟩.
    """
    g0 = np.asarray(g0, dtype=np.float64)
    f_weight = np.asarray(f_weight, dtype=np.float64)
    K = spec.K
    if g0.shape != (K,) or f_weight.shape != (K,) or np.any(g0 < 0):
        raise ValueError(f"g0 (non-negative) and f_weight must have length {K}")
    t_grid = np.array([T] if t_grid is None else t_grid, dtype=np.float64)

    def rhs(_t, y):
        V = np.maximum(y[:K], 0.0)
        return np.concatenate([-psi_vector(spec, V), -weighted_psi_vector(spec, V, y[K:])])

    y, nfev = _integrate(rhs, np.concatenate([g0, f_weight]), t_grid)
    log.debug(f"solve_weighted_moment {T=} {nfev=}")
    return MomentSolution(t=t_grid, V=np.maximum(y[:, :K], 0.0), W=y[:, K:])


def q_measure_laplace(spec: ModelSpec, spectral: SpectralData, mu, g0, t: float) -> float:
    """Laplace functional under the h-martingale change of measure.

    e^{λ₁t}/⟨h,μ⟩ · e^{−⟨V_t g0, μ⟩}⟨V^h_t g0, μ⟩; equals e^{−⟨g0, μ⟩} at t = 0.
    """
    mu = np.asarray(mu, dtype=np.float64)
    h_mu = float(spectral.h @ mu)
    if not h_mu > 0:
        raise ValueError("the change of measure needs <h, mu> > 0")
    sol = solve_weighted_moment(spec, g0, spectral.h, t)
    V, W = sol.V[-1], sol.W[-1]
    return math.exp(spectral.lambda1 * t - float(V @ mu)) * float(W @ mu) / h_mu


def mean_semigroup(spec: ModelSpec, f, t: float, spectral: SpectralData | None = None) -> np.ndarray:
    """𝔓_t f = e^{At}f, so that E_{δ_i}⟨f, X_t⟩ = (e^{At}f)_i."""
    A = spectral.A if spectral is not None else spec.gamma[:, None] * spec.pi - np.diag(spec.a)
    return matrix_exponential(A, t) @ np.asarray(f, dtype=np.float64)


def mean_ode_residual(spec: ModelSpec, f, t: float) -> float:
    """Max gap between an RK solution of dy/dt = Ay and e^{At}f."""
    f = np.asarray(f, dtype=np.float64)
    A = spec.gamma[:, None] * spec.pi - np.diag(spec.a)
    y, _nfev = _integrate(lambda _t, y: A @ y, f, np.array([t]), rtol=1e-12, atol=1e-14)
    return float(np.abs(y[-1] - mean_semigroup(spec, f, t)).max())


def analytic_table(spec: ModelSpec, spectral: SpectralData, mu, f0, t_grid) -> pd.DataFrame:
    """Rows of V_t f0, the Laplace functional, its reweighted version and the mean check."""
    mu = np.asarray(mu, dtype=np.float64)
    t_grid = np.asarray(sorted(set(map(float, t_grid))), dtype=np.float64)
    moment = solve_weighted_moment(spec, f0, spectral.h, float(t_grid.max(initial=0.0)), t_grid)
    h_mu = float(spectral.h @ mu)
    rows = []
    for t, V, W in zip(moment.t, moment.V, moment.W, strict=True):
        row = {"t": t}
        row |= {f"V_{k + 1}": V[k] for k in range(spec.K)}
        row["laplace"] = math.exp(-float(V @ mu))
        row["q_laplace"] = (
            math.exp(spectral.lambda1 * t - float(V @ mu)) * float(W @ mu) / h_mu if h_mu > 0 else math.nan
        )
        row["mean_check_residual"] = mean_ode_residual(spec, f0, t)
        rows.append(row)
    return pd.DataFrame(rows)


try:
    from enum import StrEnum
except ImportError:  # Python 3.10: same str()/format() behaviour as 3.11's StrEnum

    class StrEnum(str, enum.Enum):
        def __str__(self) -> str:
            return str(self.value)


class Regime(StrEnum):
    NONDEGENERATE = "NONDEGENERATE"
    DEGENERATE_LLOGL = "DEGENERATE_LLOGL"
    DEGENERATE_SUBCRITICAL = "DEGENERATE_SUBCRITICAL"
    INDETERMINATE = "INDETERMINATE"


@dc.dataclass
class RegimeClassification:
    regime: Regime
    llogl_value: float
    reasons: list[str]
    unbounded_types: list[int]
    reduced_finite: bool

    def to_dict(self) -> dict:
        return {
            "regime": str(self.regime),
            "llogl_value": self.llogl_value,
            "reasons": self.reasons,
            "unbounded_types": self.unbounded_types,
            "reduced_finite": self.reduced_finite,
        }


def llogl_sum(spec: ModelSpec, spectral: SpectralData) -> float:
    """Σ ĥ_i h_i ∫r log⁺(r h_i)Π^L + Σ_{γ>0} ĥ_i π(i,h) ∫r log⁺(r π(i,h))Π^NL."""
    total = 0.0
    for i in range(spec.K):
        h_i, ph_i, hat_i = spectral.h[i], spectral.pi_of_h[i], spectral.h_hat[i]
        if (local := spec.piL[i]) is not None:
            total += hat_i * h_i * local.llogl_moment(h_i)
        if spec.gamma[i] > 0 and (nonlocal_ := spec.piNL[i]) is not None:
            total += hat_i * ph_i * nonlocal_.llogl_moment(ph_i)
    return total


def classify_regime(spec: ModelSpec, spectral: SpectralData) -> RegimeClassification:
    """Decide degeneracy of the martingale limit from λ₁, supports and the L log L sum.

    >>> from spinelab.model import spec_from_dict
    >>> from spinelab.spectral import analyze
    >>> spec = spec_from_dict({"K": 2, "a": [0, 0], "c": [0, 0], "pi": [[0, 1], [1, 0]],
    ...     "piL": [None, None], "piNL": [{"kind": "atoms", "atoms": [[1, 1]]}] * 2})
    >>> str(classify_regime(spec, analyze(spec)).regime)
    'NONDEGENERATE'
    """
    lambda1 = spectral.lambda1
    value = llogl_sum(spec, spectral)
    unbounded = unbounded_support_types(spec)
    reduced = llogl_reduced_finite(spec)
    if math.isfinite(value) != reduced:
        log.warning(f"L log L sum ({value}) and the per-type predicate ({reduced=}) disagree")
    reasons = [f"lambda1 = {lambda1:.6g}", f"L log L sum = {value:.6g}"]
    if lambda1 >= 0 and unbounded:
        regime = Regime.DEGENERATE_SUBCRITICAL
        reasons.append(f"lambda1 >= 0 and types {unbounded} have jump measures with unbounded support")
    elif math.isinf(value):
        regime = Regime.DEGENERATE_LLOGL
        reasons.append("the L log L moment diverges")
    elif lambda1 < 0:
        regime = Regime.NONDEGENERATE
        reasons.append("lambda1 < 0 and the L log L moment is finite")
    else:
        regime = Regime.INDETERMINATE
        reasons.append("lambda1 >= 0 with bounded jump supports; the support condition for degeneracy fails")
        if lambda1 > 0:
            reasons.append("lambda1 > 0 already forces the martingale limit to vanish")
    log.info(f"{regime=!s} {value=:.6g}")
    return RegimeClassification(regime, value, reasons, unbounded, reduced)

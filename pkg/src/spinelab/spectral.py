"""Mean matrix, Perron data and the spine quantities derived from them.

For a model with K types the mean semigroup is M(t) = e^{At} where
A_ij = γ(i)p_ij − a(i)δ_ij. Its Perron root Λ and the positive eigenvectors
u (right) and v (left) give the harmonic function h, its dual ĥ, the spine
Q-matrix and the spine's transition density p̃ with respect to ρ = u∘v.
"""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import dataclasses as dc
import logging
import math
from typing import Any

import numpy as np
from scipy import linalg

from spinelab.model import ModelSpec, strongly_connected

log = logging.getLogger("spectral")

RESIDUAL_TOL = 1e-10
MAX_SQUARINGS = 64


@dc.dataclass(frozen=True, eq=False)
class SpectralData:
    A: np.ndarray
    Lambda: float
    u: np.ndarray
    v: np.ndarray
    h: np.ndarray
    h_hat: np.ndarray
    lambda1: float
    c_norm: float
    q: np.ndarray
    Q_spine: np.ndarray
    pi_h: np.ndarray
    rho: np.ndarray
    pi_of_h: np.ndarray

    @property
    def K(self) -> int:
        return self.A.shape[0]

    def M(self, t: float) -> np.ndarray:
        return matrix_exponential(self.A, t)

    def to_dict(self) -> dict[str, Any]:
        return {
            "Lambda": self.Lambda,
            "lambda1": self.lambda1,
            "c_norm": self.c_norm,
            "u": self.u.tolist(),
            "v": self.v.tolist(),
            "h": self.h.tolist(),
            "h_hat": self.h_hat.tolist(),
            "q": self.q.tolist(),
            "Q_spine": self.Q_spine.tolist(),
            "pi_h": self.pi_h.tolist(),
            "rho": self.rho.tolist(),
            "A": self.A.tolist(),
        }


def build_A(spec: ModelSpec) -> np.ndarray:
    """A_ij = γ(i)p_ij − a(i)δ_ij."""
    return spec.gamma[:, None] * spec.pi - np.diag(spec.a)


def is_irreducible(A: np.ndarray) -> bool:
    """Strong connectivity of the off-diagonal pattern of A.

    >>> is_irreducible(np.array([[0.0, 1.0], [1.0, 0.0]]))
    True
    >>> is_irreducible(np.diag([1.0, 2.0]))
    False
    """
    off = np.array(A, dtype=np.float64)
    np.fill_diagonal(off, 0.0)
    return strongly_connected(off != 0)


def matrix_exponential(A: np.ndarray, t: float) -> np.ndarray:
    """e^{At} by scaling and squaring with a Padé core.

    >>> M = matrix_exponential(np.diag([-1.0, 2.0]), 0.5)
    >>> bool(np.allclose(M, np.diag([math.exp(-0.5), math.e]), rtol=1e-14))
    True
    >>> matrix_exponential(np.ones((2, 2)), 0.0).tolist()
    [[1.0, 0.0], [0.0, 1.0]]
    """
    if t < 0:
        raise ValueError(f"matrix exponential needs t >= 0, got {t}")
    A = np.asarray(A, dtype=np.float64)
    if t == 0:
        return np.eye(A.shape[0])
    return linalg.expm(A * t)


def _dominant_direction(E: np.ndarray) -> np.ndarray:
    """Power iteration on a positive matrix, accelerated by repeated squaring."""
    P = E / E.max()
    for _ in range(MAX_SQUARINGS):
        P_next = P @ P
        P_next /= P_next.max()
        if np.max(np.abs(P_next - P)) <= 1e-14:
            P = P_next
            break
        P = P_next
    else:
        raise RuntimeError("Perron iteration did not converge; A may be nearly reducible")
    # P ≈ u wᵀ up to scale; its row sums are proportional to u
    direction = P.sum(axis=1)
    return direction / direction.sum()


def perron(A: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Return (Λ, u, v) with Σu = 1 and Σu_i v_i = 1.

    >>> Lambda, u, v = perron(np.array([[0.0, 1.0], [1.0, 0.0]]))
    >>> round(Lambda, 12), u.round(12).tolist(), v.round(12).tolist()
    (1.0, [0.5, 0.5], [1.0, 1.0])
    """
    A = np.asarray(A, dtype=np.float64)
    if not is_irreducible(A):
        raise ValueError("Perron data needs an irreducible mean matrix")
    shift = 1.0 / (1.0 + np.abs(A).max())
    E = linalg.expm(A * shift)
    u = _dominant_direction(E)
    v = _dominant_direction(E.T)
    if np.any(u <= 0) or np.any(v <= 0):
        raise RuntimeError(f"Perron vectors are not positive: {u=} {v=}")
    Lambda = float(v @ A @ u / (v @ u))
    v = v / (u @ v)
    scale = max(1.0, float(np.abs(A).max()))
    right = float(np.abs(A @ u - Lambda * u).max())
    left = float(np.abs(v @ A - Lambda * v).max() / v.max())
    if max(right, left) > RESIDUAL_TOL * scale:
        raise RuntimeError(f"Perron residuals too large: {right=:.3g} {left=:.3g}")
    log.debug(f"{Lambda=} {right=:.2g} {left=:.2g}")
    return Lambda, u, v


def derive_spine(spec: ModelSpec, A: np.ndarray, Lambda: float, u: np.ndarray, v: np.ndarray) -> SpectralData:
    """Fill in h, ĥ, q, the spine Q-matrix, π^h and ρ from the Perron triple."""
    c_norm = 1.0 / math.sqrt(float(u @ u))
    h = c_norm * u
    h_hat = v / c_norm
    pi_of_h = spec.pi @ h
    off = spec.gamma[:, None] * spec.pi * u[None, :] / u[:, None]
    q = off.sum(axis=1)
    Q_spine = off - np.diag(q)
    pi_h = spec.pi * h[None, :] / pi_of_h[:, None]
    rho = u * v

    expected = Lambda + spec.a
    scale = max(1.0, float(np.abs(expected).max()))
    gap = float(np.abs(q - expected).max())
    if gap > 1e-8 * scale:
        raise RuntimeError(f"q differs from Lambda + a by {gap:.3g}")
    if gap > RESIDUAL_TOL * scale:
        log.warning(f"q differs from Lambda + a by {gap:.3g}")
    for arr in (A, u, v, h, h_hat, q, Q_spine, pi_h, rho, pi_of_h):
        arr.setflags(write=False)
    return SpectralData(
        A=A,
        Lambda=Lambda,
        u=u,
        v=v,
        h=h,
        h_hat=h_hat,
        lambda1=-Lambda,
        c_norm=c_norm,
        q=q,
        Q_spine=Q_spine,
        pi_h=pi_h,
        rho=rho,
        pi_of_h=pi_of_h,
    )


def analyze(spec: ModelSpec) -> SpectralData:
    A = build_A(spec)
    Lambda, u, v = perron(A)
    spectral = derive_spine(spec, A, Lambda, u, v)
    log.info(f"Lambda={spectral.Lambda:.6g} lambda1={spectral.lambda1:.6g}")
    return spectral


def ptilde_matrix(spectral: SpectralData, t: float) -> np.ndarray:
    """p̃(t,i,j) = e^{−Λt}M(t)_ij/(u_i v_j) for all i, j."""
    M = spectral.M(t)
    return math.exp(-spectral.Lambda * t) * M / np.outer(spectral.u, spectral.v)


def ptilde(spectral: SpectralData, t: float, i: int, j: int) -> float:
    """Spine transition density with respect to ρ."""
    return float(ptilde_matrix(spectral, t)[i, j])


def spine_transition(spectral: SpectralData, t: float) -> np.ndarray:
    """e^{Q_spine t}, the spine's transition matrix."""
    return matrix_exponential(spectral.Q_spine, t)


def spectral_gap(spectral: SpectralData) -> float:
    """Λ minus the largest real part among the other eigenvalues of A."""
    eigs = np.linalg.eigvals(spectral.A)
    if eigs.size < 2:
        return math.inf
    nearest = int(np.argmin(np.abs(eigs - spectral.Lambda)))
    rest = np.delete(eigs, nearest)
    return float(spectral.Lambda - rest.real.max())


def assumption4_grid(spectral: SpectralData, points: int = 100, span: float = 10.0) -> np.ndarray:
    """Evenly spaced times up to span/gap."""
    horizon = span / spectral_gap(spectral)
    return np.linspace(horizon / points, horizon, points)


@dc.dataclass
class Assumption4Report:
    t: np.ndarray
    deviation: np.ndarray
    tol: float
    passed: bool
    monotone_tail: bool
    settle_time: float

    def rows(self) -> list[dict[str, float]]:
        return [{"t": float(t), "deviation": float(d)} for t, d in zip(self.t, self.deviation, strict=True)]


def assumption4_scan(spectral: SpectralData, t_grid, tol: float = 1e-3) -> Assumption4Report:
    """max_ij |p̃(t,i,j) − 1| along `t_grid`.

    Passes when the deviation drops below `tol`, stays there for the rest of
    the grid and is non-increasing on that tail. `settle_time` is the first
    grid time of the tail, whether or not the tail is monotone.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size == 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("assumption4_scan needs a non-empty increasing time grid")
    deviation = np.array([np.abs(ptilde_matrix(spectral, t) - 1.0).max() for t in t_grid])
    above = np.flatnonzero(deviation >= tol)
    start = 0 if above.size == 0 else int(above[-1]) + 1
    settled = start < t_grid.size
    tail = deviation[start:]
    monotone = bool(settled and np.all(np.diff(tail) <= 1e-15))
    passed = settled and monotone
    settle = float(t_grid[start]) if settled else math.inf
    if settled and not monotone:
        log.warning(f"deviation settles below {tol:g} at t={settle:.4g} but oscillates on the tail")
    log.info(f"{passed=} {monotone=} {settle=:.4g}")
    return Assumption4Report(t_grid, deviation, tol, passed, monotone, settle)

"""Exact event-driven simulation of the K-type process with b ≡ 0.

Between jumps the mass vector follows the linear flow dx/dt = F x where
F_jj = −(a_j + m^L_j) and F_ji = c_i p_ij. Type i produces local jumps
(θ added to its own mass) at rate x_i|Π^L(i)| and non-local jumps (θ p(i,·)
added to the vector) at rate x_i|Π^NL(i)|. Jumps are drawn by thinning
against R̄ = λ_max⟨1,x⟩e^{ωΔ}, valid for a look-ahead window of length Δ.
"""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import dataclasses as dc
import functools
import logging
import math
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import linalg

from spinelab import streams
from spinelab.model import ModelSpec, local_rates, mean_local, nonlocal_rates

log = logging.getLogger("forward_sim")

EXTINCTION_MASS = 1e-300
DEFAULT_EVENT_CAP = 10_000_000
DEFAULT_WINDOW = 0.1
EIGEN_COND_MAX = 1e4


class EventCapExceeded(RuntimeError):
    """A path produced more jumps than allowed before its horizon."""


class Event(NamedTuple):
    time: float
    type: int
    kind: str  # "local" or "nonlocal"
    theta: float


@dc.dataclass(frozen=True, eq=False)
class FlowMatrix:
    """Inter-jump flow F plus the constants the thinning bound needs."""

    F: np.ndarray
    rates_local: np.ndarray
    rates_nonlocal: np.ndarray
    window: float = DEFAULT_WINDOW

    @classmethod
    def from_spec(cls, spec: ModelSpec, window: float = DEFAULT_WINDOW) -> "FlowMatrix":
        """Split A into the flow and the jump intensities.

        >>> from spinelab.model import spec_from_dict
        >>> spec = spec_from_dict({"K": 2, "a": [0, 0], "c": [0, 0], "pi": [[0, 1], [1, 0]],
        ...     "piL": [{"kind": "atoms", "atoms": [[1, 1]]}] * 2,
        ...     "piNL": [{"kind": "atoms", "atoms": [[1, 1]]}] * 2})
        >>> FlowMatrix.from_spec(spec).F.tolist()
        [[-1.0, 0.0], [0.0, -1.0]]
        """
        if not window > 0:
            raise ValueError(f"thinning window must be positive, got {window}")
        F = (spec.c[:, None] * spec.pi).T - np.diag(spec.a + mean_local(spec))
        return cls(F=F, rates_local=local_rates(spec), rates_nonlocal=nonlocal_rates(spec), window=window)

    @functools.cached_property
    def lam_max(self) -> float:
        return float((self.rates_local + self.rates_nonlocal).max())

    @functools.cached_property
    def omega(self) -> float:
        """Growth rate bound for ⟨1, x⟩ under the flow."""
        return float(np.clip(self.F, 0.0, None).sum(axis=0).max())

    @functools.cached_property
    def bound_factor(self) -> float:
        return self.lam_max * math.exp(self.omega * self.window)

    @functools.cached_property
    def _eigen(self) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
        w, V = np.linalg.eig(self.F)
        if np.linalg.cond(V) > EIGEN_COND_MAX:
            log.debug("flow matrix is poorly diagonalizable; using expm")
            return None
        return w, V, np.linalg.inv(V)

    @functools.cached_property
    def window_propagator(self) -> np.ndarray:
        return np.clip(linalg.expm(self.F * self.window), 0.0, None)

    def propagator(self, dt: float) -> np.ndarray:
        """e^{F dt} with negative round-off removed."""
        if dt == self.window:
            return self.window_propagator
        if (eigen := self._eigen) is not None:
            w, V, V_inv = eigen
            P = (V * np.exp(w * dt)) @ V_inv
            return np.clip(P.real, 0.0, None)
        return np.clip(linalg.expm(self.F * dt), 0.0, None)

    def apply(self, x: np.ndarray, dt: float) -> np.ndarray:
        if dt <= 0:
            return x.copy()
        if dt != self.window and (eigen := self._eigen) is not None:
            w, V, V_inv = eigen
            return np.clip((V @ (np.exp(w * dt) * (V_inv @ x))).real, 0.0, None)
        return np.clip(self.propagator(dt) @ x, 0.0, None)


@dc.dataclass(frozen=True)
class PopulationState:
    masses: np.ndarray
    time: float


def flow(state: PopulationState, dt: float, F: FlowMatrix) -> PopulationState:
    """Deterministic evolution over dt with no jumps."""
    if dt < 0:
        raise ValueError(f"flow needs dt >= 0, got {dt}")
    return PopulationState(masses=F.apply(np.asarray(state.masses, dtype=np.float64), dt), time=state.time + dt)


@dc.dataclass
class PathResult:
    states: np.ndarray  # (n_eval, K)
    events: list[Event]
    proposals: int
    accepted: int
    extinct: bool

    @property
    def acceptance(self) -> float:
        return self.accepted / self.proposals if self.proposals else 1.0


def _check_eval_times(eval_times, T: float) -> np.ndarray:
    eval_times = np.asarray(eval_times, dtype=np.float64)
    if eval_times.ndim != 1:
        raise ValueError("eval_times must be one-dimensional")
    if np.any(eval_times < 0) or np.any(eval_times > T) or np.any(np.diff(eval_times) < 0):
        raise ValueError(f"eval_times must be sorted and inside [0, {T}]")
    return eval_times


def simulate_path(
    spec: ModelSpec,
    mu0,
    T: float,
    eval_times,
    rng: np.random.Generator,
    flow_matrix: FlowMatrix | None = None,
    event_cap: int = DEFAULT_EVENT_CAP,
) -> PathResult:
    """One exact path from mu0 over [0, T], sampled at eval_times."""
    x = np.array(mu0, dtype=np.float64)
    if x.shape != (spec.K,) or np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError(f"mu0 must be a finite non-negative length-{spec.K} vector")
    if not T >= 0:
        raise ValueError(f"horizon must be non-negative, got {T}")
    eval_times = _check_eval_times(eval_times, T)
    fm = FlowMatrix.from_spec(spec) if flow_matrix is None else flow_matrix
    states = np.zeros((eval_times.size, spec.K))
    events: list[Event] = []
    proposals = 0
    k = 0  # next eval index
    t = 0.0
    extinct = False

    def advance(x: np.ndarray, t: float, t_new: float) -> np.ndarray:
        nonlocal k
        while k < eval_times.size and eval_times[k] <= t_new:
            states[k] = fm.apply(x, eval_times[k] - t)
            k += 1
        return fm.apply(x, t_new - t)

    while True:
        total = x.sum()
        if total < EXTINCTION_MASS:
            extinct = True
            break
        if fm.lam_max == 0:
            x = advance(x, t, T)
            break
        bound = fm.bound_factor * total
        window_end = min(t + fm.window, T)
        t_prop = t + rng.exponential(1.0 / bound)
        if t_prop > window_end:
            x = advance(x, t, window_end)
            t = window_end
            if t >= T:
                break
            continue
        x = advance(x, t, t_prop)
        t = t_prop
        proposals += 1
        intensities = np.concatenate([x * fm.rates_local, x * fm.rates_nonlocal])
        actual = intensities.sum()
        if actual > bound * (1.0 + 1e-9):
            raise RuntimeError(f"thinning bound {bound:.6g} below intensity {actual:.6g}")
        u = rng.random() * bound
        if u >= actual:
            continue
        index = min(int(np.searchsorted(np.cumsum(intensities), u, side="right")), 2 * spec.K - 1)
        if index < spec.K:
            theta = spec.piL[index].sample_plain(rng)
            x[index] += theta
            events.append(Event(t, index, "local", theta))
        else:
            i = index - spec.K
            theta = spec.piNL[i].sample_plain(rng)
            x += theta * spec.pi[i]
            events.append(Event(t, i, "nonlocal", theta))
        if len(events) > event_cap:
            raise EventCapExceeded(f"more than {event_cap} jumps before t={t:.6g} (horizon {T})")
    # extinct paths leave the remaining rows at zero
    log.debug(f"{len(events)=} {proposals=} {extinct=}")
    return PathResult(states=states, events=events, proposals=proposals, accepted=len(events), extinct=extinct)


@dc.dataclass
class TrajectoryBundle:
    """Ensemble of paths sampled at common evaluation times."""

    eval_times: np.ndarray
    states: np.ndarray  # (n_paths, n_eval, K)
    mu0: np.ndarray
    master_seed: int
    event_counts: np.ndarray
    proposals: np.ndarray
    events: list[list[Event]] | None = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def time_index(self, t: float) -> int:
        matches = np.flatnonzero(np.isclose(self.eval_times, t, rtol=0, atol=1e-12))
        if matches.size == 0:
            raise ValueError(f"{t} is not an evaluation time of this bundle")
        return int(matches[0])

    def pairing(self, f) -> np.ndarray:
        """⟨f, X_t⟩ per path and eval time, shape (n_paths, n_eval)."""
        return self.states @ np.asarray(f, dtype=np.float64)

    def mean_vector(self, t: float) -> np.ndarray:
        return self.states[:, self.time_index(t), :].mean(axis=0)

    def to_frame(self) -> pd.DataFrame:
        n_paths, n_eval, K = self.states.shape
        frame = pd.DataFrame(self.states.reshape(n_paths * n_eval, K), columns=[f"X_{k + 1}" for k in range(K)])
        frame.insert(0, "t", np.tile(self.eval_times, n_paths))
        frame.insert(0, "path_id", np.repeat(np.arange(n_paths), n_eval))
        return frame


def ensemble(
    spec: ModelSpec,
    mu0,
    T: float,
    eval_times,
    n_paths: int,
    master_seed: int,
    flow_matrix: FlowMatrix | None = None,
    threads: int = 1,
    event_cap: int = DEFAULT_EVENT_CAP,
    keep_events: bool = False,
    progress: bool = False,
) -> TrajectoryBundle:
    """n_paths independent paths, path k drawing from stream (master_seed, k)."""
    if n_paths < 1:
        raise ValueError(f"need at least one path, got {n_paths}")
    eval_times = _check_eval_times(eval_times, T)
    fm = FlowMatrix.from_spec(spec) if flow_matrix is None else flow_matrix

    def one(index: int) -> PathResult:
        return simulate_path(spec, mu0, T, eval_times, streams.path_rng(master_seed, index), fm, event_cap)

    results = streams.parallel_map(one, n_paths, threads=threads, desc="forward", progress=progress)
    bundle = TrajectoryBundle(
        eval_times=eval_times,
        states=np.stack([r.states for r in results]),
        mu0=np.asarray(mu0, dtype=np.float64),
        master_seed=master_seed,
        event_counts=np.array([r.accepted for r in results]),
        proposals=np.array([r.proposals for r in results]),
        events=[r.events for r in results] if keep_events else None,
    )
    log.info(f"{n_paths=} mean events={bundle.event_counts.mean():.3g} extinct={sum(r.extinct for r in results)}")
    return bundle

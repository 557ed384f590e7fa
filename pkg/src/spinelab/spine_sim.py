"""Spine decomposition under the h-martingale change of measure.

Under the reweighted law the process is a copy of X started from μ plus
immigrants along a spine. The spine is a continuous-time chain with
off-diagonal rates γ(i)p_ij u_j/u_i. While it sits in state i, immigrants of
size-biased mass arrive at rate m^L(i) and start at θδ_i. Each spine jump
i→j (a revival) brings an immigrant with initial measure Θp(i,·), where Θ is
0 with probability c(i)/γ(i) and otherwise size-biased from Π^NL(i).

Every realization draws from a single stream in this order: spine, revival
marks, immigration times, immigration masses, root path, immigrant paths by
birth time.
"""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import dataclasses as dc
import logging
import math
from collections.abc import Callable
from typing import Any, NamedTuple

import numpy as np
import pandas as pd

from spinelab import streams
from spinelab.estimators import Estimate, batch_means
from spinelab.forward_sim import DEFAULT_EVENT_CAP, FlowMatrix, simulate_path
from spinelab.model import ModelSpec, mean_local
from spinelab.spectral import SpectralData, matrix_exponential, spine_transition

log = logging.getLogger("spine_sim")

BIRTH_AT_HORIZON = 1e-12
MEAN_FIELD_MASS = 1e4  # heavier immigrants follow the mean flow
GL_ORDER = 16
GL_PANELS = 8

DISCONTINUOUS = "discontinuous"
REVIVAL = "revival"


class Segment(NamedTuple):
    state: int
    start: float
    end: float


class Revival(NamedTuple):
    time: float
    from_state: int
    to_state: int
    mark: float  # nan until marks are sampled


@dc.dataclass(frozen=True)
class ImmigrationEvent:
    time: float
    kind: str
    state: int  # spine state at birth; the from-state for revivals
    mass: float
    initial: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {
            "time": self.time,
            "kind": self.kind,
            "state": self.state,
            "mass": self.mass,
            "initial": self.initial.tolist(),
        }


@dc.dataclass(frozen=True)
class SpinePath:
    initial: int
    segments: tuple[Segment, ...]
    revivals: tuple[Revival, ...]
    T: float

    def state_at(self, t: float) -> int:
        """Spine state at time t (right-continuous)."""
        if not 0 <= t <= self.T:
            raise ValueError(f"{t} is outside [0, {self.T}]")
        for seg in self.segments:
            if seg.start <= t < seg.end:
                return seg.state
        return self.segments[-1].state

    def occupation(self, K: int) -> np.ndarray:
        """Time spent in each state on [0, T]."""
        out = np.zeros(K)
        for seg in self.segments:
            out[seg.state] += seg.end - seg.start
        return out

    def with_marks(self, events: list[ImmigrationEvent]) -> "SpinePath":
        marks = [ev.mass for ev in events if ev.kind == REVIVAL]
        if len(marks) != len(self.revivals):
            raise ValueError("events do not match this spine's revivals")
        revivals = tuple(r._replace(mark=m) for r, m in zip(self.revivals, marks, strict=True))
        return dc.replace(self, revivals=revivals)

    def to_dict(self) -> dict[str, Any]:
        return {
            "initial": self.initial,
            "T": self.T,
            "segments": [list(seg) for seg in self.segments],
            "revivals": [r._asdict() for r in self.revivals],
        }


def _draw(probabilities: np.ndarray, rng: np.random.Generator) -> int:
    index = int(np.searchsorted(np.cumsum(probabilities), rng.random() * probabilities.sum(), side="right"))
    return min(index, probabilities.size - 1)


def initial_type_law(spectral: SpectralData, mu) -> np.ndarray:
    """h∘μ/⟨h,μ⟩, the law of the spine's starting type.

    >>> from spinelab.model import spec_from_dict
    >>> from spinelab.spectral import analyze
    >>> spec = spec_from_dict({"K": 2, "a": [0, 0], "c": [0, 0], "pi": [[0, 1], [1, 0]],
    ...     "piL": [None, None], "piNL": [{"kind": "atoms", "atoms": [[1, 1]]}] * 2})
    >>> initial_type_law(analyze(spec), [3.0, 1.0]).round(12).tolist()
    [0.75, 0.25]
    """
    weights = spectral.h * np.asarray(mu, dtype=np.float64)
    total = weights.sum()
    if not total > 0:
        raise ValueError("the spine needs <h, mu> > 0")
    return weights / total


def spine_marginal(spectral: SpectralData, mu, t: float) -> np.ndarray:
    """Law of the spine state at time t."""
    return initial_type_law(spectral, mu) @ spine_transition(spectral, t)


def sample_spine(spectral: SpectralData, mu, T: float, rng: np.random.Generator) -> SpinePath:
    """Spine chain on [0, T]; revival marks are left as nan."""
    law = initial_type_law(spectral, mu)
    state = _draw(law, rng)
    initial = state
    segments, revivals = [], []
    t = 0.0
    while True:
        rate = spectral.q[state]
        if rate <= 0:
            segments.append(Segment(state, t, T))
            break
        t_next = t + rng.exponential(1.0 / rate)
        if t_next >= T:
            segments.append(Segment(state, t, T))
            break
        segments.append(Segment(state, t, t_next))
        to_state = _draw(spectral.pi_h[state], rng)
        revivals.append(Revival(t_next, state, to_state, math.nan))
        state, t = to_state, t_next
    return SpinePath(initial, tuple(segments), tuple(revivals), T)


def sample_eta(spec: ModelSpec, i: int, rng: np.random.Generator) -> float:
    """Revival mark for a jump out of type i: 0 w.p. c(i)/γ(i), else size-biased from Π^NL(i)."""
    gam = spec.gamma[i]
    if not gam > 0:
        raise ValueError(f"type {i} has gamma = 0 and cannot revive")
    if rng.random() < spec.c[i] / gam or spec.piNL[i] is None:
        return 0.0
    return spec.piNL[i].sample_size_biased(rng)


def sample_immigration(spec: ModelSpec, spine: SpinePath, rng: np.random.Generator) -> list[ImmigrationEvent]:
    """Revival and size-biased discontinuous immigrants along the spine, in time order."""
    K = spec.K
    events = []
    for rev in spine.revivals:
        mark = sample_eta(spec, rev.from_state, rng)
        row = spec.pi[rev.from_state]
        with np.errstate(invalid="ignore"):
            initial = np.where(row > 0, mark * row, 0.0)
        events.append(ImmigrationEvent(rev.time, REVIVAL, rev.from_state, mark, initial))
    m_local = mean_local(spec)
    births = []
    for seg in spine.segments:
        rate = m_local[seg.state]
        length = seg.end - seg.start
        if rate <= 0 or length <= 0:
            continue
        count = rng.poisson(rate * length)
        births.extend((float(s), seg.state) for s in np.sort(seg.start + length * rng.random(count)))
    for time, state in births:
        theta = spec.piL[state].sample_size_biased(rng)
        initial = np.zeros(K)
        initial[state] = theta
        events.append(ImmigrationEvent(time, DISCONTINUOUS, state, theta, initial))
    events.sort(key=lambda ev: ev.time)
    return events


@dc.dataclass
class SpineRealization:
    spine: SpinePath
    events: list[ImmigrationEvent]

    def to_record(self, path_id: int) -> dict[str, Any]:
        return {"path_id": path_id, "spine": self.spine.to_dict(), "events": [ev.to_dict() for ev in self.events]}


def realize_spine(spec: ModelSpec, spectral: SpectralData, mu, T: float, rng: np.random.Generator) -> SpineRealization:
    spine = sample_spine(spectral, mu, T, rng)
    events = sample_immigration(spec, spine, rng)
    return SpineRealization(spine.with_marks(events), events)


@dc.dataclass
class GammaRealization:
    spine: SpinePath
    events: list[ImmigrationEvent]
    eval_times: np.ndarray
    root: np.ndarray  # (n_eval, K)
    gamma: np.ndarray  # (n_eval, K)
    simulated: int
    mean_field: int = 0


def assemble_gamma(
    spec: ModelSpec,
    spectral: SpectralData,
    mu,
    T: float,
    eval_times,
    rng: np.random.Generator,
    flow_matrix: FlowMatrix | None = None,
    event_cap: int = DEFAULT_EVENT_CAP,
    mean_field_mass: float = MEAN_FIELD_MASS,
) -> GammaRealization:
    """Γ on eval_times: a copy of X from μ plus every immigrant's descendants.

    Descendants of an immigrant heavier than `mean_field_mass` are replaced by
    their mean M(t−s)ᵀ·initial. By the branching property the relative error
    of that replacement vanishes as the mass grows.
    """
    eval_times = np.asarray(eval_times, dtype=np.float64)
    fm = FlowMatrix.from_spec(spec) if flow_matrix is None else flow_matrix
    realization = realize_spine(spec, spectral, mu, T, rng)
    root = simulate_path(spec, mu, T, eval_times, rng, fm, event_cap).states
    gamma = root.copy()
    simulated = mean_field = 0
    for ev in realization.events:
        if ev.mass == 0:
            continue
        after = eval_times >= ev.time
        if not after.any():
            continue
        if not math.isfinite(ev.mass):
            gamma[np.ix_(after, ev.initial > 0)] = math.inf
        elif T - ev.time <= BIRTH_AT_HORIZON:
            gamma[after] += ev.initial
        elif ev.mass > mean_field_mass:
            for n in np.flatnonzero(after):
                gamma[n] += spectral.M(eval_times[n] - ev.time).T @ ev.initial
            mean_field += 1
        else:
            local = np.maximum(eval_times[after] - ev.time, 0.0)
            path = simulate_path(spec, ev.initial, T - ev.time, local, rng, fm, event_cap)
            gamma[after] += path.states
            simulated += 1
    return GammaRealization(realization.spine, realization.events, eval_times, root, gamma, simulated, mean_field)


def conditional_mean_given_G(spectral: SpectralData, events: list[ImmigrationEvent], mu, f, t: float) -> float:
    """E[⟨f, Γ_t⟩ | spine and immigration] = ⟨e^{At}f, μ⟩ + Σ_{s≤t} ⟨e^{A(t−s)}f, initial_s⟩."""
    f = np.asarray(f, dtype=np.float64)
    value = float(spectral.M(t) @ f @ np.asarray(mu, dtype=np.float64))
    for ev in events:
        if ev.time > t or ev.mass == 0:
            continue
        if not math.isfinite(ev.mass):
            return math.inf
        value += float(spectral.M(t - ev.time) @ f @ ev.initial)
    return value


@dc.dataclass
class GammaBundle:
    eval_times: np.ndarray
    gamma: np.ndarray  # (n_paths, n_eval, K)
    mu: np.ndarray
    master_seed: int
    realizations: list[GammaRealization] | None = None

    @property
    def n_paths(self) -> int:
        return self.gamma.shape[0]

    def time_index(self, t: float) -> int:
        matches = np.flatnonzero(np.isclose(self.eval_times, t, rtol=0, atol=1e-12))
        if matches.size == 0:
            raise ValueError(f"{t} is not an evaluation time of this bundle")
        return int(matches[0])

    def pairing(self, f) -> np.ndarray:
        """⟨f, Γ_t⟩ per path and eval time, with 0·∞ read as 0."""
        f = np.asarray(f, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            return np.where(f != 0, self.gamma * f, 0.0).sum(axis=-1)

    def to_frame(self) -> pd.DataFrame:
        n_paths, n_eval, K = self.gamma.shape
        frame = pd.DataFrame(self.gamma.reshape(n_paths * n_eval, K), columns=[f"Gamma_{k + 1}" for k in range(K)])
        frame.insert(0, "t", np.tile(self.eval_times, n_paths))
        frame.insert(0, "path_id", np.repeat(np.arange(n_paths), n_eval))
        return frame

    def event_records(self) -> list[dict[str, Any]]:
        if self.realizations is None:
            return []
        return [
            SpineRealization(r.spine, r.events).to_record(path_id) for path_id, r in enumerate(self.realizations)
        ]


def spine_ensemble(
    spec: ModelSpec,
    spectral: SpectralData,
    mu,
    T: float,
    n_paths: int,
    master_seed: int,
    threads: int = 1,
    progress: bool = False,
) -> list[SpineRealization]:
    """Spines with their immigration, stream k for path k (no trajectories)."""

    def one(index: int) -> SpineRealization:
        return realize_spine(spec, spectral, mu, T, streams.path_rng(master_seed, index))

    return streams.parallel_map(one, n_paths, threads=threads, desc="spines", progress=progress)


def gamma_ensemble(
    spec: ModelSpec,
    spectral: SpectralData,
    mu,
    T: float,
    eval_times,
    n_paths: int,
    master_seed: int,
    flow_matrix: FlowMatrix | None = None,
    threads: int = 1,
    event_cap: int = DEFAULT_EVENT_CAP,
    keep_realizations: bool = False,
    progress: bool = False,
) -> GammaBundle:
    if n_paths < 1:
        raise ValueError(f"need at least one path, got {n_paths}")
    eval_times = np.asarray(eval_times, dtype=np.float64)
    fm = FlowMatrix.from_spec(spec) if flow_matrix is None else flow_matrix

    def one(index: int) -> GammaRealization:
        rng = streams.path_rng(master_seed, index)
        return assemble_gamma(spec, spectral, mu, T, eval_times, rng, fm, event_cap)

    results = streams.parallel_map(one, n_paths, threads=threads, desc="spine", progress=progress)
    log.info(
        f"{n_paths=} immigrants simulated={sum(r.simulated for r in results)}"
        f" mean-field={sum(r.mean_field for r in results)}"
    )
    return GammaBundle(
        eval_times=eval_times,
        gamma=np.stack([r.gamma for r in results]),
        mu=np.asarray(mu, dtype=np.float64),
        master_seed=master_seed,
        realizations=results if keep_realizations else None,
    )


def _gauss_legendre(fn: Callable[[float], np.ndarray | float], a: float, b: float) -> np.ndarray | float:
    """Composite Gauss-Legendre rule on [a, b]."""
    if b <= a:
        return 0.0 * np.asarray(fn(a))
    nodes, weights = np.polynomial.legendre.leggauss(GL_ORDER)
    edges = np.linspace(a, b, GL_PANELS + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:], strict=True):
        half = 0.5 * (hi - lo)
        for x, w in zip(nodes, weights, strict=True):
            total = total + w * half * np.asarray(fn(lo + half * (x + 1.0)))
    return total


def _test_values(fn: Callable, s: float, K: int) -> np.ndarray:
    i = np.arange(K)[:, None]
    j = np.arange(K)[None, :]
    return np.broadcast_to(np.asarray(fn(s, i, j), dtype=np.float64), (K, K))


def _revival_kernel(spectral: SpectralData, fn: Callable, s: float) -> np.ndarray:
    """k(s, i) = q(i)Σ_j fn(s,i,j)π^h(i,j), the intensity of fn-weighted revivals."""
    return spectral.q * np.sum(_test_values(fn, s, spectral.K) * spectral.pi_h, axis=1)


def revival_sum_first_moment(spectral: SpectralData, mu, fn: Callable, t: float) -> float:
    """E Σ_{τ_i ≤ t} fn(τ_i, ξ_{τ_i−}, ξ_{τ_i}) by quadrature over the spine marginal."""
    nu0 = initial_type_law(spectral, mu)
    return float(_gauss_legendre(lambda s: nu0 @ spine_transition(spectral, s) @ _revival_kernel(spectral, fn, s), 0.0, t))


def revival_sum_second_moment(spectral: SpectralData, mu, fn: Callable, gn: Callable, t: float) -> float:
    """E[S_fn S_gn] where S_fn = Σ_{τ_i ≤ t} fn(τ_i, ξ_{τ_i−}, ξ_{τ_i})."""
    K = spectral.K
    nu0 = initial_type_law(spectral, mu)

    def same(s, _i, _j):
        return _test_values(fn, s, K) * _test_values(gn, s, K)

    def later(kernel_fn: Callable, s: float) -> np.ndarray:
        # G(s, y) = ∫_s^t (e^{Q(r−s)} k(r))(y) dr
        return np.asarray(
            _gauss_legendre(lambda r: spine_transition(spectral, r - s) @ _revival_kernel(spectral, kernel_fn, r), s, t)
        )

    def ordered(first: Callable, second: Callable) -> float:
        def integrand(s: float) -> float:
            G = later(second, s)
            weights = spectral.q * np.sum(_test_values(first, s, K) * spectral.pi_h * G[None, :], axis=1)
            return float(nu0 @ spine_transition(spectral, s) @ weights)

        return float(_gauss_legendre(integrand, 0.0, t))

    diagonal = revival_sum_first_moment(spectral, mu, same, t)
    return diagonal + ordered(fn, gn) + ordered(gn, fn)


def revival_count_target(spectral: SpectralData, mu, t: float) -> float:
    """Expected number of spine jumps by time t."""
    return revival_sum_first_moment(spectral, mu, lambda s, i, j: 1.0, t)


@dc.dataclass
class RevivalMoments:
    first: Estimate
    second: Estimate


def revival_sum_moments(
    spectral: SpectralData,
    spines: list[SpinePath],
    mu,
    fn: Callable,
    t: float,
    gn: Callable | None = None,
    min_batches: int = 30,
) -> RevivalMoments:
    """Monte Carlo first and second moments of revival sums against their quadrature targets."""
    gn = fn if gn is None else gn
    sums_f = np.empty(len(spines))
    sums_g = np.empty(len(spines))
    for k, spine in enumerate(spines):
        hits = [r for r in spine.revivals if r.time <= t]
        sums_f[k] = sum(float(np.asarray(fn(r.time, r.from_state, r.to_state))) for r in hits)
        sums_g[k] = sum(float(np.asarray(gn(r.time, r.from_state, r.to_state))) for r in hits)
    first = batch_means(sums_f, min_batches, revival_sum_first_moment(spectral, mu, fn, t))
    second = batch_means(sums_f * sums_g, min_batches, revival_sum_second_moment(spectral, mu, fn, gn, t))
    log.info(f"revival moments z=({first.z_score}, {second.z_score})")
    return RevivalMoments(first, second)


@dc.dataclass
class MarksReport:
    per_path: np.ndarray
    burn_in: float
    n_marks: int

    @property
    def empty(self) -> bool:
        return self.per_path.size == 0

    def summary(self) -> dict[str, float]:
        if self.empty:
            return {"paths": 0, "marks": 0}
        return {
            "paths": int(self.per_path.size),
            "marks": self.n_marks,
            "median": float(np.median(self.per_path)),
            "q90": float(np.quantile(self.per_path, 0.9)),
            "q99": float(np.quantile(self.per_path, 0.99)),
        }


def spine_marks_diagnostic(
    realizations: list[SpineRealization], spectral: SpectralData, burn_in: float = 1.0
) -> MarksReport:
    """Per path, the largest log⁺(mark·weight)/s over immigrants born after burn_in.

    The weight is h(state) for discontinuous immigrants and π(state, h) for
    revivals. Bounded marks drive the statistic to 0 as the horizon grows.
    """
    per_path = []
    n_marks = 0
    for real in realizations:
        stats = []
        for ev in real.events:
            if ev.time <= burn_in or ev.mass == 0:
                continue
            weight = spectral.h[ev.state] if ev.kind == DISCONTINUOUS else spectral.pi_of_h[ev.state]
            stats.append(math.log(max(ev.mass * weight, 1.0)) / ev.time)
        if stats:
            per_path.append(max(stats))
            n_marks += len(stats)
    return MarksReport(np.array(per_path), burn_in, n_marks)


def occupation_target(spectral: SpectralData, mu, T: float) -> np.ndarray:
    """E[time spent in each state on [0, T]]."""
    nu0 = initial_type_law(spectral, mu)
    return np.asarray(_gauss_legendre(lambda s: nu0 @ matrix_exponential(spectral.Q_spine, s), 0.0, T))

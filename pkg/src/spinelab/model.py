"""Finite-type branching models and the jump measures they are built from.

A model has K types, a linear local rate `a`, a first-order non-local rate
`c`, an offspring displacement matrix `pi` (row stochastic, zero diagonal)
and, per type, optional local and non-local jump measures. The diffusion
coefficient is fixed to zero, which is what makes exact event-driven
simulation possible.

Two jump-measure families are supported: `Atoms`, a finite sum of point
masses, and `LogPareto`, whose normalized density is proportional to
θ⁻²(log θ)^{−β} on [e, ∞). The latter has a finite mean for β > 1 and a
finite θ log θ moment only for β > 2.
"""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import dataclasses as dc
import functools
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, ClassVar

import cachier  # https://pypi.org/project/cachier/
import numpy as np
from scipy import integrate

log = logging.getLogger("model")

ROW_SUM_TOL = 1e-12
QUAD_RTOL = 1e-10
LOG_FLOAT_MAX = 709.0  # log of the largest finite double, rounded down

SPEC_KEYS = frozenset({"K", "a", "c", "pi", "piL", "piNL"})
ATOMS_KEYS = frozenset({"kind", "atoms"})
LOGPARETO_KEYS = frozenset({"kind", "rate", "beta"})


def _quad(fn, lower: float, upper: float) -> float:
    value, _abserr = integrate.quad(
        fn, lower, upper, epsabs=1e-14, epsrel=QUAD_RTOL, limit=200
    )
    return value


@cachier.cachier(pickle_reload=False)
def logpareto_normalizer(beta: float) -> float:
    """Return Z = ∫_e^∞ θ⁻²(log θ)^{−β} dθ, integrated as ∫_1^∞ e^{−s}s^{−β} ds."""
    value = _quad(lambda s: math.exp(-s) * s**-beta, 1.0, math.inf)
    log.debug(f"{beta=} {value=}")
    return value


@dc.dataclass(frozen=True)
class Atoms:
    """Finite sum of point masses Σ r_k δ_{θ_k}.

    >>> jm = Atoms(((1.0, 1.0), (3.0, 1.0)))
    >>> jm.total_rate, jm.mean, jm.unbounded_support
    (2.0, 4.0, False)
    >>> round(Atoms(((math.e, 2.0),)).llogl_moment(1.0), 6)
    5.436564
    """

    atoms: tuple[tuple[float, float], ...]
    kind: ClassVar[str] = "atoms"

    def __post_init__(self) -> None:
        if not self.atoms:
            raise ValueError("Atoms needs at least one (size, rate) pair")
        cleaned = tuple((float(size), float(rate)) for size, rate in self.atoms)
        for size, rate in cleaned:
            if not (0 < size < math.inf and 0 < rate < math.inf):
                raise ValueError(f"atom ({size}, {rate}) needs finite positive size and rate")
        object.__setattr__(self, "atoms", cleaned)

    @functools.cached_property
    def sizes(self) -> np.ndarray:
        return np.array([size for size, _ in self.atoms])

    @functools.cached_property
    def rates(self) -> np.ndarray:
        return np.array([rate for _, rate in self.atoms])

    @functools.cached_property
    def _plain_cdf(self) -> np.ndarray:
        return np.cumsum(self.rates) / self.rates.sum()

    @functools.cached_property
    def _biased_cdf(self) -> np.ndarray:
        weights = self.sizes * self.rates
        return np.cumsum(weights) / weights.sum()

    @property
    def total_rate(self) -> float:
        return float(self.rates.sum())

    @property
    def mean(self) -> float:
        return float(self.sizes @ self.rates)

    @property
    def second_moment(self) -> float:
        return float(self.sizes**2 @ self.rates)

    @property
    def unbounded_support(self) -> bool:
        return False

    def llogl_moment(self, s: float) -> float:
        log_plus = np.log(np.maximum(s * self.sizes, 1.0))
        return float(np.sum(self.rates * self.sizes * log_plus))

    def sample_plain(self, rng: np.random.Generator) -> float:
        index = int(np.searchsorted(self._plain_cdf, rng.random(), side="right"))
        return float(self.sizes[min(index, len(self.atoms) - 1)])

    def sample_size_biased(self, rng: np.random.Generator) -> float:
        index = int(np.searchsorted(self._biased_cdf, rng.random(), side="right"))
        return float(self.sizes[min(index, len(self.atoms) - 1)])

    def compensated_laplace(self, lam: float) -> float:
        """Return ∫(e^{−λθ}−1+λθ)Π(dθ)."""
        x = lam * self.sizes
        return float(np.sum(self.rates * (np.expm1(-x) + x)))

    def laplace_deficit(self, lam: float) -> float:
        """Return ∫(1−e^{−λθ})Π(dθ)."""
        return float(np.sum(self.rates * -np.expm1(-lam * self.sizes)))

    def weighted_deficit(self, lam: float) -> float:
        """Return ∫θ(1−e^{−λθ})Π(dθ)."""
        return float(np.sum(self.rates * self.sizes * -np.expm1(-lam * self.sizes)))

    def weighted_laplace(self, lam: float) -> float:
        """Return ∫θe^{−λθ}Π(dθ)."""
        return float(np.sum(self.rates * self.sizes * np.exp(-lam * self.sizes)))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "atoms": [list(pair) for pair in self.atoms]}


@dc.dataclass(frozen=True)
class LogPareto:
    """Measure with total rate `total_rate` and density ∝ θ⁻²(log θ)^{−β} on [e, ∞).

    All integrals are taken in s = log θ, where the normalized density is
    e^{−s}s^{−β}/Z on [1, ∞).
    """

    total_rate: float
    beta: float
    normalizer: float = dc.field(init=False, repr=False, compare=False)
    kind: ClassVar[str] = "logpareto"

    def __post_init__(self) -> None:
        if not 0 < self.total_rate < math.inf:
            raise ValueError(f"LogPareto rate must be finite and positive, got {self.total_rate}")
        if not 1 < self.beta < math.inf:
            raise ValueError(f"LogPareto needs beta > 1 for a finite mean, got {self.beta}")
        object.__setattr__(self, "total_rate", float(self.total_rate))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "normalizer", logpareto_normalizer(self.beta))

    @property
    def _scale(self) -> float:
        return self.total_rate / self.normalizer

    @property
    def mean(self) -> float:
        return self._scale / (self.beta - 1.0)

    @property
    def second_moment(self) -> float:
        return math.inf

    @property
    def unbounded_support(self) -> bool:
        return True

    def llogl_moment(self, s: float) -> float:
        """Return ∫θ log⁺(sθ)Π(dθ); +∞ whenever β ≤ 2."""
        if self.beta <= 2.0:
            return math.inf
        beta = self.beta
        log_s = math.log(s)
        u0 = max(1.0, -log_s)
        integral = u0 ** (2.0 - beta) / (beta - 2.0) + log_s * u0 ** (1.0 - beta) / (beta - 1.0)
        return self._scale * integral

    def sample_plain(self, rng: np.random.Generator) -> float:
        # proposal log θ = 1 + Exp(1), accepted with probability (log θ)^{−β}
        while True:
            s = 1.0 + rng.exponential()
            if rng.random() < s**-self.beta:
                return math.exp(min(s, LOG_FLOAT_MAX))

    def sample_size_biased(self, rng: np.random.Generator) -> float:
        # log θ has density ∝ s^{−β} on [1, ∞): inverse CDF, taken in logs
        log_s = -math.log1p(-rng.random()) / (self.beta - 1.0)
        if log_s > math.log(LOG_FLOAT_MAX):
            return math.inf
        return math.exp(math.exp(log_s))

    def laplace_deficit(self, lam: float) -> float:
        if lam <= 0:
            return 0.0
        value = _quad(
            lambda u: -math.expm1(-lam * math.exp(min(u, LOG_FLOAT_MAX)))
            * math.exp(-u)
            * u**-self.beta,
            1.0,
            math.inf,
        )
        return self._scale * value

    def compensated_laplace(self, lam: float) -> float:
        if lam <= 0:
            return 0.0
        return lam * self.mean - self.laplace_deficit(lam)

    def weighted_laplace(self, lam: float) -> float:
        if lam <= 0:
            return self.mean
        # e^{−λθ} is negligible once log θ passes log(1/λ) by a few units
        cut = max(1.0, -math.log(lam)) + 4.0
        fn = lambda u: math.exp(-lam * math.exp(min(u, LOG_FLOAT_MAX))) * u**-self.beta  # noqa: E731
        return self._scale * (_quad(fn, 1.0, cut) + _quad(fn, cut, math.inf))

    def weighted_deficit(self, lam: float) -> float:
        return max(self.mean - self.weighted_laplace(lam), 0.0)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "rate": self.total_rate, "beta": self.beta}


JumpMeasure = Atoms | LogPareto


def sample_plain(jm: JumpMeasure, rng: np.random.Generator) -> float:
    """Draw θ from jm normalized by its total rate."""
    return jm.sample_plain(rng)


def sample_size_biased(jm: JumpMeasure, rng: np.random.Generator) -> float:
    """Draw θ from θΠ(dθ)/mean."""
    if not jm.mean > 0:
        raise ValueError("size-biased sampling needs a positive mean")
    return jm.sample_size_biased(rng)


def llogl_moment(jm: JumpMeasure, s: float) -> float:
    """Return ∫θ log⁺(sθ)Π(dθ), exactly +∞ when it diverges."""
    return jm.llogl_moment(s)


def strongly_connected(adjacency: np.ndarray) -> bool:
    """Return True when every node reaches every other node.

    >>> strongly_connected(np.array([[0, 1], [1, 0]]))
    True
    >>> strongly_connected(np.array([[0, 1], [0, 0]]))
    False
    """
    K = adjacency.shape[0]
    reach = (np.asarray(adjacency) != 0) | np.eye(K, dtype=bool)
    for _ in range(max(1, math.ceil(math.log2(max(K, 2))))):
        reach = (reach.astype(np.int64) @ reach.astype(np.int64)) > 0
    return bool(reach.all())


@dc.dataclass(frozen=True, eq=False)
class ModelSpec:
    """A K-type branching model with b ≡ 0."""

    K: int
    a: np.ndarray
    c: np.ndarray
    pi: np.ndarray
    piL: tuple[JumpMeasure | None, ...]
    piNL: tuple[JumpMeasure | None, ...]

    def __post_init__(self) -> None:
        K = self.K
        if not isinstance(K, int) or K < 1:
            raise ValueError(f"K must be a positive integer, got {K!r}")
        for name in ("a", "c"):
            vec = np.array(getattr(self, name), dtype=np.float64)
            if vec.shape != (K,):
                raise ValueError(f"{name} must have length {K}, got shape {vec.shape}")
            vec.setflags(write=False)
            object.__setattr__(self, name, vec)
        pi = np.array(self.pi, dtype=np.float64)
        if pi.shape != (K, K):
            raise ValueError(f"pi must be {K}x{K}, got shape {pi.shape}")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)
        for name in ("piL", "piNL"):
            measures = tuple(getattr(self, name))
            if len(measures) != K:
                raise ValueError(f"{name} must list {K} entries, got {len(measures)}")
            object.__setattr__(self, name, measures)

    @functools.cached_property
    def gamma(self) -> np.ndarray:
        """γ(i) = c(i) + ∫θΠ^NL(i,dθ)."""
        gam = self.c + mean_nonlocal(self)
        gam.setflags(write=False)
        return gam


def _means(measures: tuple[JumpMeasure | None, ...]) -> np.ndarray:
    return np.array([0.0 if jm is None else jm.mean for jm in measures])


def _rates(measures: tuple[JumpMeasure | None, ...]) -> np.ndarray:
    return np.array([0.0 if jm is None else jm.total_rate for jm in measures])


def mean_local(spec: ModelSpec) -> np.ndarray:
    """m^L(i) = ∫θΠ^L(i,dθ)."""
    return _means(spec.piL)


def mean_nonlocal(spec: ModelSpec) -> np.ndarray:
    return _means(spec.piNL)


def local_rates(spec: ModelSpec) -> np.ndarray:
    return _rates(spec.piL)


def nonlocal_rates(spec: ModelSpec) -> np.ndarray:
    return _rates(spec.piNL)


def jump_rates(spec: ModelSpec) -> np.ndarray:
    """λ_i = |Π^L(i)| + |Π^NL(i)|, the per-unit-mass event rate of type i."""
    return local_rates(spec) + nonlocal_rates(spec)


def gamma(spec: ModelSpec, i: int) -> float:
    """Return γ(i) = c(i) + mean(Π^NL(i)).

    >>> spec = spec_from_dict({"K": 2, "a": [0, 0], "c": [1, 0], "pi": [[0, 1], [1, 0]],
    ...     "piL": [None, None], "piNL": [{"kind": "atoms", "atoms": [[1, 1]]}, None]})
    >>> gamma(spec, 0), gamma(spec, 1)
    (2.0, 0.0)
    """
    return float(spec.gamma[i])


def unbounded_support_types(spec: ModelSpec) -> list[int]:
    """Types whose local measure, or non-local measure on {γ > 0}, reaches +∞."""
    out = []
    for i in range(spec.K):
        local, nonlocal_ = spec.piL[i], spec.piNL[i]
        if (local is not None and local.unbounded_support) or (
            spec.gamma[i] > 0 and nonlocal_ is not None and nonlocal_.unbounded_support
        ):
            out.append(i)
    return out


def llogl_reduced_finite(spec: ModelSpec) -> bool:
    """Per-type test ∫r log⁺r Π^L(i,dr) + ∫r log⁺r Π^NL(i,dr) < ∞ for all i."""
    return all(
        math.isfinite(jm.llogl_moment(1.0))
        for jm in (*spec.piL, *spec.piNL)
        if jm is not None
    )


@dc.dataclass
class ValidationReport:
    violations: list[str]
    gamma: np.ndarray

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_spec(spec: ModelSpec) -> ValidationReport:
    """List every violated model invariant; an empty list means valid.

    >>> spec = spec_from_dict({"K": 2, "a": [0, 0], "c": [0, 0], "pi": [[0, 1], [1, 0]],
    ...     "piL": [None, None], "piNL": [{"kind": "atoms", "atoms": [[1, 1]]}] * 2})
    >>> report = validate_spec(spec)
    >>> report.ok, report.gamma.tolist()
    (True, [1.0, 1.0])
    """
    violations = []
    pi = spec.pi
    if not np.all(np.isfinite(spec.a)):
        violations.append("a must be finite")
    if np.any(spec.c < 0) or not np.all(np.isfinite(spec.c)):
        violations.append("c must be finite and non-negative")
    if np.any(pi < 0):
        violations.append("pi has negative entries")
    bad_rows = np.flatnonzero(np.abs(pi.sum(axis=1) - 1.0) > ROW_SUM_TOL)
    if bad_rows.size:
        violations.append(f"pi rows {bad_rows.tolist()} do not sum to 1")
    if np.any(np.diag(pi) != 0):
        violations.append("pi has a nonzero diagonal")
    for name, measures in (("piL", spec.piL), ("piNL", spec.piNL)):
        for i, jm in enumerate(measures):
            if jm is not None and not (math.isfinite(jm.total_rate) and math.isfinite(jm.mean)):
                violations.append(f"{name}[{i}] needs finite rate and mean")
    gam = spec.gamma
    if not np.any(gam > 0):
        violations.append("no non-local activity: gamma is zero for every type")
    elif not strongly_connected(gam[:, None] * pi > 0):
        violations.append("mean matrix A is reducible")
    if violations:
        log.warning(f"{violations=}")
    return ValidationReport(violations=violations, gamma=np.array(gam))


def jump_from_dict(data: dict[str, Any] | None) -> JumpMeasure | None:
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ValueError(f"jump measure must be an object or null, got {data!r}")
    kind = data.get("kind")
    if kind == Atoms.kind:
        allowed = ATOMS_KEYS
    elif kind == LogPareto.kind:
        allowed = LOGPARETO_KEYS
    else:
        raise ValueError(f"unknown jump measure kind {kind!r}")
    if unknown := set(data) - allowed:
        raise ValueError(f"unknown keys in {kind} measure: {sorted(unknown)}")
    if missing := allowed - set(data):
        raise ValueError(f"missing keys in {kind} measure: {sorted(missing)}")
    try:
        if kind == Atoms.kind:
            return Atoms(tuple((float(size), float(rate)) for size, rate in data["atoms"]))
        return LogPareto(float(data["rate"]), float(data["beta"]))
    except TypeError as err:
        raise ValueError(f"malformed {kind} measure {data!r}: {err}") from err


def spec_from_dict(data: dict[str, Any]) -> ModelSpec:
    """Build a ModelSpec from the JSON model-file layout; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ValueError(f"model must be a JSON object, got {type(data).__name__}")
    if unknown := set(data) - SPEC_KEYS:
        raise ValueError(f"unknown keys in model: {sorted(unknown)}")
    if missing := SPEC_KEYS - set(data):
        raise ValueError(f"missing keys in model: {sorted(missing)}")
    K = data["K"]
    if isinstance(K, bool) or not isinstance(K, int):
        raise ValueError(f"K must be an integer, got {K!r}")
    for key in ("a", "c", "pi", "piL", "piNL"):
        if not isinstance(data[key], list):
            raise ValueError(f"{key} must be a list, got {data[key]!r}")
    try:
        return ModelSpec(
            K=K,
            a=np.asarray(data["a"], dtype=np.float64),
            c=np.asarray(data["c"], dtype=np.float64),
            pi=np.asarray(data["pi"], dtype=np.float64),
            piL=tuple(jump_from_dict(jm) for jm in data["piL"]),
            piNL=tuple(jump_from_dict(jm) for jm in data["piNL"]),
        )
    except TypeError as err:
        raise ValueError(f"malformed model: {err}") from err


def spec_to_dict(spec: ModelSpec) -> dict[str, Any]:
    return {
        "K": spec.K,
        "a": spec.a.tolist(),
        "c": spec.c.tolist(),
        "pi": spec.pi.tolist(),
        "piL": [None if jm is None else jm.to_dict() for jm in spec.piL],
        "piNL": [None if jm is None else jm.to_dict() for jm in spec.piNL],
    }


def spec_hash(spec: ModelSpec) -> str:
    """Return the sha256 of the canonical JSON form of the model."""
    canonical = json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_spec(path: Path) -> ModelSpec:
    """Read, parse and validate a JSON model file."""
    path = Path(path)
    spec = spec_from_dict(json.loads(path.read_text(encoding="utf-8")))
    report = validate_spec(spec)
    if not report.ok:
        raise ValueError(f"invalid model {path.name}: {'; '.join(report.violations)}")
    log.info(f"loaded {path.name} {spec.K=} gamma={report.gamma.tolist()}")
    return spec

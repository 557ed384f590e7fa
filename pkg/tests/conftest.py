"""Shared model fixtures."""

from pathlib import Path

import numpy as np
import pytest

from spinelab.model import ModelSpec, load_spec, spec_from_dict
from spinelab.spectral import analyze

SPECS = Path(__file__).resolve().parent.parent / "specs"


def atoms(*pairs):
    return {"kind": "atoms", "atoms": [list(pair) for pair in pairs]}


def make_spec(K=2, a=None, c=None, pi=None, piL=None, piNL=None) -> ModelSpec:
    """Symmetric two-type defaults; override any field."""
    return spec_from_dict(
        {
            "K": K,
            "a": [0.0] * K if a is None else a,
            "c": [0.0] * K if c is None else c,
            "pi": [[0.0, 1.0], [1.0, 0.0]] if pi is None else pi,
            "piL": [None] * K if piL is None else piL,
            "piNL": [None] * K if piNL is None else piNL,
        }
    )


def random_spec(rng: np.random.Generator, K: int) -> ModelSpec:
    """A dense, hence irreducible, random K-type model with Atoms measures."""
    pi = rng.uniform(0.1, 1.0, (K, K))
    np.fill_diagonal(pi, 0.0)
    pi /= pi.sum(axis=1, keepdims=True)

    def maybe_atoms():
        if rng.random() < 0.3:
            return None
        n = int(rng.integers(1, 4))
        return atoms(*zip(rng.uniform(0.1, 3.0, n), rng.uniform(0.1, 2.0, n), strict=True))

    return spec_from_dict(
        {
            "K": K,
            "a": rng.uniform(-0.5, 1.0, K).tolist(),
            "c": rng.uniform(0.05, 1.0, K).tolist(),
            "pi": pi.tolist(),
            "piL": [maybe_atoms() for _ in range(K)],
            "piNL": [maybe_atoms() for _ in range(K)],
        }
    )


@pytest.fixture(scope="session")
def specs_dir() -> Path:
    return SPECS


@pytest.fixture(scope="session")
def sym2() -> ModelSpec:
    return load_spec(SPECS / "sym2.json")


@pytest.fixture(scope="session")
def sym2atoms() -> ModelSpec:
    return load_spec(SPECS / "sym2atoms.json")


@pytest.fixture(scope="session")
def ring3() -> ModelSpec:
    return load_spec(SPECS / "ring3_atoms.json")


@pytest.fixture(scope="session")
def sym2_spectral(sym2):
    return analyze(sym2)


@pytest.fixture(scope="session")
def sym2atoms_spectral(sym2atoms):
    return analyze(sym2atoms)


@pytest.fixture(scope="session")
def ring3_spectral(ring3):
    return analyze(ring3)

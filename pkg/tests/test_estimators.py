import math

import numpy as np
import pytest

from spinelab import streams
from spinelab.estimators import Estimate, batch_means, difference


def test_batch_means_of_iid_normals():
    rng = np.random.default_rng(0)
    est = batch_means(rng.normal(1.0, 2.0, 40_000), target=1.0)
    assert est.n_samples == 40_000
    assert est.standard_error == pytest.approx(2.0 / 200.0, rel=0.25)
    assert abs(est.z_score) < 5


def test_batch_means_constant_samples_are_exact():
    est = batch_means(np.full(100, 3.0), target=3.0)
    assert est.standard_error == 0.0
    assert est.z_score == 0.0
    assert est.passes(0.0)
    assert not batch_means(np.full(100, 3.0), target=2.0).passes(1e6)


def test_batch_means_degenerate_inputs():
    with pytest.raises(ValueError):
        batch_means([])
    single = batch_means([2.0], target=1.0)
    assert single.standard_error == math.inf
    assert batch_means([1.0, math.inf]).standard_error == math.inf


def test_estimate_scores_and_differences():
    a = Estimate(1.0, 0.3, 100, target=1.2)
    b = Estimate(0.6, 0.4, 50)
    d = difference(a, b)
    assert d.value == pytest.approx(0.4)
    assert d.standard_error == pytest.approx(0.5)
    assert d.target == 0.0
    assert d.n_samples == 50
    assert a.z_score == pytest.approx(-2 / 3)
    assert a.passes(1.0)
    assert not a.passes(0.5)
    assert b.z_score is None
    assert b.passes(0.0)
    with pytest.raises(ValueError):
        Estimate(0.0, -1.0, 1)


def test_parallel_map_keeps_order():
    def fn(index):
        return index * index

    assert streams.parallel_map(fn, 50, threads=4) == [k * k for k in range(50)]
    assert streams.parallel_map(fn, 0, threads=4) == []


def test_path_rng_rejects_negative_seeds():
    with pytest.raises(ValueError):
        streams.path_rng(-1, 0)

import json
import math

import numpy as np
import pytest
from scipy import special

from conftest import atoms, make_spec
from spinelab.model import (
    Atoms,
    LogPareto,
    jump_rates,
    llogl_moment,
    llogl_reduced_finite,
    load_spec,
    logpareto_normalizer,
    mean_local,
    sample_size_biased,
    spec_from_dict,
    spec_hash,
    spec_to_dict,
    unbounded_support_types,
    validate_spec,
)


def test_logpareto_normalizer_matches_exponential_integral():
    assert logpareto_normalizer(3.0) == pytest.approx(special.expn(3, 1.0), rel=1e-9)
    assert logpareto_normalizer(2.0) == pytest.approx(special.expn(2, 1.0), rel=1e-9)


def test_logpareto_moments():
    jm = LogPareto(2.0, 3.0)
    assert jm.mean == pytest.approx(2.0 / special.expn(3, 1.0) / 2.0)
    assert jm.second_moment == math.inf
    assert jm.unbounded_support
    assert LogPareto(1.0, 1.5).llogl_moment(1.0) == math.inf
    assert math.isfinite(LogPareto(1.0, 3.0).llogl_moment(1.0))


def test_logpareto_llogl_closed_form_at_unit_scale():
    # ∫θ log θ Π(dθ) = scale ∫_1^∞ s^{1−β} ds = scale/(β−2)
    jm = LogPareto(1.0, 3.5)
    assert jm.llogl_moment(1.0) == pytest.approx(1.0 / jm.normalizer / 1.5, rel=1e-12)


def test_logpareto_rejects_infinite_mean():
    with pytest.raises(ValueError, match="beta > 1"):
        LogPareto(1.0, 1.0)


def test_logpareto_plain_sample_log_mean():
    jm = LogPareto(1.0, 3.0)
    rng = np.random.default_rng(11)
    s = np.log([jm.sample_plain(rng) for _ in range(20_000)])
    target = special.expn(2, 1.0) / special.expn(3, 1.0)
    se = s.std(ddof=1) / math.sqrt(s.size)
    assert s.min() >= 1.0
    assert abs(s.mean() - target) < 5 * se


def test_logpareto_size_biased_median():
    # log θ has density 2s^{-3} on [1, ∞) when β = 3, so its median is √2
    jm = LogPareto(1.0, 3.0)
    rng = np.random.default_rng(5)
    s = np.log([sample_size_biased(jm, rng) for _ in range(20_000)])
    assert np.median(s) == pytest.approx(math.sqrt(2.0), abs=0.03)


def test_logpareto_size_biased_overflow_is_infinite():
    class Fixed:
        def random(self):
            return 1.0 - 2.0**-53

    assert LogPareto(1.0, 1.5).sample_size_biased(Fixed()) == math.inf


def test_logpareto_weighted_laplace_is_derivative_of_deficit():
    jm = LogPareto(0.7, 2.5)
    lam, step = 0.3, 1e-4
    slope = (jm.laplace_deficit(lam + step) - jm.laplace_deficit(lam - step)) / (2 * step)
    assert slope == pytest.approx(jm.weighted_laplace(lam), rel=1e-4)
    assert jm.weighted_laplace(0.0) == jm.mean
    assert 0.0 < jm.compensated_laplace(lam) < lam * jm.mean


def test_atoms_integrals():
    jm = Atoms(((1.0, 2.0), (0.5, 1.0)))
    lam = 0.8
    assert jm.total_rate == 3.0
    assert jm.mean == 2.5
    assert jm.second_moment == 2.25
    expected = 2.0 * (math.exp(-0.8) - 1 + 0.8) + (math.exp(-0.4) - 1 + 0.4)
    assert jm.compensated_laplace(lam) == pytest.approx(expected, rel=1e-12)
    assert jm.laplace_deficit(lam) == pytest.approx(2.0 * (1 - math.exp(-0.8)) + (1 - math.exp(-0.4)))
    assert jm.weighted_laplace(lam) + jm.weighted_deficit(lam) == pytest.approx(jm.mean)


def test_atoms_llogl_uses_positive_part():
    jm = Atoms(((0.5, 1.0),))
    assert llogl_moment(jm, 1.0) == 0.0
    assert llogl_moment(jm, 4.0) == pytest.approx(0.5 * math.log(2.0))


def test_atoms_size_biased_frequencies():
    jm = Atoms(((1.0, 1.0), (3.0, 1.0)))
    rng = np.random.default_rng(2)
    draws = np.array([jm.sample_size_biased(rng) for _ in range(20_000)])
    p = np.mean(draws == 3.0)
    assert abs(p - 0.75) < 5 * math.sqrt(0.75 * 0.25 / draws.size)


@pytest.mark.parametrize("pairs", [(), ((0.0, 1.0),), ((1.0, -1.0),), ((math.inf, 1.0),)])
def test_atoms_rejects_bad_pairs(pairs):
    with pytest.raises(ValueError):
        Atoms(pairs)


def test_size_biased_needs_positive_mean():
    class Empty:
        mean = 0.0

    with pytest.raises(ValueError, match="positive mean"):
        sample_size_biased(Empty(), np.random.default_rng(0))


def test_rates_and_means(ring3):
    assert jump_rates(ring3).tolist() == pytest.approx([1.75, 1.5, 0.5])
    assert mean_local(ring3).tolist() == pytest.approx([1.0, 0.0, 0.5])
    assert ring3.gamma.tolist() == pytest.approx([1.5, 1.75, 0.3])


def test_validate_collects_every_violation():
    spec = make_spec(pi=[[0.5, 0.6], [1.0, 0.0]], c=[-1.0, 0.0])
    report = validate_spec(spec)
    assert not report.ok
    joined = "; ".join(report.violations)
    assert "c must be" in joined
    assert "do not sum to 1" in joined
    assert "nonzero diagonal" in joined


def test_validate_flags_zero_gamma():
    report = validate_spec(make_spec())
    assert report.violations == ["no non-local activity: gamma is zero for every type"]


def test_validate_flags_reducible_mean_matrix():
    spec = make_spec(c=[1.0, 0.0])
    assert validate_spec(spec).violations == ["mean matrix A is reducible"]


def test_spec_from_dict_rejects_unknown_and_missing_keys(sym2):
    data = spec_to_dict(sym2)
    with pytest.raises(ValueError, match="unknown keys"):
        spec_from_dict(data | {"b": [0, 0]})
    with pytest.raises(ValueError, match="missing keys"):
        spec_from_dict({k: v for k, v in data.items() if k != "c"})
    with pytest.raises(ValueError, match="unknown jump measure kind"):
        spec_from_dict(data | {"piL": [{"kind": "gamma"}, None]})
    with pytest.raises(ValueError, match="must list 2 entries"):
        spec_from_dict(data | {"piL": [None]})


@pytest.mark.parametrize(
    "change, message",
    [
        ({"piL": [{"kind": "atoms", "atoms": [1]}, None]}, "malformed atoms measure"),
        ({"piL": [{"kind": "atoms", "atoms": 2.0}, None]}, "malformed atoms measure"),
        ({"piNL": [{"kind": "logpareto", "rate": None, "beta": 1.5}, None]}, "malformed logpareto measure"),
        ({"piL": 3}, "piL must be a list"),
        ({"a": 0.0}, "a must be a list"),
    ],
)
def test_spec_from_dict_turns_type_errors_into_value_errors(sym2, change, message):
    with pytest.raises(ValueError, match=message):
        spec_from_dict(spec_to_dict(sym2) | change)


def test_spec_from_dict_needs_an_object():
    with pytest.raises(ValueError, match="JSON object"):
        spec_from_dict([1, 2])


def test_spec_hash_follows_content(sym2):
    again = spec_from_dict(json.loads(json.dumps(spec_to_dict(sym2))))
    assert spec_hash(again) == spec_hash(sym2)
    changed = spec_from_dict(spec_to_dict(sym2) | {"a": [0.0, 0.1]})
    assert spec_hash(changed) != spec_hash(sym2)


def test_load_spec_rejects_invalid_model(tmp_path):
    path = tmp_path / "bad.json"
    data = {"K": 2, "a": [0, 0], "c": [0, 0], "pi": [[0, 1], [1, 0]], "piL": [None, None], "piNL": [None, None]}
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="invalid model bad.json"):
        load_spec(path)


def test_support_and_reduced_llogl(specs_dir):
    heavy = load_spec(specs_dir / "ks_logpareto.json")
    assert unbounded_support_types(heavy) == [0]
    assert not llogl_reduced_finite(heavy)
    light = load_spec(specs_dir / "ks_atoms.json")
    assert unbounded_support_types(light) == []
    assert llogl_reduced_finite(light)


def test_nonlocal_heavy_tail_counts_as_unbounded():
    heavy = {"kind": "logpareto", "rate": 1.0, "beta": 1.5}
    spec = make_spec(c=[0.0, 1.0], piNL=[heavy, atoms((1.0, 1.0))])
    assert unbounded_support_types(spec) == [0]

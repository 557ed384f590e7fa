import math
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from conftest import make_spec, random_spec
from spinelab import verify
from spinelab.config import Thresholds
from spinelab.cumulant import Regime
from spinelab.forward_sim import ensemble
from spinelab.model import load_spec
from spinelab.spectral import analyze
from spinelab.spine_sim import GammaBundle, gamma_ensemble, sample_spine
from spinelab.streams import path_rng

LOOSE = Thresholds(z_max=5.0)


def failing(checks):
    return [check.to_row() for check in checks if not check.passed]


@pytest.mark.parametrize("seed", range(4))
def test_spectral_identities_hold_for_random_models(seed):
    rng = np.random.default_rng(100 + seed)
    spectral = analyze(random_spec(rng, int(rng.integers(2, 7))))
    checks = verify.test_spectral_identities(spectral, seed=seed)
    assert not failing(checks)
    assert all(check.se == 0.0 for check in checks)


def test_many_to_one_rows_on_growing_model(sym2atoms_spectral):
    assert sym2atoms_spectral.Lambda == pytest.approx(1.0)
    rows = [c for c in verify.test_spectral_identities(sym2atoms_spectral) if "many_to_one" in c.test]
    assert [c.test for c in rows] == ["spectral/many_to_one t=0.5", "spectral/many_to_one t=1", "spectral/many_to_one t=2"]
    assert all(c.passed and c.z == 0.0 for c in rows)
    assert max(c.statistic for c in rows) < 1e-10


def test_deterministic_model_is_an_exact_martingale():
    spec = make_spec(a=[0.3, 0.1], c=[1.0, 0.5])
    spectral = analyze(spec)
    bundle = ensemble(spec, [1.0, 2.0], 2.0, [0.5, 1.0, 2.0], 40, master_seed=0)
    martingale = verify.test_martingale(bundle, spectral, z_max=0.0)
    assert not failing(martingale)
    assert [check.z for check in martingale] == [0.0, 0.0, 0.0]
    assert not failing(verify.test_mean_consistency(bundle, spectral, z_max=0.0))


def test_forward_checks_on_atoms_model(sym2atoms, sym2atoms_spectral):
    bundle = ensemble(sym2atoms, [1.0, 0.0], 1.0, [0.5, 1.0], 3000, master_seed=2)
    panel = verify.default_panel(sym2atoms_spectral, seed=2)
    assert not failing(verify.test_mean_consistency(bundle, sym2atoms_spectral, 5.0))
    assert not failing(verify.test_martingale(bundle, sym2atoms_spectral, z_max=5.0))
    laplace = verify.test_laplace(bundle, sym2atoms, panel, z_max=5.0)
    assert len(laplace) == 10
    assert not failing(laplace)


def test_spine_equivalence_on_sym2(sym2, sym2_spectral):
    checks = verify.test_spine_equivalence(
        sym2, sym2_spectral, [1.0, 0.0], [np.array([0.5, 0.5]), np.array([1.0, 0.2])], [0.5, 1.0], 3000, 7, LOOSE
    )
    assert len(checks) == 12
    assert not failing(checks)
    assert {check.note for check in checks if check.test.startswith("spine/reweighted")} == {verify.INDEPENDENT_NOTE}


def test_conditional_decomposition_needs_realizations(sym2atoms, sym2atoms_spectral):
    bare = gamma_ensemble(sym2atoms, sym2atoms_spectral, [1.0, 0.0], 1.0, [1.0], 10, master_seed=0)
    with pytest.raises(ValueError):
        verify.test_conditional_decomposition(bare, sym2atoms_spectral, np.ones(2))


def test_conditional_decomposition_on_atoms_model(sym2atoms, sym2atoms_spectral):
    spine = gamma_ensemble(
        sym2atoms, sym2atoms_spectral, [1.0, 0.0], 1.0, [0.5, 1.0], 2000, master_seed=8, keep_realizations=True
    )
    for f in (sym2atoms_spectral.h, np.array([1.0, 0.0])):
        checks = verify.test_conditional_decomposition(spine, sym2atoms_spectral, f, z_max=5.0)
        assert len(checks) == 2
        assert not failing(checks)


def test_conditional_decomposition_drops_infinite_paths(sym2_spectral):
    gamma = np.ones((40, 1, 2))
    gamma[0, 0, 0] = np.inf
    realizations = [SimpleNamespace(events=[]) for _ in range(40)]
    bundle = GammaBundle(np.array([1.0]), gamma, np.array([1.0, 0.0]), 0, realizations=realizations)
    (check,) = verify.test_conditional_decomposition(bundle, sym2_spectral, np.ones(2))
    assert check.note == "1 paths with infinite marks dropped"


def test_revival_checks(ring3_spectral):
    mu = [0.0, 1.0, 1.0]
    paths = [sample_spine(ring3_spectral, mu, 1.5, path_rng(4, k)) for k in range(3000)]
    checks = verify.test_revival_moments(ring3_spectral, paths, mu, lambda s, i, j: 1.0, 1.5, "count", z_max=5.0)
    assert [check.test for check in checks] == ["revivals/first count t=1.5", "revivals/second count t=1.5"]
    assert not failing(checks)


@pytest.mark.parametrize(
    "verdict, regime, agrees",
    [
        (verify.Verdict.NONDEGENERATE, Regime.NONDEGENERATE, True),
        (verify.Verdict.NONDEGENERATE, Regime.DEGENERATE_LLOGL, False),
        (verify.Verdict.DEGENERATE, Regime.DEGENERATE_SUBCRITICAL, True),
        (verify.Verdict.DEGENERATE, Regime.NONDEGENERATE, False),
        (verify.Verdict.INCONCLUSIVE, Regime.NONDEGENERATE, False),
        (verify.Verdict.INCONCLUSIVE, Regime.INDETERMINATE, True),
        (verify.Verdict.DEGENERATE, Regime.INDETERMINATE, True),
    ],
)
def test_verdict_agreement(verdict, regime, agrees):
    assert verify.verdict_agrees(verdict, regime) is agrees


def ladder(median_ratio, z, collapsed):
    n = len(median_ratio)
    return pd.DataFrame(
        {"T": np.arange(1, n + 1), "median_ratio": median_ratio, "z": z, "collapsed": collapsed}
    )


def test_ks_verdict_rules():
    th = Thresholds()
    assert verify._ks_verdict(ladder([0.5, 0.4, 0.3, 0.2], [0, 1, -1, 0], [0, 0, 0, 0]), th) == "NONDEGENERATE"
    assert verify._ks_verdict(ladder([0.5, 0.1, 0.02, 0.001], [0, 0, 1, 2], [0, 0, 0, 0]), th) == "DEGENERATE"
    assert verify._ks_verdict(ladder([0.5, 0.1, 0.02, 0.001], [0, 9, 9, 9], [0, 0, 0.4, 0.9]), th) == "DEGENERATE"
    assert verify._ks_verdict(ladder([0.5, 0.1, 0.02, 0.001], [0, 9, 9, 9], [0, 0, 0, 0]), th) == "INCONCLUSIVE"
    assert verify._ks_verdict(ladder([0.5, 0.1, 0.03, 0.02], [0, 0, 0, 0], [0, 0, 0, 0]), th) == "INCONCLUSIVE"


def test_kesten_stigum_nondegenerate(specs_dir):
    spec = load_spec(specs_dir / "ks_atoms.json")
    report = verify.kesten_stigum_experiment(spec, analyze(spec), [1.0, 0.0], [1.0, 2.0, 3.0], 2000, 5, LOOSE)
    assert report.verdict == verify.Verdict.NONDEGENERATE
    assert report.classification.regime == Regime.NONDEGENERATE
    assert report.consistent
    assert list(report.ladder.columns) == ["T", "mean", "se", "z", "median", "median_ratio", "frac_small", "collapsed"]
    assert report.to_dict()["verdict"] == "NONDEGENERATE"


def test_kesten_stigum_degenerate_under_llogl_failure(specs_dir):
    spec = load_spec(specs_dir / "ks_logpareto.json")
    # the sample mean rides on rare huge paths, so the medians decide
    th = Thresholds(z_max=math.inf)
    report = verify.kesten_stigum_experiment(spec, analyze(spec), [1.0, 0.0], [2.5, 5.0, 10.0, 20.0], 1000, 9, th)
    assert report.classification.regime == Regime.DEGENERATE_LLOGL
    assert report.verdict == verify.Verdict.DEGENERATE
    assert report.consistent
    ratios = report.ladder["median_ratio"].to_numpy()
    assert ratios[-1] < 0.01
    assert ratios[-1] < ratios[0]


def test_kesten_stigum_subcritical_heavy_tail(specs_dir):
    spec = load_spec(specs_dir / "ks_subcritical.json")
    spectral = analyze(spec)
    times = [2.5, 5.0, 7.5, 10.0]
    bundle = ensemble(spec, [1.0, 1.0], 10.0, times, 2000, master_seed=6)
    report = verify.kesten_stigum_experiment(spec, spectral, [1.0, 1.0], times, 2000, 6, LOOSE, bundle=bundle)
    assert report.verdict == verify.Verdict.DEGENERATE
    assert report.classification.regime == Regime.DEGENERATE_SUBCRITICAL
    assert report.consistent
    extinction = verify.weak_extinction_test(bundle, 0.01, spectral.lambda1, LOOSE)
    assert not extinction.skipped
    assert extinction.passed
    assert list(extinction.table.columns) == ["T", "P(X_1>eps)", "P(X_2>eps)"]


def test_kesten_stigum_needs_positive_ladder(sym2, sym2_spectral):
    with pytest.raises(ValueError):
        verify.kesten_stigum_experiment(sym2, sym2_spectral, [1.0, 0.0], [0.0, 1.0], 10, 0)


def test_weak_extinction_skipped_when_supercritical(sym2, sym2_spectral):
    bundle = ensemble(sym2, [1.0, 0.0], 1.0, [0.5, 1.0], 10, master_seed=0)
    report = verify.weak_extinction_test(bundle, 0.01, sym2_spectral.lambda1)
    assert report.skipped
    assert report.passed
    assert report.table.empty


def test_weak_extinction_on_pure_death():
    # X_t = mu e^{-a t}: type 1 drops below eps after log(100), type 2 after log(200)/2
    spec = make_spec(a=[1.0, 2.0])
    times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    bundle = ensemble(spec, [1.0, 2.0], 6.0, times, 5, master_seed=0)
    assert bundle.states[:, -1] == pytest.approx(np.tile([math.exp(-6.0), 2.0 * math.exp(-12.0)], (5, 1)), rel=1e-9)
    report = verify.weak_extinction_test(bundle, 0.01, 1.0)
    assert not report.skipped
    assert report.passed
    assert report.table["P(X_1>eps)"].tolist() == [1.0, 1.0, 1.0, 1.0, 0.0, 0.0]
    assert report.table["P(X_2>eps)"].tolist() == [1.0, 1.0, 0.0, 0.0, 0.0, 0.0]


def test_default_panel(ring3_spectral):
    panel = verify.default_panel(ring3_spectral, seed=1)
    assert len(panel) == 5
    assert panel[2].tolist() == ring3_spectral.h.tolist()
    assert panel[3].tolist() == [2.0, 0.0, 0.0]
    assert all((f >= 0).all() for f in panel)


def test_full_suite_on_atoms_model(sym2atoms):
    report = verify.run_suite(sym2atoms, [1.0, 0.0], [0.5, 1.0], 2000, 3, LOOSE)
    frame = report.to_frame()
    assert list(frame.columns) == ["test", "statistic", "target", "se", "z", "pass", "note"]
    names = frame["test"].tolist()
    assert "assumption4" in names
    for prefix in ("spectral/", "forward/mean", "martingale", "laplace", "spine/analytic", "conditional_mean", "revivals/"):
        assert any(name.startswith(prefix) for name in names), prefix
    assert report.failures() == []
    assert report.passed


def test_suite_rejects_nonpositive_times(sym2atoms):
    with pytest.raises(ValueError):
        verify.run_suite(sym2atoms, [1.0, 0.0], [0.0, 1.0], 10, 0)

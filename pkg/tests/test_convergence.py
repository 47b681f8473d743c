import numpy as np
import pytest

from fedutr import convergence as cv
from fedutr.convergence import ConvexTestbedSpec, QuadraticProblem, closed_form_optimum, fit_rate


def test_single_identity_client_optimum():
    prob = QuadraticProblem(np.eye(2)[None], np.array([[1.0, 2.0]]), 0.0)
    theta, f = closed_form_optimum(prob)
    np.testing.assert_allclose(theta, [1, 2])
    assert f == pytest.approx(0.0, abs=1e-15)


def test_two_scalar_clients_meet_in_the_middle():
    prob = QuadraticProblem(np.ones((2, 1, 1)), np.array([[0.0], [2.0]]), 0.0)
    theta, f = closed_form_optimum(prob)
    assert theta[0] == pytest.approx(1.0) and f == pytest.approx(1.0)


def test_l1_optimum_matches_soft_threshold_for_separable_problem():
    # identity curvature: the minimiser is the soft-thresholded mean centre
    prob = QuadraticProblem(np.stack([np.eye(3)] * 2), np.array([[0.5, -2.0, 3.0], [1.5, -1.0, 0.1]]), 0.4)
    theta, _ = closed_form_optimum(prob, tol=1e-14)
    mean = prob.c.mean(axis=0)
    np.testing.assert_allclose(theta, np.sign(mean) * np.maximum(np.abs(mean) - 0.4, 0), atol=1e-10)


def test_large_penalty_zeroes_the_optimum():
    spec = ConvexTestbedSpec(n=3, p=4, lam_l1=100.0)
    theta, f = closed_form_optimum(spec)
    assert not theta.any()
    assert f == pytest.approx(float(cv.make_problem(spec).objective(np.zeros(4))))


def test_problem_curvature_spans_the_range():
    spec = ConvexTestbedSpec(n=2, p=5, mu=0.3, L=3.0)
    for A in cv.make_problem(spec).A:
        eig = np.linalg.eigvalsh(A)
        assert eig[0] == pytest.approx(0.3) and eig[-1] == pytest.approx(3.0)


def test_exact_inverse_rate_is_recovered():
    t = np.arange(1000)
    fit = fit_rate(5.0 / (3.0 + t))
    assert fit.C == pytest.approx(5.0) and fit.gamma == pytest.approx(3.0) and fit.r2 == pytest.approx(1.0)
    env, ok = cv.rate_envelope(5.0 / (3.0 + t), fit)
    assert ok and np.allclose(env, 5.0)


def test_exponential_series_is_not_forced_into_the_model():
    fit = fit_rate(np.exp(-np.arange(300) / 30.0))
    assert fit.r2 < 0.95 and not fit.passed


def test_fit_needs_enough_points():
    with pytest.raises(ValueError, match="at least 200"):
        fit_rate(np.ones(250), burn_in=100)


def test_noise_free_single_local_step_descends():
    spec = ConvexTestbedSpec(n=1, p=3, local_epochs=1, sigma=0.0)
    gap = cv.run_fedavg_quadratic(spec, "plain", T=300, replicates=1).gap
    assert np.all(np.diff(gap) <= 0) and gap[-1] < 1e-3 * gap[0]


def test_starting_point_does_not_change_the_limit():
    a, b = cv.init_invariance(ConvexTestbedSpec(sigma=0.0), T=2000, replicates=1)
    assert abs(a.gap[-1] - b.gap[-1]) <= 1e-6


def test_variant_validation():
    spec = ConvexTestbedSpec(n=2, p=2)
    with pytest.raises(ValueError, match="unknown variant"):
        cv.run_fedavg_quadratic(spec, "adam")
    with pytest.raises(ValueError, match="lam_l1 > 0"):
        cv.run_fedavg_quadratic(spec, "with_l1_prox")
    with pytest.raises(ValueError, match="lam_l1 = 0"):
        cv.run_fedavg_quadratic(ConvexTestbedSpec(n=2, p=2, lam_l1=0.1), "with_lam")


@pytest.mark.parametrize("kw", [{"mu": 0.0}, {"mu": 2.0, "L": 1.0}, {"n": 0}, {"sigma": -1.0}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        ConvexTestbedSpec(**kw)


def test_same_noise_seed_is_reproducible():
    spec = ConvexTestbedSpec(n=3, p=4)
    a = cv.run_fedavg_quadratic(spec, "with_lam", T=20, replicates=2)
    b = cv.run_fedavg_quadratic(spec, "with_lam", T=20, replicates=2)
    assert np.array_equal(a.gap, b.gap)


def test_writers(tmp_path):
    cv.write_gap_csv(tmp_path / "g.csv", [2.0, 1.0])
    assert (tmp_path / "g.csv").read_text() == "round,gap\n0,2.0\n1,1.0\n"
    cv.write_fit_json(tmp_path / "f.json", {"plain": {"r2": 1.0}})
    assert '"r2": 1.0' in (tmp_path / "f.json").read_text()

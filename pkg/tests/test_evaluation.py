import math

import pytest

from bsvie import evaluation, networks, problems
from bsvie.evaluation import compute_errors, fit_convergence, stability_check
from bsvie.networks import ClosedFormFields
from bsvie.sde import TimeGrid


class OffsetFields(ClosedFormFields):
    def __init__(self, problem, dy=0.0, dz=0.0):
        super().__init__(problem)
        self.dy, self.dz = dy, dz

    def y(self, t, x):
        return super().y(t, x) + self.dy

    def z(self, t, s, x_t, x_s):
        return super().z(t, s, x_t, x_s) + self.dz


def test_closed_form_bypass_has_no_field_error():
    p = problems.example_1a()
    r = compute_errors(p, TimeGrid(1.0, 10), 512, seed=0, closed_form=True)
    assert r.err_y <= 1e-24 and r.err_z <= 1e-24
    assert r.err_t > 0


def test_constant_offset_errors(monkeypatch):
    # ABM forward: Euler and exact paths agree, so only the offset contributes
    p = problems.example_1a(d=3)
    grid = TimeGrid(1.0, 8)
    delta = 0.01
    monkeypatch.setattr(evaluation, "make_fields",
                        lambda problem, params, **kw: OffsetFields(problem, delta, delta))
    r = compute_errors(p, grid, 64, seed=1, params=object())
    # sum_n delta^2 h over N steps; Z: ell components over N(N+1)/2 pairs weighted h^2
    assert r.err_y == pytest.approx(delta**2 * 1.0, rel=1e-9)
    assert r.err_z == pytest.approx(3 * delta**2 * 36 / 64, rel=1e-9)


def test_coupled_problem_reference_uses_closed_form_forward():
    p = problems.example_3()
    r = compute_errors(p, TimeGrid(1.0, 8), 128, seed=0, closed_form=True)
    assert r.err_y <= 1e-24 and r.err_z <= 1e-24


def test_gbm_bypass_error_is_forward_discretisation_only():
    p = problems.example_1b(d=3)
    coarse = compute_errors(p, TimeGrid(1.0, 5), 512, seed=0, closed_form=True)
    fine = compute_errors(p, TimeGrid(1.0, 40), 512, seed=0, closed_form=True)
    assert 0 < fine.err_y < coarse.err_y


def test_missing_closed_form():
    p = problems.zero_driver(problems.example_1a(d=2))
    with pytest.raises(evaluation.UnsupportedProblem):
        compute_errors(p, TimeGrid(1.0, 4), 8, 0, params=networks.init(0, 2, 2))


def test_power_law_fit_is_exact():
    Ns = [10, 20, 40, 80]
    values = [3.0 * (1 / N) ** 0.75 for N in Ns]
    fit = fit_convergence(Ns, values)
    assert abs(fit.slope - 0.75) <= 1e-12
    assert abs(math.exp(fit.intercept) - 3.0) <= 1e-12
    assert fit.r2 == pytest.approx(1.0)


def test_fit_needs_three_points_and_positive_values():
    with pytest.raises(ValueError):
        fit_convergence([10, 20], [1.0, 0.5])
    with pytest.raises(ValueError):
        fit_convergence([10, 20, 40], [1.0, 0.0, 0.5])


def test_plugin_convergence_study_and_csv(tmp_path):
    study = evaluation.convergence_study(problems.example_1a(d=2), [4, 8, 16], M=256)
    assert [r.N for r in study.reports] == [4, 8, 16]
    assert "loss" in study.fits and study.fits["loss"].slope > 0.5
    assert all(r.err_y <= 1e-24 for r in study.reports)
    evaluation.write_convergence_csv(study, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "N,h,metric,value,slope"
    assert len(lines) == 1 + 3 * len(evaluation.METRICS)


def test_median_by_dimension():
    rows = [evaluation.DimensionRow(5, s, e, 2 * e, 3 * e, 1.0, 2.0) for s, e in enumerate([3.0, 1.0, 2.0])]
    med = evaluation.median_by_dimension(rows)
    assert med[5]["err_y"] == 2.0 and med[5]["err_t"] == 6.0


def test_stability_equal_parameters_has_no_violations():
    p = problems.example_1a(d=2)
    params = networks.init(0, 2, 2, y_width=8, z_width=8, depth=2)
    report = stability_check(p, TimeGrid(1.0, 8), params, params, 256, seed=0)
    assert report.violations == 0
    assert all(row[2] == 0.0 for row in report.rows)


def test_stability_zero_driver_with_unit_constants():
    p = problems.zero_driver(problems.example_1a(d=2))
    a = networks.init(1, 2, 2, y_width=8, z_width=8, depth=2)
    b = networks.init(2, 2, 2, y_width=8, z_width=8, depth=2)
    report = stability_check(p, TimeGrid(1.0, 6), a, b, 2048, seed=0, c_y=1.0, c_z=1.0)
    assert report.K1 == 0.0
    assert report.violations == 0


def test_stability_random_pairs_example1a():
    p = problems.example_1a(d=2)
    grid = TimeGrid(1.0, 10)
    for pair in range(3):
        a = networks.init(2 * pair, 2, 2, y_width=8, z_width=8, depth=2)
        b = networks.init(2 * pair + 1, 2, 2, y_width=8, z_width=8, depth=2)
        report = stability_check(p, grid, a, b, 1024, seed=pair)
        assert report.violations == 0
        assert report.c_z == 2 * report.c_y


def test_stability_refuses_coarse_grid():
    p = problems.example_1a()
    params = networks.init(0, 5, 5)
    with pytest.raises(ValueError, match="N >= 4"):
        stability_check(p, TimeGrid(1.0, 3), params, params, 16)


def test_stability_refuses_coupled_problem():
    p = problems.example_3()
    params = networks.init(0, 5, 5)
    with pytest.raises(evaluation.UnsupportedProblem):
        stability_check(p, TimeGrid(1.0, 10), params, params, 16)


def test_stability_csv(tmp_path):
    p = problems.example_1a(d=2)
    params = networks.init(0, 2, 2, y_width=4, z_width=4, depth=1)
    report = stability_check(p, TimeGrid(1.0, 4), params, params, 8)
    evaluation.write_stability_csv(report, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "k,n,lhsY,rhsY,lhsZ,rhsZ,violated"
    assert len(lines) == 1 + sum(4 - k + 1 for k in range(4))

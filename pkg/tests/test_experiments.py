import csv
import math

import numpy as np
import pytest

from conftest import anchor_free_affine, benchmark_affine, make_spec
from ffbsde import (BsdeConfig, InconclusiveStudyError, InvalidArgumentError,
                    contraction_study, convergence_study, make_uniform_grid, stability_study,
                    validate_problem)
from ffbsde.experiments import (CONTRACTION_HEADER, CONVERGENCE_HEADER, STABILITY_HEADER,
                                ContractionRow, ConvergenceRow, StabilityRow, read_summary,
                                sup_mean_square_path, write_contraction_csv,
                                write_convergence_csv, write_stability_csv, write_summary)

ROOT2 = math.sqrt(2.0)


def rate_instance(scale=1.0):
    return anchor_free_affine(x0=scale, sigma=0.3 * scale, f4=lambda t: scale * t,
                              g4=lambda t: scale * t)


# -- convergence ---------------------------------------------------------------


def test_time_independent_problem_is_inconclusive():
    aspec = anchor_free_affine(f4=lambda t: 0.5, g4=lambda t: 1.0)
    grid = make_uniform_grid(0.5, 16)
    with pytest.raises(InconclusiveStudyError) as info:
        convergence_study(aspec.to_problem_spec(), grid, [2, 4, 8], 256, 1, tol=1e-10,
                          config=BsdeConfig(degree=1))
    rows = info.value.rows
    assert len(rows) == 3 and not any(r.usable for r in rows)
    assert "noise floor" in str(info.value)


def test_convergence_rows_and_prefactor_scaling():
    grid = make_uniform_grid(0.5, 32)
    kw = dict(paths=512, seed=3, tol=1e-10, config=BsdeConfig(degree=1))
    base = convergence_study(rate_instance().to_problem_spec(), grid, [2, 4, 8], **kw)
    big = convergence_study(rate_instance(ROOT2).to_problem_spec(), grid, [2, 4, 8], **kw)
    assert [r.N for r in base.rows] == [2, 4, 8]
    assert [r.mesh for r in base.rows] == [0.25, 0.125, 0.0625]
    assert all(r.usable and r.err_diag > 0 and r.err_X > 0 for r in base.rows)
    assert all(base.converged)
    # errors shrink with the mesh
    errs = [r.err_diag for r in base.rows]
    assert errs[0] > errs[1] > errs[2]
    # scaling x0, sigma, f4, g4 by sqrt(2) doubles R + |x0|^2
    R1 = validate_problem(rate_instance().to_problem_spec()).R + 1.0
    R2 = validate_problem(rate_instance(ROOT2).to_problem_spec()).R + 2.0
    assert R2 / R1 == pytest.approx(2.0, rel=1e-9)
    for a, b in zip(base.rows, big.rows):
        assert (b.err_diag / a.err_diag) ** 2 == pytest.approx(2.0, rel=0.25)


def test_convergence_input_checks():
    spec = rate_instance().to_problem_spec()
    grid = make_uniform_grid(0.5, 16)
    with pytest.raises(InvalidArgumentError):
        convergence_study(spec, grid, [4, 2], 16, 0)
    with pytest.raises(InvalidArgumentError):
        convergence_study(spec, grid, [2, 3], 16, 0)


def test_convergence_rows_independent_of_workers():
    spec = rate_instance().to_problem_spec()
    grid = make_uniform_grid(0.5, 16)
    kw = dict(paths=128, seed=5, tol=1e-10, config=BsdeConfig(degree=1))
    a = convergence_study(spec, grid, [2, 4, 8], workers=1, **kw)
    b = convergence_study(spec, grid, [2, 4, 8], workers=3, **kw)
    assert a.rows == b.rows and a.slope == b.slope


# -- contraction -----------------------------------------------------------------


def test_zero_problem_contraction_is_vacuous():
    rows = contraction_study(lambda T: make_spec(T=T, Sigma=lambda s, x, eta: 0.2),
                             [0.125, 0.25], 8, 32, 0)
    for r in rows:
        assert r.iters == 1 and r.converged and r.ratios == ()
        assert math.isnan(r.ratio_mean) and not r.diverged


def test_divergent_horizon_is_marked_not_raised():
    rows = contraction_study(
        lambda T: benchmark_affine(bbar=-5, f2=5, g1=3, T=T).to_problem_spec(),
        [2.0], 16, 64, 0, tol=1e-10, max_iter=6)
    assert rows[0].diverged and not rows[0].converged


def test_contraction_ratio_grows_with_horizon():
    def builder(T):
        return benchmark_affine(bbar=-1.0, sigma=0.3, f1=0.5, f2=0.5, g1=1.0, g3=0.3,
                                T=T).to_problem_spec()

    rows = contraction_study(builder, [0.125, 0.25, 0.5], 16, 256, 3, tol=1e-10)
    means = [r.ratio_mean for r in rows]
    assert means[0] < means[1] < means[2]
    assert max(rows[0].ratios) <= 0.9


def test_contraction_horizons_must_increase():
    with pytest.raises(InvalidArgumentError):
        contraction_study(lambda T: make_spec(T=T), [0.5, 0.25], 8, 8, 0)


# -- stability ---------------------------------------------------------------------


def test_stability_scale_zero_and_linearity():
    spec = benchmark_affine(bbar=-1.0, sigma=0.3, f1=0.5, f2=0.5, g1=1.0, g3=0.0,
                            ).to_problem_spec()
    rows = stability_study(spec, [0.0, 0.01, 0.02], make_uniform_grid(0.5, 16), 256, 5)
    assert rows[0].distance == 0.0 and math.isnan(rows[0].ratio)
    assert 1.6 <= rows[2].distance / rows[1].distance <= 2.4
    assert rows[1].ratio == pytest.approx(rows[2].ratio, rel=0.2)


# -- helpers and output --------------------------------------------------------------


def test_sup_mean_square_path():
    d = np.zeros((2, 3, 1))
    d[0, 1, 0] = 3.0
    d[1, 2, 0] = 1.0
    assert sup_mean_square_path(d) == pytest.approx(np.sqrt((9.0 + 1.0) / 2))


def test_csv_headers_and_formatting(tmp_path):
    conv = [ConvergenceRow(0.25, 2, 0.1, 0.2, 100, 7)]
    cont = [ContractionRow(0.125, 0.3, 5, True)]
    stab = [StabilityRow(0.01, 0.02, 2.0)]
    write_convergence_csv(tmp_path / "c.csv", conv)
    write_contraction_csv(tmp_path / "k.csv", cont)
    write_stability_csv(tmp_path / "s.csv", stab)
    read = lambda n: list(csv.reader(open(tmp_path / n)))  # noqa: E731
    assert read("c.csv") == [CONVERGENCE_HEADER, ["0.25", "2", "0.1", "0.2", "100", "7"]]
    assert read("k.csv") == [CONTRACTION_HEADER, ["0.125", "0.3", "5", "true"]]
    assert read("s.csv") == [STABILITY_HEADER, ["0.01", "0.02", "2.0"]]


def test_summary_round_trip(tmp_path):
    fn = tmp_path / "summary.txt"
    write_summary(fn, {"verdict": "pass", "slope": 0.5, "ok": True, "rows": 3})
    lines = fn.read_text().splitlines()
    assert lines[0].startswith("generated_at = ")
    assert lines[1:] == ["ok = true", "rows = 3", "slope = 0.5", "verdict = pass"]
    assert read_summary(fn)["verdict"] == "pass"

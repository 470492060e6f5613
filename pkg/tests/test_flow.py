import csv

import numpy as np
import pytest

from conftest import anchor_free_affine, benchmark_affine, make_spec
from ffbsde import (BsdeConfig, BsdeSlice, DiagonalProcess, InvalidArgumentError,
                    UnsupportedReductionError, export_solution_csv, extract_diagonal,
                    make_partition, make_uniform_grid, phi_step, sample_brownian,
                    simulate_forward, solve_equilibrium, solve_pi_equilibrium,
                    stack_coefficients, unstack_slices)
from ffbsde.flow import PicardReport, sup_l2_norm
from ffbsde.oracle import affine_phi_map


def constant_slices(partition, values, P=3):
    J = partition.grid.J
    return {int(k): BsdeSlice(int(k), np.full((P, J + 1 - k, 1), v), np.zeros((P, J - k, 1, 1)))
            for k, v in zip(partition.anchor_indices, values)}


# -- extract_diagonal ----------------------------------------------------------


def test_single_anchor_diagonal_is_that_member():
    grid = make_uniform_grid(1.0, 8)
    part = make_partition(grid, 1)
    Y = np.random.default_rng(0).standard_normal((3, 9, 1))
    diag = extract_diagonal({0: BsdeSlice(0, Y, np.zeros((3, 8, 1, 1)))}, part, grid)
    np.testing.assert_array_equal(diag.Y_diag, Y)


def test_identical_members_give_that_member():
    grid = make_uniform_grid(1.0, 8)
    part = make_partition(grid, 4)
    Y = np.random.default_rng(1).standard_normal((3, 9, 1))
    slices = {int(k): BsdeSlice(int(k), Y[:, k:], np.zeros((3, 8 - k, 1, 1)))
              for k in part.anchor_indices}
    np.testing.assert_array_equal(extract_diagonal(slices, part, grid).Y_diag, Y)


def test_two_members_switch_at_midpoint():
    grid = make_uniform_grid(1.0, 8)
    part = make_partition(grid, 2)
    diag = extract_diagonal(constant_slices(part, [2.0, -1.0]), part, grid)
    np.testing.assert_array_equal(diag.Y_diag[0, :, 0], [2, 2, 2, 2, -1, -1, -1, -1, -1])


def test_missing_member_rejected():
    grid = make_uniform_grid(1.0, 8)
    part = make_partition(grid, 2)
    slices = constant_slices(part, [1.0, 2.0])
    del slices[4]
    with pytest.raises(InvalidArgumentError):
        extract_diagonal(slices, part, grid)


# -- phi_step ---------------------------------------------------------------------


def test_zero_problem_is_a_fixed_point_of_phi():
    spec = make_spec(x0=[0.7])
    grid = make_uniform_grid(0.5, 8)
    bundle = sample_brownian(grid, 16, 1, 0)
    diag_in = DiagonalProcess(np.random.default_rng(0).standard_normal((16, 9, 1)), grid)
    out, ens, _ = phi_step(spec, grid, bundle, make_partition(grid, 4), diag_in)
    assert np.all(out.Y_diag == 0.0)
    assert np.all(ens.X == 0.7)


def test_constant_terminal_makes_phi_constant():
    g = np.array([0.5, 2.0])
    spec = make_spec(m=2, B=lambda s, x, eta: eta[:, :1], Sigma=lambda s, x, eta: 0.3,
                     G=lambda t, xi, xbar, x: g)
    grid = make_uniform_grid(0.5, 8)
    bundle = sample_brownian(grid, 50, 1, 0)
    diag_in = DiagonalProcess(np.random.default_rng(2).standard_normal((50, 9, 2)), grid)
    out, _, _ = phi_step(spec, grid, bundle, make_partition(grid, 8), diag_in)
    assert np.all(out.Y_diag == g)


def test_phi_matches_closed_form_map():
    aspec = benchmark_affine(sigma=0.4)
    spec = aspec.to_problem_spec()
    grid = make_uniform_grid(aspec.T, 64)
    P = 8192
    bundle = sample_brownian(grid, P, 1, 12)
    hbar_in = lambda s: 0.5 + s  # noqa: E731
    diag_in = DiagonalProcess(np.broadcast_to(hbar_in(grid.times)[None, :, None],
                                              (P, 65, 1)).copy(), grid)
    out, ens, _ = phi_step(spec, grid, bundle, make_partition(grid, 64), diag_in,
                           BsdeConfig(degree=1))
    fine = np.linspace(0.0, aspec.T, 513)
    mapped = affine_phi_map(aspec, fine, np.zeros_like(fine), hbar_in(fine))
    a, h = mapped["abar"][::8], mapped["hbar"][::8]
    ref = a[None, :, None] * ens.X + h[None, :, None]
    err = np.sqrt(np.mean((out.Y_diag - ref) ** 2, axis=0)) / np.sqrt(np.mean(ref ** 2, axis=0))
    assert err.max() <= 0.05


# -- equilibrium solvers ---------------------------------------------------------


def test_zero_problem_converges_in_one_iteration():
    spec = make_spec(Sigma=lambda s, x, eta: 0.2)
    grid = make_uniform_grid(0.5, 8)
    sol = solve_pi_equilibrium(spec, grid, make_partition(grid, 2), 32, 0, 1e-10, 10)
    assert sol.report.iterations == 1 and sol.report.converged
    assert np.all(sol.diag.Y_diag == 0.0)
    assert sol.report.valid_ratios == []


def test_constant_terminal_converges_in_at_most_two_iterations():
    spec = make_spec(B=lambda s, x, eta: -eta, Sigma=lambda s, x, eta: 0.2,
                     G=lambda t, xi, xbar, x: 1.25)
    grid = make_uniform_grid(0.5, 8)
    sol = solve_equilibrium(spec, grid, 32, 0, 1e-10, 10)
    assert sol.report.converged and sol.report.iterations <= 2
    assert np.all(sol.diag.Y_diag == 1.25)


def test_full_grid_solve_is_the_finest_partition_solve():
    spec = benchmark_affine(sigma=0.3).to_problem_spec()
    grid = make_uniform_grid(0.5, 8)
    a = solve_equilibrium(spec, grid, 200, 4, 1e-9, 40)
    b = solve_pi_equilibrium(spec, grid, make_partition(grid, 8), 200, 4, 1e-9, 40)
    np.testing.assert_array_equal(a.diag.Y_diag, b.diag.Y_diag)
    np.testing.assert_array_equal(a.ensemble.X, b.ensemble.X)
    assert a.report.increments == b.report.increments


def test_solution_invariants():
    spec = benchmark_affine(sigma=0.3).to_problem_spec()
    grid = make_uniform_grid(0.5, 12)
    part = make_partition(grid, 3)
    tol = 1e-9
    sol = solve_pi_equilibrium(spec, grid, part, 300, 8, tol, 60, keep_slices=True)
    assert sol.report.converged
    # the diagonal is read off the members on their windows
    for a, k in enumerate(part.anchor_indices):
        lo, hi = part.window(a)
        np.testing.assert_array_equal(sol.diag.Y_diag[:, lo:hi], sol.slices[int(k)].Y[:, :hi - lo])
    # the forward paths are those driven by the returned diagonal
    again = simulate_forward(spec, sol.diag, sol.ensemble.bundle)
    np.testing.assert_array_equal(again.X, sol.ensemble.X)
    # one more map application moves the diagonal by at most 2 tol
    nxt, _, _ = phi_step(spec, grid, sol.ensemble.bundle, part, sol.diag, keep_slices=False)
    assert sup_l2_norm(nxt.Y_diag - sol.diag.Y_diag)[0] <= 2 * tol


def test_solve_is_deterministic_in_seed():
    spec = benchmark_affine(sigma=0.3).to_problem_spec()
    grid = make_uniform_grid(0.5, 8)
    a = solve_pi_equilibrium(spec, grid, make_partition(grid, 4), 100, 3, 1e-9, 40)
    b = solve_pi_equilibrium(spec, grid, make_partition(grid, 4), 100, 3, 1e-9, 40)
    np.testing.assert_array_equal(a.diag.Y_diag, b.diag.Y_diag)
    assert a.report.increments == b.report.increments


def test_exhausted_iterations_are_reported_not_raised():
    spec = benchmark_affine(sigma=0.3).to_problem_spec()
    grid = make_uniform_grid(0.5, 8)
    sol = solve_equilibrium(spec, grid, 100, 3, 1e-12, 2)
    assert not sol.report.converged and sol.report.iterations == 2


def test_solver_argument_checks():
    spec = make_spec()
    grid = make_uniform_grid(0.5, 4)
    with pytest.raises(InvalidArgumentError):
        solve_equilibrium(spec, grid, 10, 0, 0.0, 5)
    with pytest.raises(InvalidArgumentError):
        solve_equilibrium(spec, grid, 10, 0, 1e-8, 0)


def test_contraction_on_small_horizon():
    spec = benchmark_affine(sigma=0.3, T=0.25).to_problem_spec()
    grid = make_uniform_grid(0.25, 16)
    rep = solve_equilibrium(spec, grid, 1000, 2, 1e-10, 60).report
    assert rep.converged
    assert rep.valid_ratios and max(rep.valid_ratios) <= 0.9


# -- norms and reports -----------------------------------------------------------


def test_sup_l2_norm_picks_worst_node():
    v = np.zeros((4, 3, 1))
    v[:, 1, 0] = [1.0, -1.0, 1.0, -1.0]
    v[:, 2, 0] = [0.5, 0.5, 0.5, 0.5]
    norm, se = sup_l2_norm(v)
    assert norm == 1.0 and se == 0.0
    assert sup_l2_norm(np.zeros((5, 2, 1))) == (0.0, 0.0)


def test_report_ratios_only_above_noise_floor():
    rep = PicardReport(tol=1e-8)
    rep.add(1.0, 0.01)
    rep.add(0.5, 0.01)
    rep.add(0.05, 0.01)   # below 10 standard errors
    rep.add(0.01, 0.0001)
    assert rep.ratios == [None, 0.5, None, None]
    assert rep.valid_ratios == [0.5] and rep.mean_ratio == 0.5


# -- stacked reduction --------------------------------------------------------------


def test_stacking_rejects_anchor_dependent_problems():
    spec = benchmark_affine().to_problem_spec()
    with pytest.raises(UnsupportedReductionError):
        stack_coefficients(spec, make_partition(make_uniform_grid(0.5, 4), 2))


def test_single_block_stack_equals_original():
    spec = anchor_free_affine().to_problem_spec()
    grid = make_uniform_grid(0.5, 8)
    st = stack_coefficients(spec, make_partition(grid, 1))
    rng = np.random.default_rng(0)
    x, eta, y = (rng.standard_normal((5, 1)) for _ in range(3))
    z = rng.standard_normal((5, 1, 1))
    for s in (0.0, 0.2, 0.5):
        np.testing.assert_array_equal(st.B(s, x, eta), spec.B(s, x, eta))
        np.testing.assert_array_equal(st.F(0.0, s, x, x, x, eta, y, z),
                                      spec.driver(0.0, s, x, x, x, eta, y, z))
    np.testing.assert_array_equal(st.G(0.0, x, x, x), spec.terminal(0.0, x, x, x))


def test_stacked_terminal_substitutes_anchor_times():
    spec = make_spec(G=lambda t, xi, xbar, x: t * x, depends_on_anchor=False)
    grid = make_uniform_grid(1.0, 4)
    st = stack_coefficients(spec, make_partition(grid, 2))
    x = np.array([[2.0], [-3.0]])
    np.testing.assert_array_equal(st.G(0.0, x, x, x), np.hstack([0 * x, 0.5 * x]))
    assert st.m == 2


@pytest.mark.parametrize("N", [1, 2, 3, 4])
def test_stacked_solve_reproduces_member_solves(N):
    spec = anchor_free_affine().to_problem_spec()
    grid = make_uniform_grid(0.5, 24)
    part = make_partition(grid, N)
    cfg = BsdeConfig(degree=2)
    per = solve_pi_equilibrium(spec, grid, part, 512, 4, 1e-11, 60, cfg, keep_slices=True)
    stacked = solve_pi_equilibrium(stack_coefficients(spec, part), grid, make_partition(grid, 1),
                                   512, 4, 1e-11, 60, cfg, keep_slices=True)
    for k, (Y, Z) in unstack_slices(stacked.slices[0], part, 1).items():
        np.testing.assert_allclose(Y, per.slices[k].Y, rtol=0, atol=1e-10)
        np.testing.assert_allclose(Z, per.slices[k].Z, rtol=0, atol=1e-10)
    np.testing.assert_allclose(stacked.ensemble.X, per.ensemble.X, rtol=0, atol=1e-10)


# -- export --------------------------------------------------------------------


def test_export_writes_diagonal_and_report(tmp_path):
    spec = benchmark_affine(sigma=0.3).to_problem_spec()
    grid = make_uniform_grid(0.5, 4)
    sol = solve_equilibrium(spec, grid, 10, 0, 1e-9, 40, keep_slices=True)
    files = export_solution_csv(sol, tmp_path, max_paths=3, full_fields=True)
    names = sorted(p.rsplit("/", 1)[-1] for p in map(str, files))
    assert names == ["diagonal.csv", "diagonal_mean.csv", "fields.csv", "picard_report.csv"]
    with open(tmp_path / "diagonal.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["path", "node", "time", "component", "value"]
    assert len(rows) == 1 + 3 * 5
    assert float(rows[-1][4]) == sol.diag.Y_diag[2, 4, 0]
    with open(tmp_path / "picard_report.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + sol.report.iterations

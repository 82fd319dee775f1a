"""Tests for the finite-difference forward model

Assembly structure, solver agreement, reciprocity, mesh convergence and the
adjoint Jacobian on small grids.
"""

import os
import tempfile

import numpy as np
import pytest

from src.counters import CostCounters
from src.grid_forward import (DomainSpec, ForwardSolver, SourceDetectorLayout, assemble,
                              dump_operators, frequency_grid, full_jacobian_block,
                              stack_jacobians, stack_responses, unstack_responses)
from src.pals import PalsConfig, absorption_diagonal, absorption_jacobian, initial_parameters
from suite_runner import exit_with_results


def _small_problem(n_src=4, n_det=4):
    domain = DomainSpec(half_width=1.2, half_height=1.2, nx=13, nz=13)
    layout = SourceDetectorLayout.uniform(domain, n_src, n_det)
    return assemble(domain, layout)


def test_problem_sizes():
    domain = DomainSpec(half_width=2.5, half_height=2.5, nx=50, nz=50)
    ops = assemble(domain, SourceDetectorLayout.uniform(domain, 24, 24))
    assert ops.n == 2500
    assert ops.B.shape == (2500, 24)
    assert ops.C.shape == (24, 2500)
    assert DomainSpec(half_width=2.5, half_height=2.5, nx=401, nz=401).n == 160801


def test_uniform_layout_keeps_top_detectors_off_sources():
    domain = DomainSpec(half_width=2.5, half_height=2.5, nx=50, nz=50)
    layout = SourceDetectorLayout.uniform(domain, 24, 24)
    top_row = domain.nz - 1
    sources = {node - top_row * domain.nx for node in layout.source_nodes}
    top = [node - top_row * domain.nx for node in layout.detector_nodes[:12]]
    bottom = layout.detector_nodes[12:]

    assert len(sources) == 24
    assert not sources & set(top)
    assert all(0 < ix < domain.nx - 1 for ix in top)
    assert all(node < domain.nx for node in bottom)
    # snapped positions 3.77 and 7.54 land on sources 4 and 8
    assert top[:3] == [3, 7, 11]
    exact = 49.0 * np.arange(1, 13) / 13
    assert np.max(np.abs(np.asarray(top) - exact)) < 1.0


def test_interior_stencil():
    D = 0.3
    domain = DomainSpec(half_width=1.0, half_height=1.0, nx=5, nz=5, diffusion=D)
    ops = assemble(domain, SourceDetectorLayout.uniform(domain, 1, 1))
    A = ops.A0.toarray()
    center = domain.node_index(2, 2)
    neighbours = [domain.node_index(1, 2), domain.node_index(3, 2),
                  domain.node_index(2, 1), domain.node_index(2, 3)]
    assert A[center, center] == pytest.approx(4 * D)
    for k in neighbours:
        assert A[center, k] == pytest.approx(-D)
    assert np.count_nonzero(A[center]) == 5


def test_three_by_three_hand_assembly():
    D = 0.3
    domain = DomainSpec(half_width=1.0, half_height=1.0, nx=3, nz=3, diffusion=D)
    layout = SourceDetectorLayout((domain.node_index(1, 2),), (domain.node_index(1, 0),))
    ops = assemble(domain, layout)
    h = domain.h
    robin = h / (2.0 * domain.robin_constant)

    expected = np.zeros((9, 9))
    # lateral Dirichlet nodes
    expected[3, 3] = expected[5, 5] = 1.0
    # interior node: couplings to the lateral nodes are eliminated
    expected[4, 4] = 4 * D
    expected[4, 1] = expected[1, 4] = -D
    expected[4, 7] = expected[7, 4] = -D
    # surface nodes: one vertical face plus the Robin term
    for node in (0, 1, 2, 6, 7, 8):
        expected[node, node] = D + robin

    np.testing.assert_allclose(ops.A0.toarray(), expected, atol=1e-15)


def test_dae_structure_and_symmetry():
    domain = DomainSpec(half_width=1.2, half_height=0.8, nx=13, nz=9)
    ops = assemble(domain, SourceDetectorLayout.uniform(domain, 3, 4))
    E = ops.E.reshape(domain.nz, domain.nx)
    assert np.all(E[0] == 0) and np.all(E[-1] == 0)
    assert np.count_nonzero(ops.E == 0) == 2 * domain.nx
    assert np.allclose(E[1:-1], domain.h ** 2)

    a1 = np.linspace(0.0, 0.01, ops.n)
    for omega in (0.0, 0.7):
        K = ops.system_matrix(a1, omega)
        assert abs(K - K.T).max() == 0.0
    assert np.all(np.abs(ops.A0.diagonal()) < 10.0)


def test_non_square_cells_rejected():
    with pytest.raises(ValueError, match="square"):
        DomainSpec(half_width=1.0, half_height=1.0, nx=11, nz=9)


def test_layout_off_surface_rejected():
    domain = DomainSpec(half_width=1.0, half_height=1.0, nx=7, nz=7)
    inside = domain.node_index(3, 3)
    with pytest.raises(ValueError, match="top surface"):
        assemble(domain, SourceDetectorLayout((inside,), (domain.node_index(3, 0),)))
    with pytest.raises(ValueError, match="top or bottom"):
        assemble(domain, SourceDetectorLayout((domain.node_index(3, 6),), (inside,)))
    with pytest.raises(ValueError, match="distinct"):
        SourceDetectorLayout((domain.node_index(3, 6),) * 2, (0,))


def test_source_and_detector_weights():
    domain = DomainSpec(half_width=1.2, half_height=1.2, nx=13, nz=13)
    ops = assemble(domain, SourceDetectorLayout.uniform(domain, 3, 4, footprint_half_width=1))
    np.testing.assert_allclose(np.asarray(ops.B.sum(axis=0)).ravel(), 1.0)
    np.testing.assert_allclose(np.asarray(ops.C.sum(axis=1)).ravel(), 1.0)
    row = ops.C.getrow(0).toarray().ravel()
    weights = row[row > 0]
    np.testing.assert_allclose(weights, [0.25, 0.5, 0.25])
    surface = ops.masks['top'] | ops.masks['bottom']
    assert np.all(surface[ops.B.nonzero()[0]])
    assert np.all(surface[ops.C.nonzero()[1]])


def test_static_response_is_real():
    ops = _small_problem()
    cfg = PalsConfig()
    a1 = np.where(ops.domain.interior_mask(), ops.domain.h ** 2 * cfg.mu_out, 0.0)
    psi = ForwardSolver(ops).frequency_response(a1, 0.0)
    assert np.isrealobj(psi)
    assert psi.shape == (ops.n_det, ops.n_src)
    assert np.all(np.isfinite(psi))


def test_iterative_matches_dense():
    domain = DomainSpec(half_width=0.9, half_height=0.9, nx=10, nz=10)
    ops = assemble(domain, SourceDetectorLayout.uniform(domain, 3, 3))
    a1 = np.where(domain.interior_mask(), domain.h ** 2 * 0.05, 0.0)
    for omega in (0.0, 0.5):
        iterative = ForwardSolver(ops, method='iterative').frequency_response(a1, omega)
        dense = ForwardSolver(ops, method='dense').frequency_response(a1, omega)
        error = np.linalg.norm(iterative - dense) / np.linalg.norm(dense)
        assert error <= 1e-8


def test_reciprocity_with_collocated_layout():
    domain = DomainSpec(half_width=1.2, half_height=1.2, nx=13, nz=13)
    top = tuple(domain.node_index(ix, domain.nz - 1) for ix in (3, 6, 9))
    ops = assemble(domain, SourceDetectorLayout(top, top))
    assert abs(ops.B - ops.C.T).max() == 0.0

    a1 = np.where(domain.interior_mask(), domain.h ** 2 * 0.08, 0.0)
    solver = ForwardSolver(ops, method='direct')
    for omega in (0.0, 0.7):
        psi = solver.frequency_response(a1, omega)
        Z = solver.adjoint_solutions(a1, omega)
        reciprocal = (ops.B.T @ Z).T
        np.testing.assert_allclose(psi, reciprocal, rtol=1e-8, atol=1e-12)


def test_mesh_convergence():
    responses = []
    for nx, scale in ((25, 1), (49, 2)):
        domain = DomainSpec(half_width=2.5, half_height=2.5, nx=nx, nz=nx, diffusion=0.3)
        top, bottom = domain.nz - 1, 0
        layout = SourceDetectorLayout(
            (domain.node_index(3 * scale, top),),
            (domain.node_index(21 * scale, top), domain.node_index(12 * scale, bottom)))
        ops = assemble(domain, layout)
        a1 = np.where(domain.interior_mask(), domain.h ** 2 * 0.05, 0.0)
        responses.append(ForwardSolver(ops, method='direct').frequency_response(a1, 0.0))
    coarse, fine = responses
    assert np.linalg.norm(coarse - fine) / np.linalg.norm(fine) <= 0.05


def test_solve_counting():
    ops = _small_problem(n_src=3, n_det=5)
    counters = CostCounters()
    solver = ForwardSolver(ops, method='direct', counters=counters)
    a1 = np.zeros(ops.n)
    solver.frequency_response(a1, 0.0)
    assert counters.large_solves == 3
    Z = solver.adjoint_solutions(a1, 0.0)
    assert Z.shape == (ops.n, 5)
    assert counters.large_solves == 8


def test_full_jacobian_matches_finite_differences():
    ops = _small_problem()
    cfg = PalsConfig()
    p = initial_parameters(cfg, ops.domain, (5, 3))
    solver = ForwardSolver(ops, method='direct')
    step = 1e-6
    for omega in (0.0, 0.5):
        a1 = absorption_diagonal(p, cfg, ops.domain)
        _, X = solver.frequency_response(a1, omega, return_states=True)
        Z = solver.adjoint_solutions(a1, omega)
        J = full_jacobian_block(ops, a1, absorption_jacobian(p, cfg, ops.domain), omega, X, Z)

        for k in (0, 4, cfg.m0 + 2, 2 * cfg.m0 + 1, 2 * cfg.m0 + 8):
            e = np.zeros_like(p)
            e[k] = step
            plus = solver.frequency_response(absorption_diagonal(p + e, cfg, ops.domain), omega)
            minus = solver.frequency_response(absorption_diagonal(p - e, cfg, ops.domain), omega)
            fd = ((plus - minus) / (2 * step)).ravel(order='F')
            scale = max(np.linalg.norm(fd), np.linalg.norm(J[:, k]), 1e-12)
            assert np.linalg.norm(J[:, k] - fd) / scale <= 1e-5


def test_zero_derivative_gives_zero_column():
    ops = _small_problem()
    a1 = np.zeros(ops.n)
    solver = ForwardSolver(ops, method='direct')
    _, X = solver.frequency_response(a1, 0.0, return_states=True)
    Z = solver.adjoint_solutions(a1, 0.0)
    derivatives = np.zeros((ops.n, 3))
    derivatives[ops.domain.node_index(6, 6), 1] = 1.0
    J = full_jacobian_block(ops, a1, derivatives, 0.0, X, Z)
    assert np.all(J[:, 0] == 0) and np.all(J[:, 2] == 0)
    assert np.any(J[:, 1] != 0)
    with pytest.raises(ValueError):
        full_jacobian_block(ops, a1, derivatives, 0.0, X[:, :1], Z)


def test_measurement_stacking_order():
    n_det, n_src, n_omega = 3, 2, 2
    blocks = [np.arange(n_det * n_src).reshape(n_det, n_src) + 100 * j for j in range(n_omega)]
    stacked = stack_responses(blocks)
    for i_src in range(n_src):
        for j in range(n_omega):
            for i_det in range(n_det):
                assert stacked[(i_src * n_omega + j) * n_det + i_det] == blocks[j][i_det, i_src]
    assert all(np.array_equal(a, b) for a, b in zip(unstack_responses(stacked, n_det, n_src, n_omega), blocks))

    jac_blocks = [np.column_stack([b.ravel(order='F'), -b.ravel(order='F')]) for b in blocks]
    J = stack_jacobians(jac_blocks, n_det, n_src)
    np.testing.assert_array_equal(J[:, 0], stacked)


def test_frequency_grid_validation():
    np.testing.assert_array_equal(frequency_grid([0.0, 1.0]), [0.0, 1.0])
    for bad in ([], [1.0, 0.0], [0.0, 0.0], [float('nan')]):
        with pytest.raises(ValueError):
            frequency_grid(bad)


def test_dump_operators():
    ops = _small_problem()
    with tempfile.TemporaryDirectory() as tmp:
        paths = dump_operators(ops, tmp)
        assert sorted(os.path.basename(p) for p in paths) == ['A0.coo.txt', 'B.coo.txt', 'C.coo.txt', 'E.coo.txt']
        table = np.loadtxt(os.path.join(tmp, 'A0.coo.txt'))
        assert table.shape == (ops.A0.nnz, 3)


if __name__ == "__main__":
    exit_with_results("Grid forward model", globals())

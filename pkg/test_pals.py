"""Tests for the parametric level-set absorption model"""


import numpy as np
import pytest

from src.grid_forward import DomainSpec
from src.pals import (PalsConfig, PalsParams, absorption_derivative, absorption_diagonal,
                      absorption_image, absorption_jacobian, csrbf, heaviside,
                      heaviside_derivative, initial_parameters, level_set, params_from_list,
                      params_to_list, support_delta)
from suite_runner import exit_with_results


def _domain():
    return DomainSpec(half_width=1.2, half_height=1.2, nx=13, nz=13)


def test_csrbf_values():
    np.testing.assert_allclose(csrbf([0.0, 0.5, 1.0, 2.0]), [1.0, 0.5, 0.0, 0.0])


def test_heaviside_shape():
    eps = 0.1
    np.testing.assert_allclose(heaviside([-1.0, -eps, 0.0, eps, 1.0], eps), [0.0, 0.0, 0.5, 1.0, 1.0])
    r = np.linspace(-0.15, 0.15, 61)
    step = 1e-7
    fd = (heaviside(r + step, eps) - heaviside(r - step, eps)) / (2 * step)
    np.testing.assert_allclose(heaviside_derivative(r, eps), fd, atol=1e-5)


def test_single_bump_level_set():
    cfg = PalsConfig(m0=1)
    p = np.array([0.7, 2.0, 0.3, -0.4])
    rho = np.sqrt(cfg.gamma ** 2)
    assert level_set([0.3, -0.4], p, cfg) == pytest.approx(0.7 * float(csrbf(rho)))
    # outside the support radius 1/β
    assert level_set([0.3, 0.2], p, cfg) == 0.0


def test_absorption_bounds_and_background():
    cfg = PalsConfig()
    domain = _domain()
    p = initial_parameters(cfg, domain, (5, 3))
    mu = absorption_image(p, cfg, domain)
    assert mu.shape == (domain.nz, domain.nx)
    assert np.all(mu >= cfg.mu_out - 1e-15) and np.all(mu <= cfg.mu_in + 1e-15)

    far = PalsParams(alpha=np.full(cfg.m0, 0.25), beta=np.full(cfg.m0, 1.0),
                     centers=np.full((cfg.m0, 2), 50.0)).to_vector()
    np.testing.assert_array_equal(absorption_image(far, cfg, domain), cfg.mu_out)


def test_absorption_diagonal_vanishes_on_boundary_rows():
    cfg = PalsConfig()
    domain = _domain()
    a1 = absorption_diagonal(initial_parameters(cfg, domain, (5, 3)), cfg, domain)
    assert np.all(a1[~domain.interior_mask()] == 0.0)
    assert np.all(a1[domain.interior_mask()] > 0.0)


def test_absorption_jacobian_matches_finite_differences():
    cfg = PalsConfig()
    domain = _domain()
    p = initial_parameters(cfg, domain, (5, 3))
    jac = absorption_jacobian(p, cfg, domain).toarray()
    assert jac.shape == (domain.n, cfg.n_params)
    assert np.all(jac[~domain.interior_mask()] == 0.0)

    step = 1e-6
    fd = np.zeros_like(jac)
    for k in range(cfg.n_params):
        e = np.zeros_like(p)
        e[k] = step
        fd[:, k] = (absorption_diagonal(p + e, cfg, domain) - absorption_diagonal(p - e, cfg, domain)) / (2 * step)
    assert np.linalg.norm(jac - fd) / np.linalg.norm(fd) <= 1e-5

    np.testing.assert_array_equal(absorption_derivative(p, cfg, domain, 3), jac[:, 3])
    with pytest.raises(ValueError):
        absorption_derivative(p, cfg, domain, cfg.n_params)


def test_support_delta_is_local():
    cfg = PalsConfig()
    domain = _domain()
    p_old = initial_parameters(cfg, domain, (5, 3))
    p_new = p_old.copy()
    p_new[7] += 0.05

    delta = support_delta(p_old, p_new, cfg, domain)
    assert 0 < delta.q < domain.n
    params = PalsParams.from_vector(p_old, cfg.m0)
    x, z = domain.node_coordinates()
    distance = np.hypot(x - params.centers[7, 0], z - params.centers[7, 1])
    assert np.all(distance[delta.indices] < 1.0 / params.beta[7])

    old = absorption_diagonal(p_old, cfg, domain)
    new = absorption_diagonal(p_new, cfg, domain)
    np.testing.assert_allclose(old + delta.scatter(domain.n), new, rtol=0, atol=1e-14)

    assert support_delta(p_old, p_old, cfg, domain).q == 0


def test_initial_parameters_layout():
    cfg = PalsConfig()
    domain = DomainSpec(half_width=2.5, half_height=2.5, nx=50, nz=50)
    p = initial_parameters(cfg, domain, (5, 3))
    params = PalsParams.from_vector(p, cfg.m0)
    assert p.shape == (60,)
    np.testing.assert_allclose(params.alpha[:4], [0.25, -0.25, 0.25, -0.25])
    spacing = min(5.0 / 6, 5.0 / 4)
    np.testing.assert_allclose(params.beta, 1.0 / (2 * spacing))
    assert np.all(np.abs(params.centers[:, 0]) < 2.5) and np.all(np.abs(params.centers[:, 1]) < 2.5)

    with pytest.raises(ValueError, match="m0"):
        initial_parameters(cfg, domain, (4, 4))


def test_parameter_vector_validation():
    cfg = PalsConfig(m0=2)
    values = [0.1, -0.1, 1.0, 1.0, 0.0, 0.0, 0.5, 0.5]
    np.testing.assert_array_equal(params_from_list(values, cfg.m0), values)
    assert params_to_list(np.array(values)) == values
    with pytest.raises(ValueError):
        params_from_list(values[:-1], cfg.m0)
    with pytest.raises(ValueError):
        PalsParams.from_vector(np.array(values[:-1] + [np.inf]), cfg.m0)


def test_config_validation():
    with pytest.raises(ValueError):
        PalsConfig(m0=0)
    with pytest.raises(ValueError):
        PalsConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        PalsConfig(mu_in=0.05, mu_out=0.05)


if __name__ == "__main__":
    exit_with_results("Level-set absorption model", globals())

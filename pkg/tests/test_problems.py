import numpy as np
import pytest

from bsvie import problems, rng
from bsvie.rollout import evaluate_loss, make_fields
from bsvie.sde import TimeGrid, sample_paths

ALL = ["example1a", "example1b", "example2", "example3"]


def plugin_loss(p, N, M=2**12, seed=0):
    grid = TimeGrid(p.T, N)
    fields = make_fields(p, closed_form=True)
    batch = sample_paths(p, grid, M, seed, stream=rng.EVALUATION, fields=fields if p.coupled else None)
    return evaluate_loss(p, grid, batch, fields).loss_value


@pytest.mark.parametrize("name", ["example1a", "example1b", "example3"])
def test_closed_form_y_vanishes_at_time_zero(name):
    p = problems.get_problem(name)
    x = np.random.default_rng(0).normal(size=(7, p.d))
    assert np.all(p.closed_y(0.0, x) == 0.0)


def test_example1a_constants_and_z_at_zero():
    p = problems.example_1a()
    assert (p.d, p.ell, p.T) == (5, 5, 1.0)
    assert np.all(p.closed_z(0.0, 0.5, np.ones((3, 5)), np.ones((3, 5))) == 0.0)
    # source term carries the squared Frobenius norm 0.64 + 0.81 + 1 + 1.21 + 1.44 = 5.1
    x = np.full((1, 5), 0.3)
    f = p.driver(0.5, 0.7, x, None, np.zeros((1, 5)))
    assert f[0, 0] == pytest.approx(0.5 * 25 / 50 * np.sin(1.5) * 5.1, rel=1e-14)


def test_example2_value_at_origin_and_sigma_tiling():
    p = problems.example_2()
    assert p.closed_y(0.0, np.ones((1, 20)))[0, 0] == 20.0
    assert p.g_uses_xt and not p.coupled
    assert p.constants["sigma"][:8] == [0.3, 0.375, 0.45, 0.375] * 2
    assert len(p.constants["sigma"]) == 20


def test_example2_singular_driver_domain():
    p = problems.example_2(d=3)
    x_t = np.array([[1.0, -0.25, 2.0]])
    assert p.domain_check(0.25, x_t)[0]
    with pytest.raises(ValueError, match="undefined"):
        p.driver(0.25, np.array([[[0.5]]]), np.ones((1, 1, 3)), None, np.ones((1, 1, 3)), None, x_t[:, None])


def test_example3_flags():
    p = problems.example_3()
    assert p.coupled and p.drift_uses_zdiag and p.diff_uses_y and p.driver_uses_y
    assert p.constants["b"] == 1.0 and p.constants["c"] == 1.001


def test_constants_tile_with_dimension():
    p = problems.example_1b(d=12)
    assert len(p.constants["sigma"]) == 12
    assert p.constants["sigma"][5] == 0.2


def test_problem_file_round_trip(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("problem = example1b\nd = 3   # small\nsigma = 0.1, 0.2\n")
    p = problems.load_problem_file(path)
    assert p.d == 3 and p.constants["sigma"] == [0.1, 0.2, 0.1]
    problems.write_problem_file(p, tmp_path / "q.txt")
    q = problems.load_problem_file(tmp_path / "q.txt")
    assert q.constants == p.constants


def test_problem_file_requires_id(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("d = 3\n")
    with pytest.raises(ValueError, match="problem"):
        problems.load_problem_file(path)


def test_unknown_problem():
    with pytest.raises(KeyError):
        problems.get_problem("example9")


def _generator_residual(p, t, s, x, eps=1e-4):
    """L phi + f(Z = sigma^T grad phi) for phi = Y(t, .), by central differences."""
    d = p.d
    phi = lambda z: p.closed_y(t, z[None])[0, 0]
    grad = np.zeros(d)
    hess_diag = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        grad[i] = (phi(x + e) - phi(x - e)) / (2 * eps)
        hess_diag[i] = (phi(x + e) - 2 * phi(x) + phi(x - e)) / eps**2
    # both forwards have diagonal sigma, so only the Hessian diagonal contributes
    drift = p.drift(s, x[None])[0]
    sig = np.diagonal(p.sigma(s, x[None])[0])
    generator = drift @ grad + 0.5 * np.sum(sig**2 * hess_diag)
    z = p.closed_z(t, s, x[None], x[None])
    f = p.driver(t, s, x[None], None, z)[0, 0]
    return generator + f


@pytest.mark.parametrize("name", ["example1a", "example1b"])
def test_driver_satisfies_generator_identity(name):
    p = problems.get_problem(name)
    rng_ = np.random.default_rng(4)
    for _ in range(10):
        x = rng_.uniform(0.5, 1.5, size=p.d)
        t, s = sorted(rng_.uniform(0, 1, size=2))
        assert abs(_generator_residual(p, t, s, x)) <= 1e-5


def test_driver_lipschitz_probe():
    p = problems.example_1a()
    rng_ = np.random.default_rng(1)
    x = rng_.uniform(0, 2, size=(200, 5))
    z1, z2 = rng_.normal(size=(2, 200, 5))
    q = np.abs(p.driver(0.4, 0.6, x, None, z1) - p.driver(0.4, 0.6, x, None, z2))[:, 0]
    assert np.all(q <= p.lipschitz_yz * np.linalg.norm(z1 - z2, axis=1) * (1 + 1e-12))


@pytest.mark.parametrize("name", ALL)
def test_plugin_residual_shrinks_with_refinement(name):
    p = problems.get_problem(name)
    coarse, fine = plugin_loss(p, 10), plugin_loss(p, 80)
    assert fine <= max(coarse / 4, 1e-20)


def test_example2_plugin_is_exact_to_rounding():
    p = problems.example_2()
    for N in (10, 40):
        assert plugin_loss(p, N, M=2**10) <= 1e-20

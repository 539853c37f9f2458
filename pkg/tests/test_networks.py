import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bsvie import networks
from bsvie.autodiff import DimensionError
from bsvie.networks import CheckpointError, NetworkFields, NetworkParams


def closed_count(d, ell, wy=50, wz=100):
    y = wy * (d + 1) + wy + 2 * (wy * wy + wy) + wy + 1
    z = wz * (2 * d + 2) + wz + 2 * (wz * wz + wz) + ell * wz + ell
    return y, z


def test_parameter_counts_reference_dimension():
    p = networks.init(0, 5, 5)
    assert p.count("y.") == 5501  # 350 + 2 * 2550 + 51
    assert p.count("z.") == 22005


@given(d=st.integers(1, 30), ell=st.integers(1, 30))
def test_parameter_counts_any_dimension(d, ell):
    shapes = networks.expected_shapes(d, ell)
    y = sum(int(np.prod(s)) for n, s in shapes.items() if n.startswith("y."))
    z = sum(int(np.prod(s)) for n, s in shapes.items() if n.startswith("z."))
    assert (y, z) == closed_count(d, ell)


def test_shapes_asserted_at_construction():
    p = networks.init(0, 2, 3)
    bad = dict(p.arrays)
    bad["z.W4"] = np.zeros((2, 100))
    with pytest.raises(DimensionError):
        NetworkParams(2, 3, bad)


def test_zero_parameters_give_zero_output():
    p = networks.init(0, 3, 2, scheme="zeros")
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(networks.y_forward(p, 0.3, x), np.zeros((4, 1)))
    assert np.array_equal(networks.z_forward(p, 0.1, 0.5, x, x), np.zeros((4, 2)))


def test_hand_set_single_unit_chain():
    # one active unit per layer: y = 2 * relu(3 * relu(0.5*t + x1 - 0.25) + 0.1) - 1
    p = networks.init(0, 2, 1, scheme="zeros")
    a = p.arrays
    a["y.W1"][0] = [0.5, 1.0, 0.0]
    a["y.b1"][0] = -0.25
    a["y.W2"][0, 0] = 3.0
    a["y.b2"][0] = 0.1
    a["y.W3"][0, 0] = 1.0
    a["y.W4"][0, 0] = 2.0
    a["y.b4"][0] = -1.0
    t, x = 0.5, np.array([[1.0, 7.0]])
    h1 = max(0.5 * t + 1.0 - 0.25, 0)
    h2 = max(3 * h1 + 0.1, 0)
    assert networks.y_forward(p, t, x)[0, 0] == pytest.approx(2 * h2 - 1, abs=1e-15)


def test_identical_inputs_identical_outputs_and_permutation():
    p = networks.init(1, 3, 3)
    rng = np.random.default_rng(2)
    x = np.repeat(rng.normal(size=(1, 3)), 5, axis=0)
    out = networks.y_forward(p, 0.2, x)
    # BLAS may round tail rows of a gemm block differently, by an ulp at most
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), rtol=4e-16, atol=0)
    assert np.array_equal(out, networks.y_forward(p, 0.2, x))
    xs = rng.normal(size=(6, 3))
    xt = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    z = networks.z_forward(p, 0.1, 0.4, xt, xs)
    np.testing.assert_allclose(networks.z_forward(p, 0.1, 0.4, xt[perm], xs[perm]), z[perm], rtol=1e-15, atol=1e-15)


def test_decoupled_mode_ignores_x_t():
    p = networks.init(3, 2, 2)
    f = NetworkFields(p, decoupled=True)
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(4, 2))
    assert np.array_equal(f.z(0.1, 0.3, rng.normal(size=(4, 2)), xs), f.z(0.1, 0.3, xs, xs))


def test_z_below_diagonal_rejected():
    f = NetworkFields(networks.init(0, 2, 2))
    with pytest.raises(ValueError):
        f.z(0.5, 0.25, np.zeros((1, 2)), np.zeros((1, 2)))


def test_wrong_input_dimension():
    with pytest.raises(DimensionError):
        networks.y_forward(networks.init(0, 3, 3), 0.0, np.zeros((2, 4)))


def test_init_reproducible_and_seed_dependent():
    a, b, c = networks.init(4, 5, 5), networks.init(4, 5, 5), networks.init(5, 5, 5)
    assert all(np.array_equal(a.arrays[n], b.arrays[n]) for n in a.names())
    assert not np.array_equal(a.arrays["y.W1"], c.arrays["y.W1"])
    assert not np.any(a.arrays["y.b1"])


def test_he_uniform_spread():
    w = networks.init(0, 5, 5).arrays["y.W2"]
    assert w.size == 2500
    assert abs(w.std() / np.sqrt(2 / 50) - 1) <= 0.10


@given(seed=st.integers(0, 1000), lam=st.floats(-1e-4, 1e-4))
def test_piecewise_affine_in_x(seed, lam):
    # inputs spaced closely enough that no ReLU changes state stay collinear
    p = networks.init(seed, 3, 2)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=3)
    direction = rng.normal(size=3)
    pts = np.stack([x0 - 1e-4 * direction, x0 + lam * direction, x0 + 1e-4 * direction])
    f = NetworkFields(p)
    for out in (f.y(0.3, pts), f.z(0.2, 0.6, pts, pts)):
        w = (lam + 1e-4) / 2e-4
        np.testing.assert_allclose(out[1], (1 - w) * out[0] + w * out[2], rtol=0, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    p = networks.init(9, 4, 3, y_width=7, z_width=6)
    path = tmp_path / "ck.txt"
    networks.save_checkpoint(p, path, problem="example1a")
    q = networks.load_checkpoint(path)
    assert (q.d, q.ell, q.y_width, q.z_width) == (4, 3, 7, 6)
    assert q.meta["problem"] == "example1a"
    assert all(np.array_equal(p.arrays[n], q.arrays[n]) for n in p.names())


def test_corrupted_checkpoint_rejected(tmp_path):
    path = tmp_path / "ck.txt"
    networks.save_checkpoint(networks.init(0, 2, 2, y_width=3, z_width=3), path)
    text = path.read_text()
    path.write_text(text.replace("tensor y.W1", "tensor y.W9", 1))
    with pytest.raises(CheckpointError):
        networks.load_checkpoint(path)
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        networks.load_checkpoint(path)

"""Network engine tests: gradients checked against finite differences."""

import io

import numpy as np

from contactsim import mlp
from contactsim.mlp import ACT_LINEAR, ACT_RELU, ACT_SIGMOID, ACT_TANH, Mlp

RNG = np.random.default_rng(7)


def numeric_param_grad(net, x, y, h=1e-6):
    flat = net.flatten()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            net.set_flat(probe)
            err = net.forward(x) - y
            grad[i] += sign * float((err * err).sum())
        grad[i] /= 2 * h
    net.set_flat(flat)
    return grad


def analytic_param_grad(net, x, y):
    acts = net.forward_cached(x)
    gw, gb = net.backward(acts, 2.0 * (acts[-1] - y))
    return np.concatenate([g.ravel() for g in gw] + [g for g in gb])


def test_backward_matches_finite_differences():
    # tanh/sigmoid are smooth; relu checked separately away from kinks
    for acts in ([ACT_TANH, ACT_SIGMOID, ACT_LINEAR], [ACT_TANH, ACT_TANH, ACT_TANH]):
        net = Mlp.create([3, 5, 4, 2], acts, seed=1)
        x = RNG.normal(size=(6, 3))
        y = RNG.normal(size=(6, 2))
        assert np.allclose(analytic_param_grad(net, x, y), numeric_param_grad(net, x, y), atol=1e-6)


def test_backward_relu_away_from_kinks():
    net = Mlp.create([2, 8, 1], [ACT_RELU, ACT_LINEAR], seed=2)
    x = RNG.normal(size=(5, 2)) + 3.0  # keep preactivations clear of zero
    y = RNG.normal(size=(5, 1))
    assert np.allclose(analytic_param_grad(net, x, y), numeric_param_grad(net, x, y), atol=1e-5)


def test_input_gradient_matches_finite_differences():
    net = Mlp.create([3, 7, 6, 1], [ACT_RELU, ACT_RELU, ACT_TANH], seed=3)
    x = RNG.normal(size=(4, 3)) * 0.5
    g = net.scalar_input_gradient(x)
    h = 1e-6
    for s in range(x.shape[0]):
        for i in range(3):
            xp, xm = x[s].copy(), x[s].copy()
            xp[i] += h
            xm[i] -= h
            num = (net.forward(xp[None])[0, 0] - net.forward(xm[None])[0, 0]) / (2 * h)
            assert abs(g[s, i] - num) < 1e-5


def test_multi_output_jacobian_shape_and_values():
    net = Mlp.create([4, 6, 3], [ACT_TANH, ACT_LINEAR], seed=4)
    x = RNG.normal(size=(2, 4))
    jac = net.input_gradient(x)
    assert jac.shape == (2, 3, 4)
    h = 1e-6
    for j in range(3):
        for i in range(4):
            xp, xm = x[0].copy(), x[0].copy()
            xp[i] += h
            xm[i] -= h
            num = (net.forward(xp[None])[0, j] - net.forward(xm[None])[0, j]) / (2 * h)
            assert abs(jac[0, j, i] - num) < 1e-6


def test_training_fits_smooth_function():
    rng = np.random.default_rng(11)
    x = rng.uniform(-2, 2, size=(400, 1))
    y = np.sin(x)
    net = Mlp.create([1, 32, 32, 1], [ACT_TANH, ACT_TANH, ACT_LINEAR], seed=5)
    hist = mlp.train(net, x, y, epochs=300, batch_size=64, lr=0.02, seed=6)
    assert hist[-1] < 1e-3
    assert hist[-1] < hist[0] * 0.01


def test_training_is_deterministic_for_fixed_seed():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(100, 2))
    y = (x[:, :1] * x[:, 1:]).copy()

    def run():
        net = Mlp.create([2, 8, 1], [ACT_TANH, ACT_LINEAR], seed=9)
        mlp.train(net, x, y, epochs=20, batch_size=16, lr=0.05, seed=10)
        return net.flatten()

    assert np.array_equal(run(), run())


def test_serialization_roundtrip_is_bitwise():
    net = Mlp.create([3, 64, 64, 1], [ACT_RELU, ACT_RELU, ACT_TANH], seed=13)
    buf = io.BytesIO()
    mlp.write_section(buf, net)
    buf.write(b"trailing metadata belongs to the caller")
    buf.seek(0)
    back = mlp.read_section(buf)
    assert back.activations == net.activations
    for a, b in zip(back.weights, net.weights):
        assert np.array_equal(a, b)
    for a, b in zip(back.biases, net.biases):
        assert np.array_equal(a, b)
    x = RNG.normal(size=(10, 3))
    assert np.array_equal(back.forward(x), net.forward(x))


def test_flatten_set_flat_roundtrip():
    net = Mlp.create([4, 5, 2], [ACT_TANH, ACT_LINEAR], seed=14)
    flat = net.flatten()
    other = Mlp.create([4, 5, 2], [ACT_TANH, ACT_LINEAR], seed=99)
    other.set_flat(flat)
    x = RNG.normal(size=(3, 4))
    assert np.allclose(other.forward(x), net.forward(x))
    assert flat.size == net.parameter_count()


def test_forward_is_batch_consistent():
    net = Mlp.create([3, 10, 1], [ACT_RELU, ACT_TANH], seed=15)
    x = RNG.normal(size=(8, 3))
    full = net.forward(x)
    rows = np.vstack([net.forward(x[i : i + 1]) for i in range(8)])
    assert np.allclose(full, rows, atol=1e-14)

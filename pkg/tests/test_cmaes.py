import numpy as np
import pytest

from contactsim.cmaes import CmaesConfig, cmaes_minimize, default_population


def sphere(x):
    return float(np.sum(x * x))


def test_default_population_formula():
    assert default_population(1) == 4
    assert default_population(10) == 10
    assert default_population(2558) == 27


def test_config_rejects_bad_values():
    with pytest.raises(ValueError, match="population"):
        CmaesConfig(population=3)
    with pytest.raises(ValueError, match="sigma0"):
        CmaesConfig(sigma0=0.0)
    with pytest.raises(ValueError, match="max_generations"):
        CmaesConfig(max_generations=0)


def test_one_dimensional_quadratic():
    res = cmaes_minimize(
        lambda x: (x[0] - 3.0) ** 2,
        [0.0],
        CmaesConfig(sigma0=0.5, max_generations=200, seed=0),
    )
    assert abs(res.x[0] - 3.0) < 1e-6
    assert res.generations <= 200


def test_shifted_sphere_six_dims():
    target = np.array([1.0, -2.0, 0.5, 0.0, 3.0, -1.0])
    res = cmaes_minimize(
        lambda x: sphere(x - target),
        np.zeros(6),
        CmaesConfig(sigma0=1.0, max_generations=300, seed=1),
    )
    assert np.max(np.abs(res.x - target)) < 1e-6


def test_ill_conditioned_quadratic():
    scales = np.array([1.0, 3.0, 10.0, 30.0, 100.0])
    res = cmaes_minimize(
        lambda x: float(np.sum((scales * x) ** 2)),
        np.ones(5),
        CmaesConfig(sigma0=0.5, max_generations=500, seed=2),
    )
    assert res.cost < 1e-10


def test_rosenbrock_two_dims():
    def rosen(x):
        return float(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)

    res = cmaes_minimize(
        rosen, [-1.0, 1.0], CmaesConfig(sigma0=0.5, max_generations=600, seed=3)
    )
    assert res.cost < 1e-8


def test_seeded_determinism():
    cfg = CmaesConfig(sigma0=0.7, max_generations=60, seed=9)
    r1 = cmaes_minimize(sphere, np.ones(4), cfg)
    r2 = cmaes_minimize(sphere, np.ones(4), cfg)
    assert np.array_equal(r1.x, r2.x)
    assert r1.cost == r2.cost
    assert np.array_equal(r1.history, r2.history)


def test_nan_costs_lose_selection():
    def partial(x):
        if x[0] < -0.5:
            return float("nan")
        return float((x[0] - 1.0) ** 2 + np.sum(x[1:] ** 2))

    res = cmaes_minimize(
        partial, [-1.0, 0.3], CmaesConfig(sigma0=0.5, max_generations=300, seed=4)
    )
    assert np.isfinite(res.cost)
    assert res.cost < 1e-6


def test_best_ever_history_non_increasing():
    res = cmaes_minimize(
        sphere, np.full(3, 2.0), CmaesConfig(sigma0=0.5, max_generations=80, seed=5)
    )
    assert np.all(np.diff(res.history) <= 0.0)


def test_map_fn_receives_whole_population():
    calls = []

    def counting_map(fn, xs):
        calls.append(len(xs))
        return [fn(x) for x in xs]

    cfg = CmaesConfig(population=8, sigma0=0.5, max_generations=10, seed=6)
    res = cmaes_minimize(sphere, np.ones(2), cfg, map_fn=counting_map)
    assert calls == [8] * res.generations
    assert res.evaluations == 8 * res.generations


def test_callback_can_stop_early():
    res = cmaes_minimize(
        sphere,
        np.ones(3),
        CmaesConfig(sigma0=0.5, max_generations=500, seed=7),
        callback=lambda gen, cost, sigma: gen >= 5,
    )
    assert res.generations == 5

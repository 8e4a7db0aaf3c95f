"""Covariance matrix adaptation evolution strategy, (mu/mu_w, lambda).

Gradient-free minimizer for costs that are cheap to evaluate but not
differentiable, such as a simulation error driven by network weights.
Population members of one generation are independent, so `map_fn` can be
swapped for a parallel mapper; the strategy update itself is serial.
"""

import math
from dataclasses import dataclass, field

import numpy as np


def default_population(n):
    """4 + floor(3 ln n), the standard population for dimension n."""
    return 4 + int(3.0 * math.log(max(n, 1)))


@dataclass
class CmaesConfig:
    population: int = 0  # 0 picks default_population(n)
    sigma0: float = 0.3
    max_generations: int = 200
    seed: int = 0
    sigma_stop: float = 1e-12

    def __post_init__(self):
        if self.population != 0 and self.population < 4:
            raise ValueError("population must be at least 4")
        if self.sigma0 <= 0.0:
            raise ValueError("sigma0 must be positive")
        if self.max_generations < 1:
            raise ValueError("max_generations must be at least 1")


@dataclass
class CmaesResult:
    x: np.ndarray
    cost: float
    generations: int
    evaluations: int
    history: np.ndarray  # best-ever cost after each generation


def cmaes_minimize(fn, x0, cfg=None, map_fn=map, callback=None):
    """Minimize fn over R^n starting the search distribution at x0.

    NaN costs are treated as +inf so broken candidates lose selection
    without poisoning the update.  callback(gen, best_cost, sigma) runs
    after each generation; returning True from it stops the search."""
    cfg = cfg or CmaesConfig()
    mean = np.asarray(x0, dtype=float).reshape(-1).copy()
    n = mean.size
    lam = cfg.population if cfg.population else default_population(n)
    mu = lam // 2

    w = np.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mu_eff = 1.0 / np.sum(w**2)

    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff))
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))

    sigma = cfg.sigma0
    cov = np.eye(n)
    b = np.eye(n)
    d = np.ones(n)
    p_sigma = np.zeros(n)
    p_c = np.zeros(n)
    rng = np.random.default_rng(cfg.seed)

    best_x = mean.copy()
    best_cost = math.inf
    history = []
    evals = 0
    last_eig = 0
    gen = 0
    for gen in range(1, cfg.max_generations + 1):
        z = rng.standard_normal((lam, n))
        y = z @ (b * d).T  # y_k = B diag(d) z_k
        xs = mean + sigma * y
        costs = np.array([float(c) for c in map_fn(fn, list(xs))])
        costs = np.where(np.isnan(costs), np.inf, costs)
        evals += lam

        order = np.argsort(costs, kind="stable")[:mu]
        if costs[order[0]] < best_cost:
            best_cost = float(costs[order[0]])
            best_x = xs[order[0]].copy()
        history.append(best_cost)

        y_w = w @ y[order]
        z_w = w @ z[order]
        mean = mean + sigma * y_w

        p_sigma = (1.0 - c_sigma) * p_sigma + math.sqrt(
            c_sigma * (2.0 - c_sigma) * mu_eff
        ) * (b @ z_w)
        decay = 1.0 - (1.0 - c_sigma) ** (2.0 * evals / lam)
        h_sigma = float(
            np.linalg.norm(p_sigma) / math.sqrt(decay) / chi_n < 1.4 + 2.0 / (n + 1.0)
        )
        p_c = (1.0 - c_c) * p_c + h_sigma * math.sqrt(c_c * (2.0 - c_c) * mu_eff) * y_w

        rank_mu = (y[order].T * w) @ y[order]
        cov = (
            (1.0 - c_1 - c_mu) * cov
            + c_1 * (np.outer(p_c, p_c) + (1.0 - h_sigma) * c_c * (2.0 - c_c) * cov)
            + c_mu * rank_mu
        )
        sigma *= math.exp((c_sigma / d_sigma) * (np.linalg.norm(p_sigma) / chi_n - 1.0))

        # eigendecomposition is the expensive part at high n; refresh lazily
        if evals - last_eig > lam / (c_1 + c_mu) / n / 10.0:
            last_eig = evals
            cov = np.triu(cov) + np.triu(cov, 1).T
            eigvals, b = np.linalg.eigh(cov)
            d = np.sqrt(np.maximum(eigvals, 1e-30))

        if callback is not None and callback(gen, best_cost, sigma):
            break
        if sigma < cfg.sigma_stop:
            break

    return CmaesResult(
        x=best_x,
        cost=best_cost,
        generations=gen,
        evaluations=evals,
        history=np.array(history),
    )

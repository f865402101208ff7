"""Grasp-point planning by Bayesian optimization over the two edge parameters.

A candidate ``(u_L, u_R)`` in [0, 1]^2 is snapped to one node on each free
edge; the objective is the total displacement the policy imposes on the grasp
points while driving the controlled points to their targets.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.stats import norm, qmc

from tissue_isp.env import EpisodeSpec
from tissue_isp.errors import ConfigError, NumericalError
from tissue_isp.mesh import candidate_at

JITTER_MAX = 1e-4
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class PlanConfig:
    n_initial: int = 5
    n_total: int = 20
    early_stop_reward: float = 10.0
    rollout_cap: int = 100
    length_scale: float = 0.2
    noise_ratio: float = 1e-6
    ei_starts: int = 64
    ei_iterations: int = 100

    def __post_init__(self):
        if not 1 <= self.n_initial < self.n_total:
            raise ConfigError("need 1 <= n_initial < n_total")
        if self.rollout_cap < 1:
            raise ConfigError("rollout_cap must be >= 1")
        if not self.length_scale > 0 or not self.noise_ratio > 0:
            raise ConfigError("length_scale and noise_ratio must be positive")


# -- Gaussian process ------------------------------------------------------------


def matern52(A, B, length_scale) -> np.ndarray:
    d = np.sqrt(np.sum(((A[:, None, :] - B[None, :, :]) / length_scale) ** 2, axis=-1))
    s = np.sqrt(5.0) * d
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


@dataclass
class GpModel:
    X: np.ndarray
    y: np.ndarray
    length_scale: np.ndarray
    y_mean: float
    y_std: float
    noise: float  # standardized units; unit signal variance
    chol: np.ndarray
    weights: np.ndarray

    @property
    def signal_variance(self) -> float:
        return self.y_std**2

    @property
    def noise_variance(self) -> float:
        return self.noise * self.y_std**2


def gp_fit(X, y, length_scale=0.2, noise_ratio=1e-6) -> GpModel:
    """Exact regression with fixed hyperparameters on standardized targets.

    The signal variance is the sample variance of ``y`` (unit after
    standardization); a constant or single target falls back to unit scale.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 1 or X.shape[0] != y.size:
        raise ConfigError("need at least one point and matching target count")
    ls = np.broadcast_to(np.asarray(length_scale, dtype=float), (X.shape[1],)).copy()
    mean = float(y.mean())
    std = float(y.std(ddof=1)) if y.size > 1 else 0.0
    if not std > 0:
        std = 1.0
    z = (y - mean) / std
    K = matern52(X, X, ls)
    jitter = 0.0
    while True:
        try:
            L = linalg.cholesky(K + (noise_ratio + jitter) * np.eye(len(z)), lower=True)
            break
        except linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX:
                raise NumericalError("kernel matrix not positive definite after jitter escalation") from None
    w = linalg.cho_solve((L, True), z)
    return GpModel(X, y, ls, mean, std, noise_ratio + jitter, L, w)


def gp_predict(model: GpModel, Q):
    """Posterior mean and variance in target units at each row of ``Q``."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Ks = matern52(Q, model.X, model.length_scale)
    mu = Ks @ model.weights
    v = linalg.solve_triangular(model.chol, Ks.T, lower=True)
    var = 1.0 - np.sum(v * v, axis=0)
    var = np.where(var < VAR_FLOOR, 0.0, var)
    return model.y_mean + model.y_std * mu, model.y_std**2 * var


def ei_from_moments(mu, var, best) -> np.ndarray:
    """Minimization-form expected improvement ``E[max(best - Y, 0)]``."""
    mu, var = np.asarray(mu, dtype=float), np.asarray(var, dtype=float)
    s = np.sqrt(np.maximum(var, 0.0))
    imp = best - mu
    out = np.maximum(imp, 0.0)
    pos = s > 0
    # a vanishing std sends |z| to inf, where the pdf underflows to 0 as it should
    with np.errstate(over="ignore"):
        z = imp[pos] / s[pos]
        out[pos] = imp[pos] * norm.cdf(z) + s[pos] * norm.pdf(z)
    return np.maximum(out, 0.0)


def expected_improvement(model: GpModel, Q, best: float) -> np.ndarray:
    mu, var = gp_predict(model, Q)
    return ei_from_moments(mu, var, best)


def maximize_ei(model: GpModel, best: float, rng: np.random.Generator, starts=64, iterations=100):
    """Multi-start coordinate pattern search on [0, 1]^d."""
    d = model.X.shape[1]
    P = rng.uniform(0.0, 1.0, size=(starts, d))
    val = expected_improvement(model, P, best)
    step = np.full(starts, 0.1)
    moves = np.concatenate([np.eye(d), -np.eye(d)])
    for _ in range(iterations):
        cand = np.clip(P[:, None, :] + step[:, None, None] * moves[None], 0.0, 1.0)
        cv = expected_improvement(model, cand.reshape(-1, d), best).reshape(starts, -1)
        j = np.argmax(cv, axis=1)
        gain = cv[np.arange(starts), j] > val
        P[gain] = cand[gain, j[gain]]
        val[gain] = cv[gain, j[gain]]
        step[~gain] *= 0.5
    k = int(np.argmax(val))
    return P[k].copy(), float(val[k])


# -- optimization loop -----------------------------------------------------------


@dataclass
class Evaluation:
    parameters: tuple[float, float]
    objective: float
    steps: int = 0
    grasp_nodes: tuple[int, ...] = ()
    early_stopped: bool = False
    diverged: bool = False
    error: str | None = None


def minimize(f, cfg: PlanConfig, seed: int) -> list[Evaluation]:
    """Latin-hypercube start, then EI-driven proposals until ``n_total`` calls.

    ``f(u)`` returns an :class:`Evaluation` or a float. A raised exception is
    logged as an infinite objective and the loop continues.
    """
    rng = np.random.default_rng(seed)
    lhs = qmc.LatinHypercube(d=2, seed=rng).random(cfg.n_initial)
    log: list[Evaluation] = []

    def call(u):
        u = tuple(float(x) for x in u)
        try:
            r = f(np.array(u))
        except Exception as exc:  # keep planning around a failed candidate
            return Evaluation(u, float("inf"), error=f"{type(exc).__name__}: {exc}")
        return r if isinstance(r, Evaluation) else Evaluation(u, float(r))

    for u in lhs:
        log.append(call(u))
    while len(log) < cfg.n_total:
        ok = [e for e in log if np.isfinite(e.objective)]
        if not ok:
            u = rng.uniform(0.0, 1.0, 2)
        else:
            X = np.array([e.parameters for e in ok])
            y = np.array([e.objective for e in ok])
            model = gp_fit(X, y, cfg.length_scale, cfg.noise_ratio)
            u, _ = maximize_ei(model, float(y.min()), rng, cfg.ei_starts, cfg.ei_iterations)
        log.append(call(u))
    return log


@dataclass
class PlanResult:
    best_parameters: tuple[float, float]
    best_grasp_nodes: tuple[int, ...]
    best_objective: float
    evaluation_log: list[Evaluation] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self, include_time: bool = False) -> dict:
        d = {
            "best_parameters": list(self.best_parameters),
            "best_grasp_nodes": list(self.best_grasp_nodes),
            "best_objective_mm": self.best_objective,
            "evaluation_log": [asdict(e) for e in self.evaluation_log],
        }
        if include_time:
            d["wall_time_s"] = self.wall_time
        return d

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)


def best_of(log: list[Evaluation]) -> Evaluation:
    # first minimum wins on ties
    return min(log, key=lambda e: e.objective)


def spec_with_grasps(template: EpisodeSpec, mesh, u) -> EpisodeSpec:
    nodes = (candidate_at(mesh, "left", float(u[0])), candidate_at(mesh, "right", float(u[1])))
    return replace(template, grasp_nodes=nodes)


def evaluate_objective(u, template: EpisodeSpec, policy, env, cfg: PlanConfig) -> Evaluation:
    """Roll out the policy from the grasp nodes selected by ``u``.

    ``env`` must be configured with the planning early stop and rollout cap.
    The objective is the norm of the stacked grasp displacements (mm); a
    diverged rollout scores ten tissue side lengths.
    """
    spec = spec_with_grasps(template, env.mesh, u)
    env.reset(fixed_spec=spec)
    q0 = env.grasp_positions().copy()
    steps, early, diverged = 0, False, False
    while not env.done:
        res = env.step(policy.act_env(env))
        steps += 1
        early, diverged = res.early_stopped, res.diverged
    if diverged:
        obj = 10.0 * env.mesh.side_length
    else:
        obj = float(np.linalg.norm(env.grasp_positions() - q0))
    nodes = tuple(int(k) for k in spec.grasp_nodes)
    return Evaluation(tuple(float(x) for x in u), obj, steps, nodes, bool(early), bool(diverged))


def planning_env(env_factory, cfg: PlanConfig, seed: int):
    env = env_factory(seed)
    env.config = replace(env.config, early_stop_reward=cfg.early_stop_reward, episode_length=cfg.rollout_cap)
    return env


def plan(template: EpisodeSpec, policy, env_factory, cfg: PlanConfig, seed: int) -> PlanResult:
    t0 = time.perf_counter()
    env = planning_env(env_factory, cfg, seed)
    log = minimize(lambda u: evaluate_objective(u, template, policy, env, cfg), cfg, seed)
    best = best_of(log)
    return PlanResult(best.parameters, best.grasp_nodes, best.objective, log, time.perf_counter() - t0)

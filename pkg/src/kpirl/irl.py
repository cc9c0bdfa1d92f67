"""Cost learning from keypoint demonstrations.

Two learners share the planner's inner loop:

* :func:`train_irl` differentiates the imitation loss through the unrolled
  action optimization and takes gradient steps on the cost parameters.
* :func:`apprenticeship_train` is the feature-expectation matching baseline
  (projection variant of max-margin apprenticeship learning).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import diffcore
from .costs import CostFunction, LinearFeatureCost, irl_loss, make_cost
from .diffcore import Graph
from .dynamics import rollout_graph, state_to_graph
from .planner import (gradient_steps, goal_mse, optimize_actions, relative_distance,
                      selection_matrix, trajectory_rows, xy_rows, clamp_actions, execute_plan)
from .sim_env import N_JOINTS, ArmEnv, Demonstration, SystemState


class IrlError(RuntimeError):
    pass


@dataclass(frozen=True)
class Episode:
    """A start state paired with the demonstrated keypoint trajectory ``(T, K, 3)``."""

    start: SystemState
    keypoints: np.ndarray

    @classmethod
    def from_demo(cls, demo: Demonstration) -> "Episode":
        return cls(demo.start_state, np.asarray(demo.keypoints, dtype=float))

    @property
    def goal(self) -> np.ndarray:
        return self.keypoints[-1]

    @property
    def horizon(self) -> int:
        return self.keypoints.shape[0]


def episodes(demos: Sequence, starts: Optional[Sequence[SystemState]] = None) -> list[Episode]:
    """Normalize demonstrations (or ready episodes) into :class:`Episode` objects."""
    out = []
    for i, d in enumerate(demos):
        if isinstance(d, Episode):
            out.append(d)
            continue
        if starts is not None:
            start = starts[i]
        elif d.relative:
            raise ValueError("relative demonstrations need explicit start states")
        else:
            start = d.start_state
        out.append(Episode(start, np.asarray(d.keypoints, dtype=float)))
    if out:
        T, K = out[0].keypoints.shape[:2]
        for e in out:
            if e.keypoints.shape[:2] != (T, K):
                raise ValueError(f"demonstrations disagree on horizon/keypoints: {e.keypoints.shape[:2]} vs {(T, K)}")
    return out


@dataclass
class IrlConfig:
    eta: float = 0.001
    alpha: float = 0.01
    iters_max: int = 10
    epochs: int = 500
    cost_family: str = "weighted"
    n_kernels: int = 5
    seed: int = 0
    gamma: float = 0.9
    margin: float = 1.0
    eval_alpha: Optional[float] = None
    eval_iters: Optional[int] = None
    eval_every: int = 1
    backtrack: bool = False

    def __post_init__(self):
        if self.eta <= 0 or self.alpha <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.iters_max < 1:
            raise ValueError("epochs and iters_max must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def test_alpha(self) -> float:
        return self.alpha if self.eval_alpha is None else self.eval_alpha

    @property
    def test_iters(self) -> int:
        return self.iters_max if self.eval_iters is None else self.eval_iters


@dataclass
class IrlRecord:
    """Per-epoch training history.  ``loss`` holds the margin for the baseline."""

    loss: list = field(default_factory=list)
    params: list = field(default_factory=list)
    test_distance: list = field(default_factory=list)
    status: str = "completed"
    seconds: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def test_mean(self) -> np.ndarray:
        return np.array([np.mean(d) if len(d) else np.nan for d in self.test_distance])

    def test_std(self) -> np.ndarray:
        return np.array([np.std(d) if len(d) else np.nan for d in self.test_distance])


def _batch(eps: Sequence[Episode]):
    starts = [e.start for e in eps]
    goals = np.stack([e.goal for e in eps])
    # rows ordered frame-major: row t*B + b
    demo_rows = xy_rows(np.stack([e.keypoints for e in eps], axis=1)).reshape(-1, 2 * eps[0].keypoints.shape[1])
    return starts, goals, demo_rows


def outer_gradient(cost: CostFunction, model, eps: Sequence[Episode], alpha: float, iters: int,
                   psi_value=None) -> tuple[float, np.ndarray]:
    """Mean imitation loss over ``eps`` and its gradient with respect to the cost parameters."""
    starts, goals, demo_rows = _batch(eps)
    B, T, K = len(eps), cost.horizon, eps[0].keypoints.shape[1]
    g = Graph()
    psi = g.variable(cost.params if psi_value is None else psi_value)
    S = g.constant(selection_matrix(K))
    s0 = state_to_graph(g, starts)
    goal_rows = g.constant(np.tile(xy_rows(goals), (T, 1)))
    u0 = [g.variable(np.zeros((B, N_JOINTS))) for _ in range(T - 1)]
    u, _ = gradient_steps(g, model, s0, u0, goal_rows, cost, psi, alpha, iters, B, S)
    pred = trajectory_rows(g, rollout_graph(g, model, s0, u), S)
    loss = g.scale(irl_loss(g, g.constant(demo_rows), pred), 1.0 / B)
    (grad,) = diffcore.gradient(loss, [psi])
    return float(loss.value), grad.value


def _check_horizon(cost: CostFunction, eps: Sequence[Episode]):
    for e in eps:
        if e.horizon != cost.horizon:
            raise ValueError(f"demonstration has T={e.horizon}, cost expects T={cost.horizon}")


def plan_distances(cost: CostFunction, model, eps: Sequence[Episode], alpha: float, iters: int) -> np.ndarray:
    """Relative distances of plans under ``cost`` from each episode's start to its goal."""
    if not eps:
        return np.zeros(0)
    plan = optimize_actions([e.start for e in eps], np.stack([e.goal for e in eps]), cost, model, alpha, iters)
    return plan.relative_distance


def train_irl(config: IrlConfig, model, demos, test_demos=(), cost: Optional[CostFunction] = None,
              progress=None) -> tuple[CostFunction, IrlRecord]:
    """Learn cost parameters by descending the imitation loss through the inner planner."""
    train = episodes(demos)
    test = episodes(test_demos)
    if not train:
        raise ValueError("need at least one training demonstration")
    T, K = train[0].keypoints.shape[:2]
    cost = make_cost(config.cost_family, K, T, n_kernels=config.n_kernels) if cost is None else cost.copy()
    _check_horizon(cost, train + test)
    record = IrlRecord()
    t0 = time.perf_counter()
    eta, prev = config.eta, None
    for epoch in range(config.epochs):
        loss, grad = outer_gradient(cost, model, train, config.alpha, config.iters_max)
        if config.backtrack and prev is not None and not loss <= prev[0]:
            # overshoot: retry the last step at half the rate, keep the halved rate
            eta /= 2
            loss, params, grad = prev
        else:
            if not np.all(np.isfinite(grad)):
                raise IrlError(f"non-finite outer gradient at epoch {epoch}")
            params = cost.params
            prev = (loss, params.copy(), grad)
        cost.params = params - eta * grad
        cost.project()
        record.loss.append(loss)
        record.params.append(cost.params.copy())
        record.test_distance.append(_maybe_eval(config, cost, model, test, epoch))
        if progress:
            progress(epoch, record)
    record.seconds = time.perf_counter() - t0
    return cost, record


def _maybe_eval(config, cost, model, test, epoch):
    if test and (epoch % config.eval_every == 0 or epoch == config.epochs - 1):
        return plan_distances(cost, model, test, config.test_alpha, config.test_iters).tolist()
    return []


# apprenticeship baseline


def features(z_t, z_goal) -> np.ndarray:
    """Per-dimension squared x/y deviations from the goal, ``(2K,)``."""
    z_t = np.asarray(z_t, dtype=float)
    z_goal = np.asarray(z_goal, dtype=float)
    if z_t.shape[0] != z_goal.shape[0]:
        raise ValueError(f"keypoint counts differ: {z_t.shape[0]} vs {z_goal.shape[0]}")
    return ((z_t[:, :2] - z_goal[:, :2]) ** 2).ravel()


@dataclass(frozen=True)
class FeatureExpectation:
    mu: np.ndarray
    gamma: float


def feature_expectation(trajectory, z_goal, gamma: float = 0.9) -> FeatureExpectation:
    """Discounted feature sum over frames ``0..T``."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    traj = np.asarray(trajectory, dtype=float)
    phi = np.stack([features(z, z_goal) for z in traj])
    return FeatureExpectation(np.sum(gamma ** np.arange(len(traj))[:, None] * phi, axis=0), gamma)


class ProjectionSolver:
    """Projection method for the max-margin weight subproblem.

    Keeps a running point ``mu_bar`` in the hull of the collected
    expectations, moved each round to the projection of the expert
    expectation onto the segment towards the newest ``mu``.  The weight is
    the unit vector ``mu_E - mu_bar`` and the margin its length.
    """

    def __init__(self, mu_expert):
        self.mu_expert = np.asarray(mu_expert, dtype=float)
        self.mu_bar = None

    def update(self, mu) -> tuple[Optional[np.ndarray], float]:
        """Add ``mu`` and return ``(psi, margin)``; ``psi`` is None when the margin vanishes."""
        mu = np.asarray(mu, dtype=float)
        if self.mu_bar is None:
            self.mu_bar = mu.copy()
        else:
            d = mu - self.mu_bar
            dd = float(d @ d)
            if dd > 0.0:
                step = float(np.clip(d @ (self.mu_expert - self.mu_bar) / dd, 0.0, 1.0))
                self.mu_bar = self.mu_bar + step * d
        w = self.mu_expert - self.mu_bar
        t = float(np.linalg.norm(w))
        if t == 0.0:
            return None, 0.0
        return w / t, t


def _feature_mean(trajs, goals, gamma):
    return np.mean([feature_expectation(tr, gl, gamma).mu for tr, gl in zip(trajs, goals)], axis=0)


def apprenticeship_train(config: IrlConfig, model, demos, test_demos=(), init_scale: float = 0.05,
                         progress=None) -> tuple[CostFunction, IrlRecord]:
    """Feature-expectation matching with the planner as inner loop.

    Features are taken on negated squared deviations so that a positive
    weight means "stay close"; the resulting cost ``psi . phi`` is what the
    planner minimizes.  ``init_scale`` sets the spread of the random first
    action sequence (0 gives zero actions).
    """
    train = episodes(demos)
    test = episodes(test_demos)
    if not train:
        raise ValueError("need at least one training demonstration")
    T, K = train[0].keypoints.shape[:2]
    _check_horizon(make_cost("weighted", K, T), train + test)
    starts = [e.start for e in train]
    goals = np.stack([e.goal for e in train])
    rng = np.random.default_rng(config.seed)
    cost = LinearFeatureCost(K, T, np.zeros(2 * K))
    solver = ProjectionSolver(-_feature_mean([e.keypoints for e in train], goals, config.gamma))

    u = rng.uniform(-init_scale, init_scale, size=(len(train), T - 1, N_JOINTS))
    mu = -_feature_mean(_predict(model, starts, u), goals, config.gamma)
    record = IrlRecord()
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        psi, margin = solver.update(mu)
        if psi is None or margin <= config.margin:
            record.status = f"converged at epoch {epoch}"
            break
        cost.params = psi
        plan = optimize_actions(starts, goals, cost, model, config.alpha, config.iters_max)
        mu = -_feature_mean(plan.predicted, goals, config.gamma)
        record.loss.append(margin)
        record.params.append(psi.copy())
        record.test_distance.append(_maybe_eval(config, cost, model, test, epoch))
        if progress:
            progress(epoch, record)
    record.seconds = time.perf_counter() - t0
    return cost, record


def _predict(model, starts, u) -> np.ndarray:
    g = Graph()
    states = rollout_graph(g, model, state_to_graph(g, starts), [g.constant(u[:, t]) for t in range(u.shape[1])])
    return np.stack([s.z.value for s in states], axis=1).reshape(len(starts), len(states), -1, 3)


# evaluation


def x_dims(n_keypoints: int) -> list[int]:
    return list(range(0, 2 * n_keypoints, 2))


def evaluate_cost(cost: CostFunction, test_demos, model, alpha: float, iters: int,
                  env: Optional[ArmEnv] = None) -> list[dict]:
    """Plan with ``cost`` on each test episode; report relative distances and goal MSE.

    Goal MSE uses the executed final keypoints when ``env`` is given and the
    predicted ones otherwise.
    """
    eps = episodes(test_demos)
    _check_horizon(cost, eps)
    plan = optimize_actions([e.start for e in eps], np.stack([e.goal for e in eps]), cost, model, alpha, iters)
    rows = []
    for b, e in enumerate(eps):
        pred = plan.predicted[b]
        final = pred[-1]
        if env is not None:
            u = clamp_actions(plan.actions[b], env.config.max_step)
            final = execute_plan(env, e.start, u)[-1].keypoints
        rows.append({
            "relative_distance": relative_distance(pred, e.goal),
            "relative_distance_x": relative_distance(pred, e.goal, x_dims(e.keypoints.shape[1])),
            "goal_mse": goal_mse(final, e.goal),
        })
    return rows


def aggregate(per_seed: Sequence[Sequence[dict]]) -> dict:
    """Mean and standard deviation of each metric over seeds (of per-seed means)."""
    keys = per_seed[0][0].keys()
    out = {}
    for k in keys:
        vals = np.array([np.mean([r[k] for r in rows]) for rows in per_seed])
        out[k] = (float(vals.mean()), float(vals.std()))
    return out


# files


def write_record_csv(path, record: IrlRecord) -> Path:
    path = Path(path)
    mean, std = record.test_mean(), record.test_std()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_rel_mean", "test_rel_std"])
        for i, loss in enumerate(record.loss):
            w.writerow([i, format(loss, ".17g"), format(mean[i], ".17g"), format(std[i], ".17g")])
    return path


def read_record_csv(path) -> dict:
    """Columns of a record CSV as float arrays."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in ("epoch", "train_loss", "test_rel_mean", "test_rel_std")}


# estimators


class _IrlEstimator(BaseEstimator):
    def _config(self) -> IrlConfig:
        return IrlConfig(eta=self.eta, alpha=self.alpha, iters_max=self.iters_max, epochs=self.epochs,
                         cost_family=getattr(self, "cost_family", "weighted"),
                         n_kernels=getattr(self, "n_kernels", 5), seed=self.random_state,
                         gamma=getattr(self, "gamma", 0.9), backtrack=getattr(self, "backtrack", False))

    def predict(self, starts, goals) -> np.ndarray:
        """Planned keypoint trajectories ``(B, T, K, 3)`` under the learned cost."""
        if not hasattr(self, "cost_"):
            raise RuntimeError(f"{type(self).__name__} is not fitted")
        return optimize_actions(list(starts), np.asarray(goals), self.cost_, self.model,
                                self.alpha, self.iters_max).predicted

    def score(self, demos, starts=None) -> float:
        """Negative mean relative distance of plans toward each demonstration's goal."""
        eps = episodes(demos, starts)
        return -float(np.mean(plan_distances(self.cost_, self.model, eps, self.alpha, self.iters_max)))


class BilevelIRL(_IrlEstimator):
    """Estimator wrapper around :func:`train_irl`; ``fit`` takes demonstrations."""

    def __init__(self, model=None, cost_family="weighted", n_kernels=5, eta=0.001, alpha=0.01,
                 iters_max=10, epochs=500, backtrack=False, random_state=0):
        self.model = model
        self.cost_family = cost_family
        self.n_kernels = n_kernels
        self.eta = eta
        self.alpha = alpha
        self.iters_max = iters_max
        self.epochs = epochs
        self.backtrack = backtrack
        self.random_state = random_state

    def fit(self, demos, starts=None):
        self.cost_, self.record_ = train_irl(self._config(), self.model, episodes(demos, starts))
        return self


class ApprenticeshipIRL(_IrlEstimator):
    def __init__(self, model=None, gamma=0.9, eta=0.001, alpha=0.01, iters_max=10, epochs=500, random_state=0):
        self.model = model
        self.gamma = gamma
        self.eta = eta
        self.alpha = alpha
        self.iters_max = iters_max
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, demos, starts=None):
        self.cost_, self.record_ = apprenticeship_train(self._config(), self.model, episodes(demos, starts))
        return self

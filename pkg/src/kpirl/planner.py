"""Gradient-descent action planning through a differentiable dynamics model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore
from .costs import CostFunction
from .diffcore import Graph, Node
from .dynamics import GraphState, rollout_graph, state_to_graph
from .sim_env import IMAGE_SIZE, N_JOINTS, ArmEnv, Demonstration, SystemState, states_to_demo, write_demo_csv

# Costs see keypoints in image-normalized units (pixels / 240).
KEYPOINT_SCALE = 1.0 / IMAGE_SIZE


class PlanningError(RuntimeError):
    pass


def selection_matrix(n_keypoints: int, scale: float = KEYPOINT_SCALE) -> np.ndarray:
    """``(3K, 2K)`` map from full keypoint rows to scaled x/y columns."""
    S = np.zeros((3 * n_keypoints, 2 * n_keypoints))
    for k in range(n_keypoints):
        S[3 * k, 2 * k] = scale
        S[3 * k + 1, 2 * k + 1] = scale
    return S


def xy_rows(keypoints: np.ndarray, scale: float = KEYPOINT_SCALE) -> np.ndarray:
    """``(..., K, 3)`` keypoints -> flattened scaled x/y, ``(..., 2K)``."""
    kp = np.asarray(keypoints, dtype=float)
    return (kp[..., :2] * scale).reshape(*kp.shape[:-2], -1)


def trajectory_rows(g: Graph, states: Sequence[GraphState], S: Node) -> Node:
    """Stack frames into ``(T*B, 2K)`` planning-unit rows."""
    return g.matmul(g.concat([s.z for s in states], axis=0), S)


def as_batch(s0, goal) -> tuple[list[SystemState], np.ndarray]:
    starts = [s0] if isinstance(s0, SystemState) else list(s0)
    goals = np.asarray(goal, dtype=float)
    if goals.ndim == 2:
        goals = goals[None]
    if goals.shape[0] != len(starts):
        raise ValueError(f"{len(starts)} start states but {goals.shape[0]} goals")
    return starts, goals


def gradient_steps(g: Graph, model, s0: GraphState, actions: list[Node], goal_rows: Node,
                   cost: CostFunction, psi: Optional[Node], alpha: float, iters: int,
                   batch: int, S: Node, check: bool = True) -> tuple[list[Node], list[float]]:
    """Record ``iters`` plain gradient-descent updates on the actions.

    Every update stays in ``g``, so the returned actions remain differentiable
    with respect to ``psi``.
    """
    history = []
    for i in range(iters):
        states = rollout_graph(g, model, s0, actions)
        c = cost.graph(g, trajectory_rows(g, states, S), goal_rows, psi, batch)
        history.append(float(c.value))
        grads = diffcore.gradient(c, actions)
        if check:
            for gr in grads:
                if not np.all(np.isfinite(gr.value)):
                    raise PlanningError(f"non-finite action gradient at iteration {i}")
        actions = [g.sub(u, g.scale(d, alpha)) for u, d in zip(actions, grads)]
    return actions, history


@dataclass
class PlanResult:
    """Optimized actions ``(B, T-1, 3)`` and predicted keypoints ``(B, T, K, 3)``."""

    actions: np.ndarray
    predicted: np.ndarray
    cost_history: list = field(default_factory=list)
    relative_distance: np.ndarray = None
    predicted_theta: np.ndarray = None
    action_nodes: Optional[list] = None


def optimize_actions(s0, goal, cost: CostFunction, model, alpha: float = 0.001, iters: int = 50,
                     u_init=None, backtrack: bool = False, graph: Optional[Graph] = None,
                     psi: Optional[Node] = None) -> PlanResult:
    """Plan from one start (or a batch of starts) towards keypoint goals.

    ``goal`` is ``(K, 2|3)`` per start.  Actions start at zero unless
    ``u_init`` is given.  Each iteration runs in its own graph; use
    :func:`gradient_steps` when the result must stay differentiable.
    With ``backtrack`` the step size halves whenever the cost increases.

    Passing ``graph`` records every update in it instead (``psi`` then
    replaces the cost's own parameters), and ``action_nodes`` of the result
    hold the final actions.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    starts, goals = as_batch(s0, goal)
    B, T = len(starts), cost.horizon
    K = starts[0].keypoints.shape[0]
    u = np.zeros((B, T - 1, N_JOINTS)) if u_init is None else np.array(u_init, dtype=float).reshape(B, T - 1, N_JOINTS)
    goal_xy = xy_rows(goals[..., :2] if goals.shape[-1] == 2 else goals, 1.0) * KEYPOINT_SCALE
    if graph is not None:
        g = graph
        acts = [g.variable(u[:, t]) for t in range(T - 1)]
        acts, history = gradient_steps(g, model, state_to_graph(g, starts), acts, g.constant(np.tile(goal_xy, (T, 1))),
                                       cost, psi, alpha, iters, B, g.constant(selection_matrix(K)))
        u = np.stack([a.value for a in acts], axis=1)
        result = _finish(model, starts, goals, u, history)
        result.action_nodes = acts
        return result
    history = []
    step = alpha
    prev = None
    for i in range(iters):
        g = Graph()
        acts = [g.variable(u[:, t]) for t in range(T - 1)]
        S = g.constant(selection_matrix(K))
        states = rollout_graph(g, model, state_to_graph(g, starts), acts)
        c = cost.graph(g, trajectory_rows(g, states, S), goal_xy, None, B)
        cval = float(c.value)
        if backtrack and prev is not None and cval > prev[0]:
            u, step = prev[1], step / 2
            grads = prev[2]
            u = u - step * grads
            continue
        history.append(cval)
        grads = np.stack([d.value for d in diffcore.gradient(c, acts)], axis=1)
        if not np.all(np.isfinite(grads)):
            raise PlanningError(f"non-finite action gradient at iteration {i}")
        prev = (cval, u, grads)
        u = u - step * grads
    return _finish(model, starts, goals, u, history)


def _finish(model, starts, goals, u, history) -> PlanResult:
    g = Graph()
    states = rollout_graph(g, model, state_to_graph(g, starts), [g.constant(u[:, t]) for t in range(u.shape[1])])
    pred = np.stack([s.z.value for s in states], axis=1).reshape(len(starts), len(states), -1, 3)
    theta = np.stack([s.theta.value for s in states], axis=1)
    rel = np.array([relative_distance(p, gl) for p, gl in zip(pred, goals)])
    return PlanResult(u, pred, history, rel, theta)


def clamp_actions(u, max_step: float) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=float), -max_step, max_step)


def execute_plan(env: ArmEnv, s0: SystemState, u) -> list[SystemState]:
    """Open-loop execution of an action sequence in the simulator."""
    states = [s0]
    for a in np.asarray(u, dtype=float).reshape(-1, N_JOINTS):
        states.append(env.step(states[-1], a))
    return states


def receding_horizon(env: ArmEnv, s0: SystemState, goal, cost: CostFunction, model,
                     alpha: float = 0.001, iters: int = 50) -> list[SystemState]:
    """Replan the full horizon from every reached state and apply only the first action."""
    states = [s0]
    for _ in range(cost.horizon - 1):
        plan = optimize_actions(states[-1], goal, cost, model, alpha, iters)
        a = clamp_actions(plan.actions[0, 0], env.config.max_step)
        states.append(env.step(states[-1], a))
    return states


def relative_distance(trajectory, goal, dims: Optional[Sequence[int]] = None) -> float:
    """``||z_T - goal|| / ||z_0 - goal||`` over x/y (or the flattened ``dims`` subset)."""
    traj = np.asarray(trajectory, dtype=float)
    goal = np.asarray(goal, dtype=float)
    first = traj[0, :, :2].ravel() - goal[:, :2].ravel()
    last = traj[-1, :, :2].ravel() - goal[:, :2].ravel()
    if dims is not None:
        first, last = first[list(dims)], last[list(dims)]
    denom = np.linalg.norm(first)
    if denom == 0:
        raise ValueError("trajectory starts at the goal; relative distance undefined")
    return float(np.linalg.norm(last) / denom)


def goal_mse(final_keypoints, goal) -> float:
    """Mean over keypoints of the squared x/y pixel distance to the goal."""
    d = np.asarray(final_keypoints, dtype=float)[:, :2] - np.asarray(goal, dtype=float)[:, :2]
    return float(np.mean(np.sum(d * d, axis=1)))


def write_cost_history(path, history) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "cost"])
        for i, c in enumerate(history):
            w.writerow([i, format(c, ".17g")])
    return path


def write_plan(out_dir, result: PlanResult, executed: Optional[Sequence[SystemState]] = None, index: int = 0) -> list[Path]:
    """Cost history plus predicted/executed trajectories in the demonstration schema."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_cost_history(out / "cost_history.csv", result.cost_history)]
    theta = result.predicted_theta[index]
    pred = Demonstration(result.predicted[index], theta, np.zeros_like(theta))
    paths.append(write_demo_csv(out / "predicted.csv", pred))
    if executed is not None:
        paths.append(write_demo_csv(out / "executed.csv", states_to_demo(executed)))
    return paths

"""Learnable keypoint cost functions and the IRL loss.

Every cost is linear in its parameters and built from :mod:`diffcore`
primitives, so gradients exist both with respect to the trajectory (for
action planning) and with respect to the parameters (for IRL).

Trajectories enter as row blocks of shape ``(T*B, 2K)``: row ``t*B + b`` holds
the x/y coordinates ``x1, y1, x2, y2, ...`` of frame ``t`` of rollout ``b``.
A plain ``(T, K, 2)`` or ``(T, 2K)`` array is treated as ``B = 1``.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .diffcore import Graph, Node
from .sim_env import Demonstration

FAMILIES = ("weighted", "timedep", "rbf")


def _node(g: Graph, x) -> Node:
    return x if isinstance(x, Node) else g.constant(x)


def _rows(g: Graph, traj) -> Node:
    if isinstance(traj, Node):
        return traj
    arr = np.asarray(traj, dtype=float)
    if arr.ndim == 3:
        arr = arr.reshape(arr.shape[0], -1)
    return g.constant(arr)


def _goal_rows(g: Graph, goal, rows: Node) -> Node:
    if isinstance(goal, Node):
        return goal
    n_rows, width = rows.shape
    goal = np.asarray(goal, dtype=float)
    if goal.size % width:
        raise ValueError(f"goal of size {goal.size} does not match trajectory width {width}")
    goal = goal.reshape(-1, width)
    if n_rows % goal.shape[0]:
        raise ValueError(f"goal has {goal.shape[0]} rows, trajectory {n_rows}")
    return g.constant(np.tile(goal, (n_rows // goal.shape[0], 1)))


def squared_deviation(g: Graph, traj, goal) -> Node:
    rows = _rows(g, traj)
    goal_rows = _goal_rows(g, goal, rows)
    if goal_rows.shape != rows.shape:
        raise ValueError(f"goal shape {goal_rows.shape} does not match trajectory {rows.shape}")
    return g.square(g.sub(rows, goal_rows))


def rbf_centers(horizon: int, n_kernels: int) -> np.ndarray:
    return np.linspace(1.0, float(horizon), n_kernels)


def rbf_bandwidth(horizon: int, n_kernels: int) -> float:
    """Negative bandwidth giving value 0.5 halfway between neighbouring centers."""
    spacing = (horizon - 1.0) / (n_kernels - 1.0) if n_kernels > 1 else float(horizon)
    return -np.log(2.0) / (spacing / 2.0) ** 2


def rbf_kernel_matrix(horizon: int, centers, bandwidth: float) -> np.ndarray:
    """``(T, J)`` kernel values for frames ``t = 1..T``."""
    t = np.arange(1, horizon + 1, dtype=float)[:, None]
    return np.exp(bandwidth * (t - np.asarray(centers)[None, :]) ** 2)


class CostFunction:
    """A cost family with its current parameter vector ``params`` (flat, nonnegative)."""

    family = "base"

    def __init__(self, n_keypoints: int, horizon: int, params=None):
        self.n_keypoints = int(n_keypoints)
        self.horizon = int(horizon)
        self.params = np.ones(self.n_params) if params is None else np.asarray(params, dtype=float).ravel().copy()
        if self.params.size != self.n_params:
            raise ValueError(f"{self.family} cost expects {self.n_params} parameters, got {self.params.size}")

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    def weight_rows(self, g: Graph, psi: Node, batch: int) -> Node:
        """Per-row weights ``(T*B, 2K)``, linear in ``psi``."""
        raise NotImplementedError

    def graph(self, g: Graph, traj, goal, psi: Optional[Node] = None, batch: int = 1) -> Node:
        sq = squared_deviation(g, traj, goal)
        if sq.shape[0] != self.horizon * batch or sq.shape[1] != 2 * self.n_keypoints:
            raise ValueError(
                f"{self.family} cost built for T={self.horizon}, K={self.n_keypoints}; got rows {sq.shape}, B={batch}")
        psi = g.constant(self.params) if psi is None else psi
        return g.sum(g.mul(sq, self.weight_rows(g, psi, batch)))

    def __call__(self, traj, goal) -> float:
        g = Graph()
        rows = _rows(g, traj)
        return float(self.graph(g, rows, goal, batch=rows.shape[0] // self.horizon).value)

    def project(self) -> None:
        np.maximum(self.params, 0.0, out=self.params)

    def weight_table(self) -> np.ndarray:
        """Effective weights per frame, ``(T, K, 2)``."""
        g = Graph()
        return self.weight_rows(g, g.constant(self.params), 1).value.reshape(self.horizon, self.n_keypoints, 2)

    def copy(self) -> "CostFunction":
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = self.params.copy()
        return new

    def describe(self) -> dict:
        return {"family": self.family, "K": self.n_keypoints, "T": self.horizon, "params": self.params.tolist()}


class WeightedCost(CostFunction):
    family = "weighted"

    @property
    def n_params(self):
        return 2 * self.n_keypoints

    def weight_rows(self, g, psi, batch):
        ones = g.constant(np.ones((self.horizon * batch, 1)))
        return g.matmul(ones, g.reshape(psi, (1, 2 * self.n_keypoints)))


class TimeDependentCost(CostFunction):
    family = "timedep"

    @property
    def n_params(self):
        return 2 * self.n_keypoints * self.horizon

    def weight_rows(self, g, psi, batch):
        table = g.reshape(psi, (self.horizon, 2 * self.n_keypoints))
        if batch == 1:
            return table
        expand = g.constant(np.kron(np.eye(self.horizon), np.ones((batch, 1))))
        return g.matmul(expand, table)


class RbfCost(CostFunction):
    family = "rbf"

    def __init__(self, n_keypoints, horizon, params=None, n_kernels: int = 5, bandwidth: Optional[float] = None):
        if n_kernels >= horizon:
            raise ValueError(f"need fewer kernels ({n_kernels}) than frames ({horizon})")
        if n_kernels < 1:
            raise ValueError("need at least one kernel")
        self.n_kernels = int(n_kernels)
        self.centers = rbf_centers(horizon, n_kernels)
        self.bandwidth = rbf_bandwidth(horizon, n_kernels) if bandwidth is None else float(bandwidth)
        if self.bandwidth >= 0:
            raise ValueError("RBF bandwidth must be negative")
        self.kernels = rbf_kernel_matrix(horizon, self.centers, self.bandwidth)
        super().__init__(n_keypoints, horizon, params)

    @property
    def n_params(self):
        return 2 * self.n_keypoints * self.n_kernels

    def weight_rows(self, g, psi, batch):
        kern = np.kron(self.kernels, np.ones((batch, 1))) if batch > 1 else self.kernels
        w = g.reshape(psi, (self.n_kernels, 2 * self.n_keypoints))
        return g.matmul(g.constant(kern), w)

    def describe(self):
        d = super().describe()
        d.update(J=self.n_kernels, centers=self.centers.tolist(), bandwidth=self.bandwidth)
        return d


class DefaultCost(CostFunction):
    """Unweighted squared distance to the goal over all frames; no parameters."""

    family = "default"

    @property
    def n_params(self):
        return 0

    def graph(self, g, traj, goal, psi=None, batch=1):
        return g.sum(squared_deviation(g, traj, goal))

    def weight_rows(self, g, psi, batch):
        return g.constant(np.ones((self.horizon * batch, 2 * self.n_keypoints)))


class LinearFeatureCost(WeightedCost):
    """``psi . phi`` with unconstrained sign, used by apprenticeship learning."""

    family = "feature"

    def project(self):
        pass


def make_cost(family: str, n_keypoints: int, horizon: int, params=None, n_kernels: int = 5) -> CostFunction:
    if family == "weighted":
        return WeightedCost(n_keypoints, horizon, params)
    if family == "timedep":
        return TimeDependentCost(n_keypoints, horizon, params)
    if family == "rbf":
        return RbfCost(n_keypoints, horizon, params, n_kernels=n_kernels)
    if family == "default":
        return DefaultCost(n_keypoints, horizon)
    if family == "feature":
        return LinearFeatureCost(n_keypoints, horizon, params)
    raise ValueError(f"unknown cost family {family!r}")


# functional forms


def _psi(g, psi):
    return _node(g, np.asarray(psi, dtype=float).ravel() if not isinstance(psi, Node) else psi)


def _dims(traj, goal):
    arr = traj.value if isinstance(traj, Node) else np.asarray(traj, dtype=float)
    T = arr.shape[0]
    K = (arr.shape[1] * (arr.shape[2] if arr.ndim == 3 else 1)) // 2
    return T, K


def weighted_cost(g: Graph, psi, traj, goal) -> Node:
    T, K = _dims(traj, goal)
    return WeightedCost(K, T).graph(g, traj, goal, _psi(g, psi))


def timedep_cost(g: Graph, psi, traj, goal) -> Node:
    T, K = _dims(traj, goal)
    return TimeDependentCost(K, T).graph(g, traj, goal, _psi(g, psi))


def rbf_cost(g: Graph, weights, traj, goal, n_kernels: int, bandwidth: Optional[float] = None) -> Node:
    T, K = _dims(traj, goal)
    return RbfCost(K, T, n_kernels=n_kernels, bandwidth=bandwidth).graph(g, traj, goal, _psi(g, weights))


def default_cost(g: Graph, traj, goal) -> Node:
    return g.sum(squared_deviation(g, traj, goal))


def irl_loss(g: Graph, demo, pred) -> Node:
    """Summed squared x/y distance between demonstrated and predicted frames."""
    d = _rows(g, demo)
    p = _rows(g, pred)
    if d.shape != p.shape:
        raise ValueError(f"demo {d.shape} and prediction {p.shape} differ in horizon or keypoints")
    return g.sum(g.square(g.sub(d, p)))


# relative demonstrations


def relativize_demo(demo: Demonstration) -> Demonstration:
    """Express every frame's x/y relative to frame 0; proprioception is dropped."""
    kp = demo.keypoints.copy()
    kp[:, :, :2] -= demo.keypoints[0, :, :2]
    return Demonstration(kp, None, None, relative=True)


def rebase(relative: Demonstration, initial_keypoints) -> Demonstration:
    z0 = np.asarray(initial_keypoints, dtype=float).reshape(-1, 3)
    kp = relative.keypoints.copy()
    kp[:, :, :2] += z0[None, :, :2]
    return Demonstration(kp, None, None, relative=False)


# files


def save_cost(path, cost: CostFunction) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cost.describe(), indent=2))
    return path


def load_cost(path) -> CostFunction:
    d = json.loads(Path(path).read_text())
    return make_cost(d["family"], d["K"], d["T"], d["params"] or None, n_kernels=d.get("J", 5))


def export_weights_csv(path, cost: CostFunction) -> Path:
    """Per-parameter rows ``index, slot, keypoint, axis, weight`` for bar plots."""
    path = Path(path)
    K = cost.n_keypoints
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "slot", "keypoint", "axis", "weight"])
        for i, v in enumerate(cost.params):
            slot, rest = divmod(i, 2 * K)
            kp, axis = divmod(rest, 2)
            w.writerow([i, slot, kp + 1, "xy"[axis], format(v, ".17g")])
    return path

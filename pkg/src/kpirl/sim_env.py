"""Planar 3-link arm holding an object, observed as pixel keypoints.

The arm stands in for a real robot, camera and keypoint detector: it emits
``K`` keypoints per frame, three attached to the held object plus one fixed
background point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

N_JOINTS = 3
IMAGE_SIZE = 240.0


@dataclass(frozen=True)
class ArmConfig:
    link_lengths: tuple = (0.4, 0.3, 0.2)
    joint_limits: tuple = ((-np.pi, np.pi), (-2.8, 2.8), (-2.8, 2.8))
    max_step: float = 0.2
    control_period: float = 0.2
    # object keypoints, in the end-effector frame (meters)
    object_offsets: tuple = ((0.06, 0.0), (0.0, 0.04), (0.0, -0.04))
    background_pixel: tuple = (30.0, 30.0)

    def __post_init__(self):
        if len(self.link_lengths) != N_JOINTS or min(self.link_lengths) <= 0:
            raise ValueError("need three positive link lengths")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ValueError(f"joint limits ({lo}, {hi}) not ordered")
        if self.max_step <= 0 or self.control_period <= 0:
            raise ValueError("max_step and control_period must be positive")

    @property
    def n_keypoints(self) -> int:
        return len(self.object_offsets) + 1

    @property
    def lower(self) -> np.ndarray:
        return np.array([lim[0] for lim in self.joint_limits])

    @property
    def upper(self) -> np.ndarray:
        return np.array([lim[1] for lim in self.joint_limits])


@dataclass(frozen=True)
class CameraMap:
    """Affine map ``pixel = matrix @ world + offset``.

    The default sends the workspace square [-1, 1]^2 onto a 240x240 image
    with the y axis pointing down.
    """

    matrix: tuple = ((120.0, 0.0), (0.0, -120.0))
    offset: tuple = (120.0, 120.0)

    def __post_init__(self):
        if abs(np.linalg.det(np.asarray(self.matrix))) < 1e-12:
            raise ValueError("camera map must be invertible")

    def to_pixels(self, xy) -> np.ndarray:
        return np.asarray(xy, dtype=float) @ np.asarray(self.matrix).T + np.asarray(self.offset)

    def to_workspace(self, px) -> np.ndarray:
        inv = np.linalg.inv(np.asarray(self.matrix))
        return (np.asarray(px, dtype=float) - np.asarray(self.offset)) @ inv.T


@dataclass
class SystemState:
    theta: np.ndarray
    thetadot: np.ndarray
    keypoints: np.ndarray  # (K, 3): x pixel, y pixel, intensity

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(N_JOINTS)
        self.thetadot = np.asarray(self.thetadot, dtype=float).reshape(N_JOINTS)
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 3)

    def copy(self) -> "SystemState":
        return SystemState(self.theta.copy(), self.thetadot.copy(), self.keypoints.copy())


@dataclass
class Demonstration:
    """Keypoint trajectory of ``T`` frames; frame 0 is the start, frame T-1 the goal.

    ``thetas``/``thetadots`` are ``None`` for demonstrations without
    proprioception (e.g. a relative human-style demo).
    """

    keypoints: np.ndarray  # (T, K, 3)
    thetas: Optional[np.ndarray] = None  # (T, 3)
    thetadots: Optional[np.ndarray] = None
    relative: bool = False

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float)
        if self.keypoints.ndim != 3 or self.keypoints.shape[2] != 3:
            raise ValueError(f"keypoints must be (T, K, 3), got {self.keypoints.shape}")
        if self.thetas is not None:
            self.thetas = np.asarray(self.thetas, dtype=float).reshape(-1, N_JOINTS)
            self.thetadots = np.asarray(self.thetadots, dtype=float).reshape(-1, N_JOINTS)

    @property
    def horizon(self) -> int:
        return self.keypoints.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[1]

    @property
    def goal(self) -> np.ndarray:
        return self.keypoints[-1]

    @property
    def start_state(self) -> SystemState:
        if self.thetas is None:
            raise ValueError("demonstration carries no joint state")
        return SystemState(self.thetas[0], self.thetadots[0], self.keypoints[0])


@dataclass(frozen=True)
class TaskSpec:
    """A scripted object path: one target end-effector pose (x, y, phi) per frame."""

    kind: str
    start_theta: tuple
    path: np.ndarray = field(compare=False)

    @property
    def horizon(self) -> int:
        return len(self.path)


# kinematics


def check_limits(config: ArmConfig, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(N_JOINTS)
    if np.any(theta < config.lower - 1e-12) or np.any(theta > config.upper + 1e-12):
        raise ValueError(f"joint angles {theta} outside limits {config.joint_limits}")
    return theta


def forward_kinematics(config: ArmConfig, theta) -> tuple[np.ndarray, float]:
    """End-effector position and orientation of the planar chain."""
    theta = check_limits(config, theta)
    phi = np.cumsum(theta)
    links = np.asarray(config.link_lengths)
    pos = np.array([np.sum(links * np.cos(phi)), np.sum(links * np.sin(phi))])
    return pos, float(phi[-1])


def jacobian(config: ArmConfig, theta) -> np.ndarray:
    """3x3 Jacobian of (x, y, phi) with respect to joint angles."""
    phi = np.cumsum(theta)
    links = np.asarray(config.link_lengths)
    jac = np.zeros((3, N_JOINTS))
    for j in range(N_JOINTS):
        jac[0, j] = -np.sum(links[j:] * np.sin(phi[j:]))
        jac[1, j] = np.sum(links[j:] * np.cos(phi[j:]))
        jac[2, j] = 1.0
    return jac


def keypoint_map(config: ArmConfig, camera: CameraMap) -> tuple[np.ndarray, np.ndarray]:
    """Linear layout ``z = [cos(phi), sin(phi)] @ M + c`` for cumulative angles ``phi``.

    Returns ``M`` of shape (6, 3K) and ``c`` of shape (3K,), with keypoint
    columns ordered x, y, intensity.  Both the simulator and the
    differentiable ground-truth model use it so their outputs agree bit for bit.
    """
    l1, l2, l3 = config.link_lengths
    K = config.n_keypoints
    cam = np.asarray(camera.matrix)
    M = np.zeros((6, 3 * K))
    c = np.zeros(3 * K)
    for k, (ox, oy) in enumerate(config.object_offsets):
        wx = np.array([l1, l2, l3 + ox, 0.0, 0.0, -oy])
        wy = np.array([0.0, 0.0, oy, l1, l2, l3 + ox])
        world = np.stack([wx, wy], axis=1)  # (6, 2)
        M[:, 3 * k:3 * k + 2] = world @ cam.T
        c[3 * k:3 * k + 2] = camera.offset
        c[3 * k + 2] = 1.0
    kb = K - 1
    c[3 * kb:3 * kb + 2] = config.background_pixel
    c[3 * kb + 2] = 1.0
    return M, c


CUMSUM = np.triu(np.ones((N_JOINTS, N_JOINTS)))  # theta @ CUMSUM = cumulative angles


def keypoints_from_angles(theta_rows: np.ndarray, M: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Rows of joint angles (B, 3) -> rows of flattened keypoints (B, 3K)."""
    phi = theta_rows @ CUMSUM
    feats = np.concatenate([np.cos(phi), np.sin(phi)], axis=1)
    return feats @ M + np.broadcast_to(c, (theta_rows.shape[0], c.size))


def observe_keypoints(config: ArmConfig, camera: CameraMap, theta) -> np.ndarray:
    theta = check_limits(config, theta)
    M, c = keypoint_map(config, camera)
    return keypoints_from_angles(theta.reshape(1, N_JOINTS), M, c).reshape(-1, 3)


def initial_state(config: ArmConfig, camera: CameraMap, theta) -> SystemState:
    return SystemState(theta, np.zeros(N_JOINTS), observe_keypoints(config, camera, theta))


def step(config: ArmConfig, camera: CameraMap, state: SystemState, u) -> SystemState:
    """Apply a desired joint displacement; angles are clamped to the limits."""
    u = np.asarray(u, dtype=float).reshape(N_JOINTS)
    if np.any(np.abs(u) > config.max_step + 1e-12):
        raise ValueError(f"action {u} exceeds per-step limit {config.max_step}")
    theta = np.clip(state.theta + u, config.lower, config.upper)
    thetadot = (theta - state.theta) / config.control_period
    return SystemState(theta, thetadot, observe_keypoints(config, camera, theta))


def rollout(config: ArmConfig, camera: CameraMap, state: SystemState, actions) -> list[SystemState]:
    states = [state]
    for u in np.asarray(actions, dtype=float).reshape(-1, N_JOINTS):
        states.append(step(config, camera, states[-1], u))
    return states


def states_to_demo(states: Sequence[SystemState]) -> Demonstration:
    return Demonstration(
        keypoints=np.stack([s.keypoints for s in states]),
        thetas=np.stack([s.theta for s in states]),
        thetadots=np.stack([s.thetadot for s in states]),
    )


@dataclass(frozen=True)
class ArmEnv:
    """Bundles an arm and its camera for callers that only need ``step``."""

    config: ArmConfig = ArmConfig()
    camera: CameraMap = CameraMap()

    def reset(self, theta) -> SystemState:
        return initial_state(self.config, self.camera, theta)

    def step(self, state: SystemState, u) -> SystemState:
        return step(self.config, self.camera, state, u)

    def observe(self, theta) -> np.ndarray:
        return observe_keypoints(self.config, self.camera, theta)


# scripted demonstrations


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


def solve_ik(config: ArmConfig, target, theta0, damping: float = 1e-2,
             tol: float = 1e-12, max_iter: int = 500) -> np.ndarray:
    """Damped-least-squares IK on the full pose (x, y, phi), started at ``theta0``."""
    target = np.asarray(target, dtype=float)
    theta = np.asarray(theta0, dtype=float).copy()
    eye = np.eye(3)
    for _ in range(max_iter):
        phi = np.cumsum(theta)
        links = np.asarray(config.link_lengths)
        pose = np.array([np.sum(links * np.cos(phi)), np.sum(links * np.sin(phi)), phi[-1]])
        err = target - pose
        err[2] = _wrap(err[2])
        if np.max(np.abs(err)) < tol:
            return theta
        J = jacobian(config, theta)
        theta = theta + J.T @ np.linalg.solve(J @ J.T + damping**2 * eye, err)
    raise RuntimeError(f"IK did not converge to {target}")


def reaching_task(config: ArmConfig, start_theta, dx: float, horizon: int = 25, ease: float = 1.0) -> TaskSpec:
    """Object translates by ``dx`` meters along x with orientation fixed.

    Progress follows ``1 - (1 - s)^ease`` over normalized time ``s``: constant
    speed for ``ease=1``, a decelerating approach for larger values.
    """
    if ease < 1:
        raise ValueError("ease must be >= 1")
    pos, phi = forward_kinematics(config, start_theta)
    s = 1.0 - (1.0 - np.linspace(0.0, 1.0, horizon)) ** ease
    path = np.stack([pos[0] + dx * s, np.full(horizon, pos[1]), np.full(horizon, phi)], axis=1)
    return TaskSpec("reaching", tuple(start_theta), path)


def placing_task(config: ArmConfig, start_theta, dx: float, dy: float, horizon: int = 10) -> TaskSpec:
    """Two phases: move along x, then along y with x held."""
    pos, phi = forward_kinematics(config, start_theta)
    n1 = (horizon - 1) // 2
    n2 = horizon - 1 - n1
    xs = np.concatenate([pos[0] + dx * np.arange(n1 + 1) / n1, np.full(n2, pos[0] + dx)])
    ys = np.concatenate([np.full(n1 + 1, pos[1]), pos[1] + dy * np.arange(1, n2 + 1) / n2])
    path = np.stack([xs, ys, np.full(horizon, phi)], axis=1)
    return TaskSpec("placing", tuple(start_theta), path)


def generate_demo(config: ArmConfig, camera: CameraMap, task: TaskSpec) -> Demonstration:
    """Track the task path with IK and record the resulting states."""
    state = initial_state(config, camera, task.start_theta)
    states = [state]
    for t in range(1, task.horizon):
        try:
            theta = solve_ik(config, task.path[t], state.theta)
        except RuntimeError as exc:
            raise ValueError(f"waypoint at frame {t} unreachable") from exc
        u = theta - state.theta
        if np.any(np.abs(u) > config.max_step) or np.any(theta < config.lower) or np.any(theta > config.upper):
            raise ValueError(f"waypoint at frame {t} unreachable within joint/step limits")
        state = step(config, camera, state, u)
        states.append(state)
    return states_to_demo(states)


# self-supervised sine data


@dataclass
class Transition:
    state: SystemState
    action: np.ndarray
    next_state: SystemState


def generate_sine_data(config: ArmConfig, camera: CameraMap, frequencies: Sequence[float],
                       amplitudes: Sequence[float], n_steps: int, seed: int,
                       center=(0.4, 1.2, -1.2), joint_weights=(1.0, 0.6, 1.0)) -> list[Transition]:
    """Sinusoidal joint commands sampled at the control period.

    The commanded angle of joint j is ``center_j + w_j * sum_f a_f sin(2 pi f t + phase)``
    with phases drawn from ``seed``; actions are its per-step increments.
    """
    freqs = np.asarray(frequencies, dtype=float)
    amps = np.asarray(amplitudes, dtype=float)
    weights = np.asarray(joint_weights, dtype=float)
    if freqs.shape != amps.shape:
        raise ValueError("frequencies and amplitudes differ in length")
    dt = config.control_period
    bound = np.max(np.abs(weights)) * np.sum(np.abs(amps) * 2 * np.pi * np.abs(freqs) * dt)
    if bound > config.max_step:
        raise ValueError(f"sine commands may move {bound:.3f} rad per step (> {config.max_step})")
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2 * np.pi, size=(len(freqs), N_JOINTS))
    t = np.arange(n_steps + 1)[:, None, None] * dt
    waves = np.sin(2 * np.pi * freqs[None, :, None] * t + phases[None]) * amps[None, :, None]
    commanded = np.asarray(center, dtype=float) + weights * waves.sum(axis=1)
    commanded = np.clip(commanded, config.lower, config.upper)

    state = initial_state(config, camera, commanded[0])
    out = []
    for i in range(n_steps):
        u = np.clip(commanded[i + 1] - state.theta, -config.max_step, config.max_step)
        nxt = step(config, camera, state, u)
        out.append(Transition(state, u, nxt))
        state = nxt
    return out


def transitions_to_arrays(data: Sequence[Transition]) -> tuple[np.ndarray, np.ndarray]:
    """Model inputs ``[z, theta, thetadot, u]`` and next-keypoint targets."""
    X = np.array([np.concatenate([d.state.keypoints.ravel(), d.state.theta, d.state.thetadot, d.action])
                  for d in data])
    Y = np.array([d.next_state.keypoints.ravel() for d in data])
    return X, Y


# CSV files


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def state_columns(n_keypoints: int, prefix: str = "") -> list[str]:
    cols = [f"{prefix}theta{j + 1}" for j in range(N_JOINTS)]
    cols += [f"{prefix}thetadot{j + 1}" for j in range(N_JOINTS)]
    for k in range(n_keypoints):
        cols += [f"{prefix}kp{k + 1}x", f"{prefix}kp{k + 1}y", f"{prefix}kp{k + 1}mu"]
    return cols


def _state_row(theta, thetadot, keypoints) -> list[str]:
    return [_fmt(v) for v in np.concatenate([theta, thetadot, np.ravel(keypoints)])]


def write_demo_csv(path, demo: Demonstration) -> Path:
    path = Path(path)
    nan = np.full(N_JOINTS, np.nan)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + state_columns(demo.n_keypoints))
        for t in range(demo.horizon):
            theta = demo.thetas[t] if demo.thetas is not None else nan
            thetadot = demo.thetadots[t] if demo.thetadots is not None else nan
            writer.writerow([str(t)] + _state_row(theta, thetadot, demo.keypoints[t]))
    return path


def read_demo_csv(path, relative: bool = False) -> Demonstration:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    if header[0] != "t" or (len(header) - 7) % 3:
        raise ValueError(f"{path}: unexpected demo header")
    thetas, thetadots = body[:, 1:4], body[:, 4:7]
    kps = body[:, 7:].reshape(len(body), -1, 3)
    if np.all(np.isnan(thetas)):
        thetas = thetadots = None
    return Demonstration(kps, thetas, thetadots, relative=relative)


def write_dataset_csv(path, data: Sequence[Transition]) -> Path:
    path = Path(path)
    K = data[0].state.keypoints.shape[0]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(state_columns(K) + [f"u{j + 1}" for j in range(N_JOINTS)]
                        + state_columns(K, prefix="next_"))
        for d in data:
            s, n = d.state, d.next_state
            writer.writerow(_state_row(s.theta, s.thetadot, s.keypoints) + [_fmt(v) for v in d.action]
                            + _state_row(n.theta, n.thetadot, n.keypoints))
    return path


def read_dataset_csv(path) -> list[Transition]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    body = np.array(rows[1:], dtype=float)
    width = (body.shape[1] - N_JOINTS) // 2
    out = []
    for row in body:
        s, u, n = row[:width], row[width:width + N_JOINTS], row[width + N_JOINTS:]
        out.append(Transition(SystemState(s[:3], s[3:6], s[6:]), u.copy(), SystemState(n[:3], n[3:6], n[6:])))
    return out

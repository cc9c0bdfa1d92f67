"""One-step latent dynamics: keypoint MLP plus joint integrator.

Both model variants expose ``predict_graph`` so planners and the IRL loop can
differentiate rollouts with respect to actions (and, transitively, cost
parameters).  States inside a graph are :class:`GraphState` triples of
``(B, .)`` row blocks, one row per independent rollout.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from . import diffcore
from .diffcore import Graph, Node
from .sim_env import (
    CUMSUM,
    IMAGE_SIZE,
    N_JOINTS,
    ArmConfig,
    CameraMap,
    SystemState,
    Transition,
    keypoint_map,
    transitions_to_arrays,
)

logger = logging.getLogger(__name__)

HIDDEN = (100, 25)


class GraphState(NamedTuple):
    z: Node  # (B, 3K)
    theta: Node  # (B, 3)
    thetadot: Node  # (B, 3)


def state_to_graph(g: Graph, states: Sequence[SystemState]) -> GraphState:
    return GraphState(
        g.constant(np.stack([s.keypoints.ravel() for s in states])),
        g.constant(np.stack([s.theta for s in states])),
        g.constant(np.stack([s.thetadot for s in states])),
    )


def graph_to_states(gs: GraphState) -> list[SystemState]:
    return [SystemState(th, thd, z) for z, th, thd in zip(gs.z.value, gs.theta.value, gs.thetadot.value)]


class _Model:
    n_keypoints: int

    def predict_graph(self, g: Graph, state: GraphState, u: Node) -> GraphState:
        raise NotImplementedError

    def predict(self, state: SystemState, u) -> SystemState:
        g = Graph()
        gs = state_to_graph(g, [state])
        u = np.asarray(u, dtype=float).reshape(1, N_JOINTS)
        if state.keypoints.shape[0] != self.n_keypoints:
            raise ValueError(f"state has {state.keypoints.shape[0]} keypoints, model expects {self.n_keypoints}")
        return graph_to_states(self.predict_graph(g, gs, g.constant(u)))[0]


class GroundTruthModel(_Model):
    """Analytic keypoints of the simulated arm, written with differentiable primitives."""

    def __init__(self, config: ArmConfig = ArmConfig(), camera: CameraMap = CameraMap()):
        self.config = config
        self.camera = camera
        self.n_keypoints = config.n_keypoints
        self._M, self._c = keypoint_map(config, camera)

    def predict_graph(self, g, state, u):
        B = u.shape[0]
        key = ("gt", id(self), B)
        consts = g._cache.get(key)
        if consts is None:
            consts = g._cache[key] = (
                g.constant(CUMSUM),
                g.constant(self._M),
                g.constant(np.tile(self._c, (B, 1))),
            )
        cum, M, c = consts
        theta = g.add(state.theta, u)
        phi = g.matmul(theta, cum)
        feats = g.concat([g.cos(phi), g.sin(phi)], axis=1)
        z = g.add(g.matmul(feats, M), c)
        return GraphState(z, theta, state.thetadot)


@dataclass
class MlpParams:
    """Weights ``(in, out)`` and biases per layer, plus the fixed IO scaling."""

    weights: list
    biases: list
    input_scale: np.ndarray
    output_scale: np.ndarray
    n_keypoints: int

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


def io_scaling(n_keypoints: int) -> tuple[np.ndarray, np.ndarray]:
    kp = np.tile([1.0 / IMAGE_SIZE, 1.0 / IMAGE_SIZE, 1.0], n_keypoints)
    input_scale = np.concatenate([kp, np.ones(3 * N_JOINTS)])
    return input_scale, 1.0 / kp


def init_mlp_params(n_keypoints: int, seed, hidden=HIDDEN) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = check_random_state(seed)
    sizes = [3 * n_keypoints + 3 * N_JOINTS, *hidden, 3 * n_keypoints]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    input_scale, output_scale = io_scaling(n_keypoints)
    return MlpParams(weights, biases, input_scale, output_scale, n_keypoints)


def _mlp_graph(g: Graph, x: Node, layers: list) -> Node:
    """``layers`` holds (W_eff, bias_rows) node pairs; ReLU on all but the last."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = g.add(g.matmul(h, w), b)
        if i < len(layers) - 1:
            h = g.relu(h)
    return h


def _effective_layers(g: Graph, params: MlpParams, B: int, nodes: Optional[list] = None) -> list:
    """Fold the IO scaling into the first/last layer and broadcast biases to ``B`` rows.

    With ``nodes`` (alternating W, b variables) the result is differentiable
    in the parameters; otherwise parameters are graph constants.
    """
    if nodes is None:
        ws = [g.constant(w) for w in params.weights]
        bs = [g.constant(b) for b in params.biases]
    else:
        ws, bs = nodes[0::2], nodes[1::2]
    ones = g.constant(np.ones((B, 1)))
    n = len(ws)
    layers = []
    for i, (w, b) in enumerate(zip(ws, bs)):
        b_row = g.reshape(b, (1, b.shape[0]))
        if i == 0:
            w = g.mul(w, g.constant(np.repeat(params.input_scale[:, None], w.shape[1], axis=1)))
        if i == n - 1:
            w = g.mul(w, g.constant(np.tile(params.output_scale, (w.shape[0], 1))))
            b_row = g.mul(b_row, g.constant(params.output_scale[None, :]))
        layers.append((w, g.matmul(ones, b_row)))
    return layers


class LearnedModel(_Model):
    def __init__(self, params: MlpParams):
        self.params = params
        self.n_keypoints = params.n_keypoints

    def predict_graph(self, g, state, u):
        B = u.shape[0]
        key = ("mlp", id(self), B)
        layers = g._cache.get(key)
        if layers is None:
            layers = g._cache[key] = _effective_layers(g, self.params, B)
        x = g.concat([state.z, state.theta, state.thetadot, u], axis=1)
        z = _mlp_graph(g, x, layers)
        return GraphState(z, g.add(state.theta, u), state.thetadot)

    def predict_array(self, X: np.ndarray) -> np.ndarray:
        """Batch next-keypoint prediction for rows ``[z, theta, thetadot, u]``."""
        p = self.params
        h = X * p.input_scale
        for i, (w, b) in enumerate(zip(p.weights, p.biases)):
            h = h @ w + b
            if i < len(p.weights) - 1:
                h = np.maximum(h, 0.0)
        return h * p.output_scale


DynamicsModel = _Model


def rollout_graph(g: Graph, model: _Model, s0: GraphState, actions: Sequence[Node]) -> list[GraphState]:
    states = [s0]
    for u in actions:
        states.append(model.predict_graph(g, states[-1], u))
    return states


def rollout_with_model(model: _Model, s0: SystemState, actions) -> list[SystemState]:
    """Chained one-step predictions; the returned list starts with ``s0``."""
    actions = np.asarray(actions, dtype=float).reshape(-1, N_JOINTS)
    g = Graph()
    gs = rollout_graph(g, model, state_to_graph(g, [s0]), [g.constant(u[None]) for u in actions])
    return [s0] + [graph_to_states(s)[0] for s in gs[1:]]


# training


def nmse(predictions, targets, return_excluded: bool = False):
    """Mean squared error over samples divided by the per-dimension target variance.

    Dimensions whose targets have zero variance are left out; with
    ``return_excluded`` their count is returned as well.
    """
    P = np.asarray(predictions, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if P.shape != Y.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {Y.shape}")
    if Y.shape[0] < 2:
        raise ValueError("nmse needs at least two samples")
    P = P.reshape(len(P), -1)
    Y = Y.reshape(len(Y), -1)
    var = Y.var(axis=0)
    keep = var > 1e-12 * np.maximum(1.0, np.abs(Y).max(axis=0)) ** 2
    n_excluded = int(np.sum(~keep))
    value = float(np.mean(np.mean((P[:, keep] - Y[:, keep]) ** 2, axis=0) / var[keep]))
    return (value, n_excluded) if return_excluded else value


@dataclass
class TrainHyperparams:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    holdout_fraction: float = 0.1
    lr_decay: float = 0.97  # per-epoch multiplicative step decay


@dataclass
class TrainReport:
    train_nmse: list = field(default_factory=list)
    heldout_nmse: list = field(default_factory=list)
    params: Optional[MlpParams] = None
    diverged: bool = False
    input_scale: list = field(default_factory=list)
    output_scale: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "train_nmse": self.train_nmse,
            "heldout_nmse": self.heldout_nmse,
            "diverged": self.diverged,
            "input_scale": self.input_scale,
            "output_scale": self.output_scale,
            "layer_sizes": self.params.layer_sizes if self.params else None,
        }


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def _loss_weights(Y: np.ndarray) -> np.ndarray:
    """Inverse target variances for the training loss.

    Unlike the NMSE metric, constant targets (background keypoint,
    intensities) keep a weight here, using the mean variance of the varying
    targets; otherwise their outputs drift freely.
    """
    var = Y.var(axis=0)
    const = var <= 1e-12 * np.maximum(1.0, np.abs(Y).max(axis=0)) ** 2
    var = np.where(const, var[~const].mean() if (~const).any() else 1.0, var)
    return 1.0 / (var * Y.shape[1])


def split_indices(n: int, holdout_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    perm = check_random_state(seed).permutation(n)
    n_hold = int(round(n * holdout_fraction))
    return perm[n_hold:], perm[:n_hold]


def fit_mlp(X: np.ndarray, Y: np.ndarray, n_keypoints: int, hp: TrainHyperparams, seed,
            X_val=None, Y_val=None) -> TrainReport:
    """Mini-batch Adam on the NMSE loss, gradients from :mod:`diffcore`."""
    rng = check_random_state(seed)
    params = init_mlp_params(n_keypoints, rng)
    theta = [a.copy() for pair in zip(params.weights, params.biases) for a in pair]
    m = [np.zeros_like(a) for a in theta]
    v = [np.zeros_like(a) for a in theta]
    w_dim = _loss_weights(Y)
    report = TrainReport(params=params, input_scale=params.input_scale.tolist(),
                         output_scale=params.output_scale.tolist())
    n = len(X)
    t = 0

    def current() -> MlpParams:
        return MlpParams(theta[0::2], theta[1::2], params.input_scale, params.output_scale, n_keypoints)

    def evaluate(Xe, Ye):
        return nmse(LearnedModel(current()).predict_array(Xe), Ye)

    initial = evaluate(X, Y)
    bad = 0
    for epoch in range(hp.epochs):
        lr = hp.learning_rate * hp.lr_decay ** epoch
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            B = len(idx)
            g = Graph()
            nodes = [g.variable(a) for a in theta]
            layers = _effective_layers(g, params, B, nodes)
            pred = _mlp_graph(g, g.constant(X[idx]), layers)
            err = g.sub(pred, g.constant(Y[idx]))
            loss = g.sum(g.mul(g.square(err), g.constant(np.tile(w_dim / B, (B, 1)))))
            grads = diffcore.gradient(loss, nodes)
            t += 1
            for i, gr in enumerate(grads):
                gv = gr.value
                m[i] = hp.beta1 * m[i] + (1 - hp.beta1) * gv
                v[i] = hp.beta2 * v[i] + (1 - hp.beta2) * gv * gv
                mhat = m[i] / (1 - hp.beta1 ** t)
                vhat = v[i] / (1 - hp.beta2 ** t)
                theta[i] = theta[i] - lr * mhat / (np.sqrt(vhat) + hp.adam_eps)
        train_err = evaluate(X, Y)
        report.train_nmse.append(train_err)
        if X_val is not None and len(X_val) >= 2:
            report.heldout_nmse.append(evaluate(X_val, Y_val))
        bad = bad + 1 if (not np.isfinite(train_err) or train_err > 10 * initial) else 0
        if bad >= 3:
            report.diverged = True
            report.params = current()
            raise TrainingDiverged(f"training diverged at epoch {epoch}", report)
        if epoch % 50 == 0:
            logger.info("epoch %d train nmse %.4g", epoch, train_err)
    report.params = current()
    return report


def train(dataset: Sequence[Transition], hyperparams: Optional[TrainHyperparams] = None, seed=0) -> TrainReport:
    """Fit the keypoint MLP on (state, action, next state) tuples with a seeded 90/10 split."""
    if not dataset:
        raise ValueError("empty dataset")
    hp = hyperparams or TrainHyperparams()
    X, Y = transitions_to_arrays(dataset)
    tr, ho = split_indices(len(X), hp.holdout_fraction, seed)
    K = dataset[0].state.keypoints.shape[0]
    return fit_mlp(X[tr], Y[tr], K, hp, seed, X[ho], Y[ho])


class KeypointDynamicsRegressor(BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_mlp`.

    ``X`` rows are ``[z (3K), theta, thetadot, u]``; ``y`` rows are the next
    keypoints ``(3K)``.
    """

    def __init__(self, epochs=300, batch_size=64, learning_rate=1e-3, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X)
        y = check_array(y)
        if (X.shape[1] - 3 * N_JOINTS) * 1 != y.shape[1] or y.shape[1] % 3:
            raise ValueError(f"X has {X.shape[1]} columns, y has {y.shape[1]}; expected 3K+9 and 3K")
        hp = TrainHyperparams(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate)
        self.report_ = fit_mlp(X, y, y.shape[1] // 3, hp, self.random_state)
        self.model_ = LearnedModel(self.report_.params)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_array(check_array(X))

    def score(self, X, y):
        """Negative NMSE (higher is better)."""
        return -nmse(self.predict(X), check_array(y))


# checkpoints

_MAGIC = b"KPDYN01\n"


def save_checkpoint(path, params: MlpParams, report: Optional[TrainReport] = None) -> Path:
    path = Path(path)
    header = {
        "n_keypoints": params.n_keypoints,
        "dof": N_JOINTS,
        "layer_sizes": params.layer_sizes,
        "input_scale": params.input_scale.tolist(),
        "output_scale": params.output_scale.tolist(),
        "dtype": "<f8",
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(params.flat().astype("<f8").tobytes())
    if report is not None:
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(report.to_json(), indent=2))
    return path


def load_checkpoint(path) -> MlpParams:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a dynamics checkpoint")
    off = len(_MAGIC)
    (hlen,) = struct.unpack("<I", data[off:off + 4])
    header = json.loads(data[off + 4:off + 4 + hlen])
    flat = np.frombuffer(data[off + 4 + hlen:], dtype="<f8").astype(np.float64)
    sizes = header["layer_sizes"]
    weights, biases, pos = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos:pos + a * b].reshape(a, b))
        pos += a * b
        biases.append(flat[pos:pos + b].copy())
        pos += b
    if pos != flat.size:
        raise ValueError(f"{path}: parameter count mismatch")
    return MlpParams(weights, biases, np.array(header["input_scale"]), np.array(header["output_scale"]),
                     header["n_keypoints"])

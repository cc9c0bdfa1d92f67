import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from kpirl.costs import make_cost
from kpirl.diffcore import Graph
from kpirl.dynamics import GroundTruthModel, state_to_graph
from kpirl.harness import build_config, reaching_demos
from kpirl.irl import (ApprenticeshipIRL, BilevelIRL, Episode, IrlConfig, IrlError, IrlRecord, ProjectionSolver,
                       aggregate, apprenticeship_train, episodes, evaluate_cost, feature_expectation, features,
                       outer_gradient, read_record_csv, train_irl, write_record_csv)
from kpirl.planner import gradient_steps, selection_matrix, xy_rows
from kpirl.sim_env import ArmConfig, ArmEnv, CameraMap, Demonstration, initial_state, rollout

SMALL = ArmConfig(object_offsets=((0.06, 0.0),))
CENTER = np.array([1.2, 0.9, -0.6])


@pytest.fixture(scope="module")
def known():
    cfg = build_config({"preset": "sim-reaching-known"})
    return cfg, GroundTruthModel(cfg.arm, cfg.camera), reaching_demos(cfg, 0)


def stationary_episode(T=4):
    s0 = initial_state(SMALL, CameraMap(), CENTER)
    states = rollout(SMALL, CameraMap(), s0, np.zeros((T - 1, 3)))
    return Episode(s0, np.stack([s.keypoints for s in states]))


def test_stationary_demo_gives_zero_gradient():
    ep = stationary_episode()
    cfg = IrlConfig(eta=1.0, alpha=0.5, iters_max=3, epochs=2)
    cost, record = train_irl(cfg, GroundTruthModel(SMALL), [ep])
    assert np.max(np.abs(cost.params - 1.0)) < 1e-8
    assert record.loss[0] == 0.0


def test_outer_gradient_weighted_t3_iters2():
    r = np.random.default_rng(11)
    s0 = initial_state(SMALL, CameraMap(), CENTER)
    demo = rollout(SMALL, CameraMap(), s0, r.uniform(-0.05, 0.05, (2, 3)))
    ep = Episode(s0, np.stack([s.keypoints for s in demo]))
    cost = make_cost("weighted", 2, 3, r.uniform(0.5, 2.0, 4))
    model = GroundTruthModel(SMALL)
    _, grad = outer_gradient(cost, model, [ep], 2.0, 2)
    h = 1e-5
    fd = np.zeros(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd[i] = (outer_gradient(cost, model, [ep], 2.0, 2, cost.params + e)[0]
                 - outer_gradient(cost, model, [ep], 2.0, 2, cost.params - e)[0]) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-12)


def test_known_reaching_loss_halves_in_first_quarter(known):
    cfg, model, demos = known
    _, record = train_irl(replace(cfg.irl, epochs=20), model, demos[:1])
    assert record.loss[5] <= 0.5 * record.loss[0]
    assert len(record.params) == len(record.loss) == len(record.test_distance) == 20
    assert all(np.all(p >= 0) for p in record.params)


def test_training_is_deterministic(known):
    cfg, model, demos = known
    conf = replace(cfg.irl, epochs=3, eval_every=1)
    a = train_irl(conf, model, demos[:1], demos[-2:])[1]
    b = train_irl(conf, model, demos[:1], demos[-2:])[1]
    assert a.loss == b.loss and a.test_distance == b.test_distance
    np.testing.assert_array_equal(a.params, b.params)


def test_horizon_mismatch_raises(known):
    cfg, model, demos = known
    short = Demonstration(demos[1].keypoints[:10], demos[1].thetas[:10], demos[1].thetadots[:10])
    with pytest.raises(ValueError):
        train_irl(replace(cfg.irl, epochs=1), model, demos[:1], [short])
    with pytest.raises(ValueError):
        episodes([demos[0], short])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_outer_gradient_aborts(known):
    cfg, model, demos = known
    with pytest.raises(IrlError, match="epoch 1"):
        train_irl(replace(cfg.irl, epochs=3, eta=1e308), model, demos[:1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_backtracking_survives_overshoot(known):
    cfg, model, demos = known
    _, record = train_irl(replace(cfg.irl, epochs=6, eta=1e308, backtrack=True), model, demos[:1])
    assert np.all(np.isfinite(record.params))
    _, record = train_irl(replace(cfg.irl, epochs=12, eta=1e5, backtrack=True), model, demos[:1])
    assert np.all(np.diff(record.loss) <= 0)
    assert record.loss[-1] < record.loss[0]


def test_backtracking_is_inert_while_loss_falls(known):
    cfg, model, demos = known
    conf = replace(cfg.irl, epochs=5)
    plain = train_irl(conf, model, demos[:1])[1]
    assert np.all(np.diff(plain.loss) <= 0)
    guarded = train_irl(replace(conf, backtrack=True), model, demos[:1])[1]
    assert plain.loss == guarded.loss
    np.testing.assert_array_equal(plain.params, guarded.params)


def test_relative_demo_needs_start():
    rel = Demonstration(np.zeros((3, 2, 3)), relative=True)
    with pytest.raises(ValueError, match="start"):
        episodes([rel])
    s0 = initial_state(SMALL, CameraMap(), CENTER)
    assert episodes([rel], [s0])[0].start is s0


def test_scale_coupling_on_one_inner_step():
    """Doubling psi doubles the gradient term of a recorded inner update."""
    ep = stationary_episode(3)
    goal = ep.keypoints[-1] + np.array([12.0, -5.0, 0.0])
    cost = make_cost("weighted", 2, 3, [1.0, 2.0, 0.5, 3.0])
    model = GroundTruthModel(SMALL)
    u0 = np.array([[0.01, -0.02, 0.03]])

    def step_term(psi):
        g = Graph()
        acts = [g.variable(u0), g.variable(u0)]
        goal_rows = g.constant(np.tile(xy_rows(goal[None]), (3, 1)))
        new, _ = gradient_steps(g, model, state_to_graph(g, [ep.start]), acts, goal_rows, cost, g.constant(psi),
                                0.1, 1, 1, g.constant(selection_matrix(2)))
        return np.concatenate([n.value - u0 for n in new])

    np.testing.assert_allclose(step_term(2 * cost.params), 2 * step_term(cost.params), rtol=1e-13)


# baseline pieces


def test_features_hand_cases():
    z = np.array([[1.0, 2.0, 1.0]])
    np.testing.assert_array_equal(features(z, z), [0.0, 0.0])
    np.testing.assert_array_equal(features(z, np.array([[0.0, 0.0, 7.0]])), [1.0, 4.0])
    with pytest.raises(ValueError):
        features(z, np.zeros((2, 3)))


def test_feature_expectation_cases():
    goal = np.zeros((1, 3))
    z0 = np.array([[[1.0, 2.0, 1.0]]])
    np.testing.assert_array_equal(feature_expectation(z0, goal, 1.0).mu, [1.0, 4.0])
    np.testing.assert_array_equal(feature_expectation(np.zeros((4, 1, 3)), goal).mu, [0.0, 0.0])
    traj = np.array([[[1.0, 0.0, 0.0]], [[2.0, 1.0, 0.0]], [[0.0, 3.0, 0.0]]])
    mu = feature_expectation(traj, goal, 0.5).mu
    np.testing.assert_allclose(mu, [1.0 + 0.5 * 4.0 + 0.25 * 0.0, 0.0 + 0.5 * 1.0 + 0.25 * 9.0])
    with pytest.raises(ValueError):
        feature_expectation(traj, goal, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_weighted_cost_equals_feature_sum(K, T, seed):
    rng = np.random.default_rng(seed)
    traj = rng.normal(scale=40.0, size=(T, K, 3))
    goal = rng.normal(scale=40.0, size=(K, 3))
    psi = rng.uniform(0, 3, 2 * K)
    cost = make_cost("weighted", K, T, psi)
    expected = sum(psi @ features(z, goal) for z in traj)
    assert cost(traj[..., :2], goal[:, :2]) == pytest.approx(expected, rel=1e-12)


def test_projection_hand_case():
    solver = ProjectionSolver(np.array([3.0, 4.0]))
    psi, margin = solver.update(np.zeros(2))
    np.testing.assert_allclose(psi, [0.6, 0.8])
    assert margin == 5.0
    # moving towards the expert shrinks the margin; the step is clipped to the segment
    psi, margin = solver.update(np.array([6.0, 8.0]))
    assert psi is None and margin == 0.0


def test_projection_partial_step():
    solver = ProjectionSolver(np.array([1.0, 1.0]))
    solver.update(np.array([0.0, 0.0]))
    psi, margin = solver.update(np.array([2.0, 0.0]))
    # projection of (1,1) onto the segment (0,0)-(2,0) is (1,0)
    np.testing.assert_allclose(psi, [0.0, 1.0])
    assert margin == pytest.approx(1.0)


def test_apprenticeship_terminates_when_expert_matched():
    ep = stationary_episode()
    cfg = IrlConfig(alpha=0.1, iters_max=2, epochs=5)
    _, record = apprenticeship_train(cfg, GroundTruthModel(SMALL), [ep], init_scale=0.0)
    assert record.status == "converged at epoch 0" and record.epochs == 0


def test_apprenticeship_runs_and_is_seeded(known):
    cfg, model, demos = known
    conf = replace(cfg.irl, epochs=4)
    cost, rec = apprenticeship_train(conf, model, demos[:1], demos[-2:])
    again = apprenticeship_train(conf, model, demos[:1], demos[-2:])[1]
    assert rec.loss == again.loss
    assert all(abs(np.linalg.norm(p) - 1.0) < 1e-12 for p in rec.params)
    assert cost.family == "feature"


# evaluation and files


def test_evaluate_cost_reports_metrics(known):
    cfg, model, demos = known
    env = ArmEnv(cfg.arm, cfg.camera)
    rows = evaluate_cost(make_cost("default", 4, 25), demos[-2:], model, 0.001, 50, env=env)
    assert len(rows) == 2
    for r in rows:
        assert set(r) == {"relative_distance", "relative_distance_x", "goal_mse"}
        assert r["relative_distance"] < 0.5


def test_aggregate_over_seeds():
    per_seed = [[{"m": 1.0}, {"m": 3.0}], [{"m": 4.0}]]
    assert aggregate(per_seed)["m"] == (3.0, 1.0)


def test_record_csv_round_trip(tmp_path):
    rec = IrlRecord(loss=[1.5, 0.5], test_distance=[[0.2, 0.4], []])
    back = read_record_csv(write_record_csv(tmp_path / "r.csv", rec))
    np.testing.assert_array_equal(back["train_loss"], [1.5, 0.5])
    np.testing.assert_allclose(back["test_rel_mean"][0], 0.3)
    assert np.isnan(back["test_rel_mean"][1])


def test_config_validation():
    with pytest.raises(ValueError):
        IrlConfig(eta=0.0)
    with pytest.raises(ValueError):
        IrlConfig(epochs=0)
    with pytest.raises(ValueError):
        IrlConfig(gamma=1.5)
    assert IrlConfig(eval_alpha=0.5).test_alpha == 0.5
    assert IrlConfig().test_iters == 10


def test_estimators(known):
    cfg, model, demos = known
    est = BilevelIRL(model, eta=300.0, alpha=1e-4, epochs=2)
    assert clone(est).get_params()["cost_family"] == "weighted"
    est.fit(demos[:1])
    assert est.record_.epochs == 2
    traj = est.predict([demos[1].start_state], [demos[1].goal])
    assert traj.shape == (1, 25, 4, 3)
    assert est.score(demos[-2:]) < 0
    base = ApprenticeshipIRL(model, alpha=1e-4, epochs=2).fit(demos[:1])
    assert base.cost_.n_params == 8
    with pytest.raises(RuntimeError):
        BilevelIRL(model).predict([demos[0].start_state], [demos[0].goal])

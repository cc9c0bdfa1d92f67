import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel_cases import central_difference, instance
from kpirl.costs import make_cost
from kpirl.diffcore import Graph
from kpirl.dynamics import GraphState, GroundTruthModel, LearnedModel, init_mlp_params
from kpirl.irl import outer_gradient
from kpirl.planner import (KEYPOINT_SCALE, PlanningError, clamp_actions, execute_plan, goal_mse, optimize_actions,
                           receding_horizon, relative_distance, selection_matrix, write_plan)
from kpirl.sim_env import ArmEnv, SystemState, generate_demo, read_demo_csv, reaching_task

CENTER = np.array([1.2, 0.9, -0.6])


class LinearToy:
    """One keypoint whose x pixel moves ``slope`` per radian of joint 1."""

    n_keypoints = 1

    def __init__(self, slope):
        self.B = np.zeros((3, 3))
        self.B[0, 0] = slope

    def predict_graph(self, g, state, u):
        return GraphState(g.add(state.z, g.matmul(u, g.constant(self.B))), g.add(state.theta, u), state.thetadot)


def toy_start(x=100.0):
    return SystemState(np.zeros(3), np.zeros(3), [[x, 50.0, 1.0]])


def test_one_step_matches_closed_form():
    slope, alpha, goal_x, x0 = 30.0, 0.01, 160.0, 100.0
    plan = optimize_actions(toy_start(x0), np.array([[goal_x, 50.0, 1.0]]), make_cost("default", 1, 2),
                            LinearToy(slope), alpha=alpha, iters=1)
    s2 = KEYPOINT_SCALE**2
    expected = alpha * 2 * s2 * (goal_x - x0) * slope
    np.testing.assert_allclose(plan.actions[0, 0], [expected, 0.0, 0.0], rtol=1e-12)
    assert plan.cost_history == [pytest.approx(2 * s2 * (goal_x - x0) ** 2)]


def test_constant_cost_leaves_actions():
    u0 = np.full((1, 3, 3), 0.05)
    cost = make_cost("weighted", 4, 4, np.zeros(8))
    plan = optimize_actions(toy_like_start(), np.zeros((4, 3)), cost, GroundTruthModel(), 0.1, 7, u_init=u0)
    np.testing.assert_array_equal(plan.actions, u0)
    assert len(plan.cost_history) == 7


def toy_like_start():
    return ArmEnv().reset(CENTER)


def test_descent_on_toy_quadratic():
    plan = optimize_actions(toy_start(), np.array([[200.0, 50.0, 1.0]]), make_cost("default", 1, 6),
                            LinearToy(40.0), alpha=0.5, iters=40)
    assert np.all(np.diff(plan.cost_history) <= 1e-15)
    assert plan.relative_distance[0] < 0.1


def test_backtracking_recovers_from_large_step():
    goal = np.array([[200.0, 50.0, 1.0]])
    cost = make_cost("default", 1, 3)
    plain = optimize_actions(toy_start(), goal, cost, LinearToy(40.0), alpha=60.0, iters=10)
    assert plain.cost_history[-1] > plain.cost_history[0]
    safe = optimize_actions(toy_start(), goal, cost, LinearToy(40.0), alpha=60.0, iters=10, backtrack=True)
    assert np.all(np.diff(safe.cost_history) <= 0) and safe.cost_history[-1] < safe.cost_history[0]


def test_ground_truth_reaching_with_default_cost(arm, camera):
    demo = generate_demo(arm, camera, reaching_task(arm, CENTER, 0.15, 25, ease=3.0))
    plan = optimize_actions(demo.start_state, demo.goal, make_cost("default", 4, 25), GroundTruthModel(arm, camera),
                            alpha=0.001, iters=50)
    assert plan.relative_distance[0] < 0.5
    assert len(plan.cost_history) == 50
    assert plan.actions.shape == (1, 24, 3) and plan.predicted.shape == (1, 25, 4, 3)


def test_execution_matches_ground_truth_prediction(arm, camera):
    env = ArmEnv(arm, camera)
    demo = generate_demo(arm, camera, reaching_task(arm, CENTER, -0.1, 8))
    plan = optimize_actions(demo.start_state, demo.goal, make_cost("default", 4, 8), GroundTruthModel(arm, camera),
                            0.01, 20)
    executed = execute_plan(env, demo.start_state, clamp_actions(plan.actions[0], arm.max_step))
    np.testing.assert_allclose(np.stack([s.keypoints for s in executed]), plan.predicted[0], atol=1e-9)
    still = execute_plan(env, demo.start_state, np.zeros((5, 3)))
    assert all(np.array_equal(s.keypoints, demo.start_state.keypoints) for s in still)


def test_learned_model_execution_gap_is_reported(arm, camera, start):
    model = LearnedModel(init_mlp_params(4, 0))
    goal = start.keypoints + np.array([20.0, 0.0, 0.0])
    plan = optimize_actions(start, goal, make_cost("default", 4, 4), model, 0.01, 3)
    executed = execute_plan(ArmEnv(arm, camera), start, clamp_actions(plan.actions[0], arm.max_step))
    gap = goal_mse(executed[-1].keypoints, plan.predicted[0, -1])
    assert np.isfinite(gap) and gap > 0


def test_batch_planning_equals_single_runs(arm, camera):
    demos = [generate_demo(arm, camera, reaching_task(arm, CENTER + d, dx, 6))
             for d, dx in ((0.0, 0.1), (0.05, -0.1))]
    model, cost = GroundTruthModel(arm, camera), make_cost("timedep", 4, 6)
    both = optimize_actions([d.start_state for d in demos], np.stack([d.goal for d in demos]), cost, model, 0.01, 5)
    for b, d in enumerate(demos):
        one = optimize_actions(d.start_state, d.goal, cost, model, 0.01, 5)
        np.testing.assert_allclose(both.actions[b], one.actions[0], rtol=1e-10, atol=1e-15)


def test_recorded_mode_matches_fresh_graphs(arm, camera):
    demo = generate_demo(arm, camera, reaching_task(arm, CENTER, 0.1, 5))
    model, cost = GroundTruthModel(arm, camera), make_cost("rbf", 4, 5, n_kernels=3)
    fresh = optimize_actions(demo.start_state, demo.goal, cost, model, 0.05, 3)
    g = Graph()
    recorded = optimize_actions(demo.start_state, demo.goal, cost, model, 0.05, 3, graph=g,
                                psi=g.variable(cost.params))
    np.testing.assert_allclose(recorded.actions, fresh.actions, rtol=1e-12)
    assert recorded.action_nodes[0].requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_aborts_with_iteration():
    class Exploding(LinearToy):
        def predict_graph(self, g, state, u):
            nxt = super().predict_graph(g, state, u)
            return nxt._replace(z=g.exp(g.scale(nxt.z, 50.0)))

    with pytest.raises(PlanningError, match="iteration 0"):
        optimize_actions(toy_start(), np.zeros((1, 3)), make_cost("default", 1, 2), Exploding(1.0), 0.1, 2)


def test_argument_checks(start):
    cost = make_cost("default", 4, 3)
    with pytest.raises(ValueError):
        optimize_actions(start, start.keypoints, cost, GroundTruthModel(), alpha=0.0)
    with pytest.raises(ValueError):
        optimize_actions(start, start.keypoints, cost, GroundTruthModel(), iters=0)
    with pytest.raises(ValueError):
        optimize_actions([start, start], start.keypoints, cost, GroundTruthModel())


def test_relative_distance_cases():
    traj = np.zeros((3, 1, 3))
    traj[0, 0, :2] = [4.0, 0.0]
    goal = np.zeros((1, 3))
    assert relative_distance(traj, goal) == 0.0
    traj[-1] = traj[0]
    assert relative_distance(traj, goal) == 1.0
    traj[-1, 0, :2] = [2.0, 0.0]
    assert relative_distance(traj, goal) == 0.5
    with pytest.raises(ValueError):
        relative_distance(np.zeros((2, 1, 3)), goal)
    # intensity channel is ignored
    traj[-1, 0, 2] = 99.0
    assert relative_distance(traj, goal) == 0.5


def test_goal_mse_cases():
    goal = np.zeros((1, 3))
    assert goal_mse(goal, goal) == 0.0
    assert goal_mse([[3.0, 4.0, 7.0]], goal) == 25.0
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert goal_mse(a, b) == pytest.approx(np.mean([(a[k, 0] - b[k, 0]) ** 2 + (a[k, 1] - b[k, 1]) ** 2
                                                    for k in range(4)]))


def test_selection_matrix_layout():
    S = selection_matrix(2, 0.5)
    z = np.array([[10.0, 20.0, 1.0, 30.0, 40.0, 1.0]])
    np.testing.assert_array_equal(z @ S, [[5.0, 10.0, 15.0, 20.0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=30), st.floats(0.01, 0.5))
def test_clamp_idempotent(values, limit):
    u = np.array(values)
    once = clamp_actions(u, limit)
    np.testing.assert_array_equal(clamp_actions(once, limit), once)
    assert np.all(np.abs(once) <= limit)
    feasible = np.clip(u, -limit, limit)
    np.testing.assert_array_equal(clamp_actions(feasible, limit), feasible)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4, 5])
def test_outer_gradient_matches_differences(seed):
    cost, model, eps, alpha, iters = instance(seed)
    _, grad = outer_gradient(cost, model, eps, alpha, iters)
    fd = central_difference(cost, model, eps, alpha, iters)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-9)


def test_receding_horizon_reaches(arm, camera):
    env = ArmEnv(arm, camera)
    demo = generate_demo(arm, camera, reaching_task(arm, CENTER, 0.1, 5))
    states = receding_horizon(env, demo.start_state, demo.goal, make_cost("default", 4, 5),
                              GroundTruthModel(arm, camera), 0.01, 20)
    assert len(states) == 5
    assert relative_distance(np.stack([s.keypoints for s in states]), demo.goal) < 1.0


def test_write_plan_files(tmp_path, arm, camera):
    demo = generate_demo(arm, camera, reaching_task(arm, CENTER, 0.1, 4))
    plan = optimize_actions(demo.start_state, demo.goal, make_cost("default", 4, 4), GroundTruthModel(arm, camera),
                            0.01, 3)
    executed = execute_plan(ArmEnv(arm, camera), demo.start_state, plan.actions[0])
    paths = write_plan(tmp_path, plan, executed)
    assert [p.name for p in paths] == ["cost_history.csv", "predicted.csv", "executed.csv"]
    assert len(paths[0].read_text().splitlines()) == 4
    np.testing.assert_allclose(read_demo_csv(paths[1]).keypoints, plan.predicted[0])

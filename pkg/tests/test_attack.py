import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from conftest import central_difference, kink_distance, relative_error
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dnrBench.attack import AttackConfig, attack_path, attack_undefended, dump_trace, grid_evasion, omega, \
    omega_gradient, pgd_attack, project, project_l1_ball, run_attacks, undefended_omega_gradient
from dnrBench.data_io import make_toy_blobs
from dnrBench.errors import AttackTimeout, ShapeError
from dnrBench.kernel_svm import MulticlassSvm
from dnrBench.rejection import DnrModel, LayerTap, ScoreVector, combined_scores, dnr_score_gradient, \
    predict_with_reject
from dnrBench.tensor_nn import class_scores

NORMS = [1, 2, 'inf']
points = arrays(np.float64, 5, elements=st.floats(-1.0, 2.0))
origins = arrays(np.float64, 5, elements=st.floats(0.0, 1.0))


def _norm(d, p):
    return float(np.linalg.norm(d, ord=np.inf if p == math.inf else p))


@settings(max_examples=60)
@given(points, origins, st.floats(0.01, 2.0), st.sampled_from(NORMS), st.integers(0, 5))
def test_projection_is_feasible_and_idempotent(v, x0, epsilon, norm, rounds):
    cfg = AttackConfig(epsilon=epsilon, norm=norm, exact_box_rounds=rounds)
    x = project(v, x0, cfg)
    assert _norm(x - x0, cfg.norm) <= epsilon * (1 + 1e-9)
    assert np.all(x >= 0.0) and np.all(x <= 1.0)
    assert np.array_equal(project(x, x0, cfg), x)


@given(origins)
def test_projection_keeps_feasible_points(x0):
    cfg = AttackConfig(epsilon=0.5, norm=2)
    v = np.clip(x0 + 0.01, 0, 1)
    assert np.array_equal(project(v, x0, cfg), v)
    assert np.array_equal(project(v, x0, AttackConfig(epsilon=0.0)), x0)


def test_l1_projection_example():
    assert np.allclose(project_l1_ball(np.array([0.5, 0.7]), 1.0), [0.4, 0.6])
    assert np.array_equal(project_l1_ball(np.array([0.2, -0.3]), 1.0), [0.2, -0.3])
    assert np.array_equal(project_l1_ball(np.array([0.2, -0.3]), 0.0), [0.0, 0.0])


@settings(max_examples=60)
@given(arrays(np.float64, 6, elements=st.floats(-3.0, 3.0)), st.floats(0.05, 2.0))
def test_l1_projection_satisfies_kkt(d, epsilon):
    u = project_l1_ball(d, epsilon)
    if np.abs(d).sum() <= epsilon:
        assert np.array_equal(u, d)
        return
    assert np.isclose(np.abs(u).sum(), epsilon, rtol=1e-9, atol=1e-12)
    shrink = np.abs(d) - np.abs(u)
    kept = u != 0
    tau = shrink[kept].max()
    assert np.allclose(shrink[kept], tau, atol=1e-9)
    assert np.all(np.abs(d[~kept]) <= tau + 1e-9)
    assert np.all(np.sign(u[kept]) == np.sign(d[kept]))


def test_project_shape_mismatch():
    with pytest.raises(ShapeError):
        project(np.zeros(3), np.zeros(2), AttackConfig(epsilon=1.0))


def test_attack_config():
    assert AttackConfig(norm='inf').norm == math.inf
    assert AttackConfig(norm='l1').norm == 1.0
    for bad in (dict(norm=3), dict(eta=0.0), dict(epsilon=-1.0), dict(box=(1.0, 0.0)), dict(timeout=0)):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_omega():
    s = np.array([1.0, 3.0, 2.0])
    assert omega(s, 2) == 1.0
    assert omega(s, 1) == -2.0
    assert omega(np.array([[1.0, 3.0, 2.0], [0.0, 0.0, 1.0]]), 3).tolist() == [-1.0, 1.0]
    with pytest.raises(ValueError):
        omega(np.array([1.0]), 1)
    with pytest.raises(ValueError):
        omega(s, 4)


def test_omega_examples():
    assert np.isclose(omega(np.array([0.9, 0.3, 0.1]), 1), 0.6)
    assert np.isclose(omega(ScoreVector(np.array([0.9, 0.3, 0.1]), theta=0.95), 1), 0.6)
    assert omega(np.array([1.5, -0.25]), 1) == 1.75
    assert omega(np.array([1.5, -0.25]), 2) == -1.75


def _competitor_gap(s, y):
    others = np.sort(np.delete(np.asarray(s, dtype=np.float64), y - 1))
    return others[-1] - others[-2] if others.size > 1 else np.inf


def test_omega_gradients_match_central_differences(toy_model, toy_net):
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 100:
        x = rng.uniform(0.3, 0.7, size=2)
        y = int(rng.integers(1, 4))
        if (kink_distance(toy_net, x) < 1e-4 or _competitor_gap(combined_scores(toy_model, x).s, y) < 1e-4
                or _competitor_gap(class_scores(toy_net, x), y) < 1e-4):
            continue
        numeric = central_difference(lambda v: omega(combined_scores(toy_model, v), y), x)
        assert relative_error(omega_gradient(toy_model, x, y), numeric) < 1e-3
        numeric = central_difference(lambda v: omega(class_scores(toy_net, v), y), x)
        assert relative_error(undefended_omega_gradient(toy_net, x, y), numeric) < 1e-3
        checked += 1


def test_duplicated_machines_flatten_the_objective(toy_model):
    combiner = toy_model.combiner
    c = combiner.num_classes
    copies = MulticlassSvm(combiner.support_vectors, np.repeat(combiner.dual_coefs[:, :1], c, axis=1),
                           np.repeat(combiner.biases[:1], c), np.repeat(combiner.gammas[:1], c))
    model = DnrModel(toy_model.network, toy_model.taps, toy_model.base_svms, copies, toy_model.theta)
    x = np.array([0.45, 0.55])
    assert abs(omega(combined_scores(model, x), 1)) < 1e-12
    assert not np.any(omega_gradient(model, x, 1))


def test_two_class_objective_is_the_score_difference(toy_net):
    rng = np.random.default_rng(6)
    logits = toy_net.logits_index
    base = MulticlassSvm(rng.random((6, 3)), rng.normal(size=(6, 2)), rng.normal(size=2), [0.5, 0.5])
    combiner = MulticlassSvm(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.normal(size=2), [0.3, 0.3])
    model = DnrModel(toy_net, LayerTap((logits,)), [base], combiner)
    for _ in range(5):
        x = rng.uniform(0.2, 0.8, size=2)
        s = combined_scores(model, x).s
        assert omega(s, 1) == s[0] - s[1] and omega(s, 2) == s[1] - s[0]
        assert np.allclose(omega_gradient(model, x, 1),
                           dnr_score_gradient(model, x, 1) - dnr_score_gradient(model, x, 2), rtol=1e-10, atol=1e-14)
        assert np.allclose(omega_gradient(model, x, 2), -omega_gradient(model, x, 1), rtol=1e-10, atol=1e-14)


@pytest.fixture(scope='module')
def correct_point(toy_model, toy_sets):
    test = toy_sets[1]
    predictions = predict_with_reject(toy_model, test.features)
    i = int(np.flatnonzero(predictions == test.labels)[0])
    return test.features[i], int(test.labels[i])


def test_pgd_attack_trace(toy_model, correct_point):
    x0, y = correct_point
    cfg = AttackConfig(epsilon=0.2, norm=2, max_iters=30)
    result = pgd_attack(toy_model, x0, y, cfg)
    trace = np.array(result.omega_trace)
    assert np.all(np.diff(trace) <= 0)
    assert np.isclose(trace[0], omega(combined_scores(toy_model, x0), y))
    assert result.omega_star < trace[0]
    assert np.linalg.norm(result.x_star - x0) <= 0.2 * (1 + 1e-9)
    assert np.isclose(result.omega_star, omega(combined_scores(toy_model, result.x_star), y))
    assert result.final_prediction == predict_with_reject(toy_model, result.x_star)
    assert len(result.current_trace) == result.iterations + 1
    assert all(0 <= k < cfg.step_doublings for k in result.step_trace)


def test_zero_budget_returns_the_sample(toy_model, correct_point):
    x0, y = correct_point
    result = pgd_attack(toy_model, x0, y, AttackConfig(epsilon=0.0))
    assert np.array_equal(result.x_star, x0)
    assert result.iterations == 0
    assert result.final_prediction == y


def test_attack_path_is_monotone(toy_model, correct_point):
    x0, y = correct_point
    grid = [0.0, 0.05, 0.1, 0.2]
    results = attack_path(toy_model, x0, y, grid, AttackConfig(norm='inf', max_iters=20))
    assert [r.epsilon for r in results] == grid
    stars = [r.omega_star for r in results]
    assert all(b <= a + 1e-12 for a, b in zip(stars, stars[1:]))
    for r in results:
        assert np.max(np.abs(r.x_star - x0)) <= r.epsilon * (1 + 1e-9)
    with pytest.raises(ValueError):
        attack_path(toy_model, x0, y, [0.1, 0.05], AttackConfig())


def test_undefended_attack(toy_net, correct_point):
    x0, y = correct_point
    result = attack_undefended(toy_net, x0, y, AttackConfig(epsilon=0.3, max_iters=30))
    assert result.final_prediction == int(np.argmax(class_scores(toy_net, result.x_star))) + 1
    assert result.omega_star <= omega(class_scores(toy_net, x0), y) + 1e-12
    if result.omega_star < 0:
        assert result.final_prediction != y


TOY_ATTACK = AttackConfig(epsilon=0.25, eta=1e-3, max_iters=100, restarts=10, seed=0)


@pytest.fixture(scope='module')
def grid_oracle(toy_model):
    axis = np.linspace(0.0, 1.0, 200)
    grid = np.array([[a, b] for a in axis for b in axis])
    return grid, combined_scores(toy_model, grid).s, predict_with_reject(toy_model, grid)


@pytest.fixture(scope='module')
def attack_starts(toy_model):
    fresh = make_toy_blobs(30, seed=11)
    kept = np.flatnonzero(predict_with_reject(toy_model, fresh.features) == fresh.labels)[:20]
    assert len(kept) == 20
    return fresh.features[kept], fresh.labels[kept]


def test_attack_reaches_the_grid_optimum(toy_model, grid_oracle, attack_starts):
    grid, grid_scores, grid_predictions = grid_oracle
    for x0, y in zip(*attack_starts):
        y = int(y)
        result = pgd_attack(toy_model, x0, y, TOY_ATTACK)
        inside = np.linalg.norm(grid - x0, axis=1) <= TOY_ATTACK.epsilon
        grid_best = omega(grid_scores[inside], y).min()
        assert result.omega_star <= omega(combined_scores(toy_model, x0), y) + 1e-12
        assert result.omega_star - grid_best <= 1e-2
        evading = (grid_predictions[inside] != 0) & (grid_predictions[inside] != y)
        if np.any(evading):
            assert result.final_prediction != 0


def test_grid_evasion_agrees_with_the_full_grid(toy_model, grid_oracle, attack_starts):
    grid, grid_scores, grid_predictions = grid_oracle
    x0, y = attack_starts[0][0], int(attack_starts[1][0])
    best, evading = grid_evasion(toy_model, x0, y, TOY_ATTACK)
    inside = np.linalg.norm(grid - x0, axis=1) <= TOY_ATTACK.epsilon
    assert best <= omega(grid_scores[inside], y).min() + 1e-2
    assert best <= omega(combined_scores(toy_model, x0), y) + 1e-12
    if np.any((grid_predictions[inside] != 0) & (grid_predictions[inside] != y)):
        assert evading
    best, evading = grid_evasion(toy_model, x0, y, replace(TOY_ATTACK, epsilon=0.0), resolution=3)
    assert np.isclose(best, omega(combined_scores(toy_model, x0), y), rtol=0.0, atol=1e-12) and not evading
    with pytest.raises(ShapeError):
        grid_evasion(toy_model, np.zeros(3), y, TOY_ATTACK)


def test_restarts_keep_trace_bookkeeping(toy_model, attack_starts):
    x0, y = attack_starts[0][0], int(attack_starts[1][0])
    cfg = AttackConfig(epsilon=0.2, max_iters=15, restarts=3, seed=4)
    result = pgd_attack(toy_model, x0, y, cfg)
    assert result.step_trace.count(-1) == 3
    assert len(result.current_trace) == len(result.step_trace) + 1
    assert result.iterations == sum(k >= 0 for k in result.step_trace)
    assert np.all(np.diff(result.omega_trace) <= 0)
    assert np.isclose(result.omega_star, min(result.current_trace + [omega(combined_scores(toy_model, x0), y)]))
    assert np.linalg.norm(result.x_star - x0) <= 0.2 * (1 + 1e-9)
    again = pgd_attack(toy_model, x0, y, cfg)
    assert np.array_equal(again.x_star, result.x_star)
    single = pgd_attack(toy_model, x0, y, AttackConfig(epsilon=0.2, max_iters=15))
    assert result.omega_star <= single.omega_star + 1e-12


def test_default_step_follows_the_raw_gradient(toy_model, correct_point):
    x0, y = correct_point
    cfg = AttackConfig(epsilon=1.0, eta=1e-3, max_iters=1, step_doublings=1, t=1e-300)
    assert not cfg.normalize_gradient
    result = pgd_attack(toy_model, x0, y, cfg)
    expected = project(x0 - 1e-3 * omega_gradient(toy_model, x0, y), x0, cfg)
    assert np.allclose(result.current_trace[1], omega(combined_scores(toy_model, expected), y))
    normalized = pgd_attack(toy_model, x0, y, replace(cfg, normalize_gradient=True))
    grad = omega_gradient(toy_model, x0, y)
    expected = project(x0 - 1e-3 * grad / np.linalg.norm(grad), x0, cfg)
    assert np.allclose(normalized.current_trace[1], omega(combined_scores(toy_model, expected), y))


def test_run_attacks_captures_timeouts(toy_model, toy_sets):
    test = toy_sets[1]
    cfg = AttackConfig(max_iters=50, t=1e-300, timeout=1e-9)
    outcomes = run_attacks(toy_model, test.features[:3], test.labels[:3], [0.1], cfg, n_workers=2)
    assert [o.index for o in outcomes] == [0, 1, 2]
    assert all(o.failed and isinstance(o.error, AttackTimeout) for o in outcomes)


def test_run_attacks_in_sample_order(toy_model, toy_sets):
    test = toy_sets[1]
    cfg = AttackConfig(max_iters=5)
    serial = run_attacks(toy_model, test.features[:4], test.labels[:4], [0.05, 0.1], cfg)
    parallel = run_attacks(toy_model, test.features[:4], test.labels[:4], [0.05, 0.1], cfg, n_workers=3)
    for a, b in zip(serial, parallel):
        assert not a.failed
        assert [r.final_prediction for r in a.results] == [r.final_prediction for r in b.results]
        assert np.array_equal(a.results[-1].x_star, b.results[-1].x_star)


def test_dump_trace(tmp_path, toy_model, correct_point):
    x0, y = correct_point
    result = pgd_attack(toy_model, x0, y, AttackConfig(epsilon=0.1, max_iters=10))
    frame = dump_trace(result, str(tmp_path / 'trace.csv'))
    read = pd.read_csv(tmp_path / 'trace.csv')
    assert list(read.columns) == ['iteration', 'omega', 'step_index']
    assert len(read) == result.iterations + 1
    assert read['step_index'].iloc[0] == -1
    assert frame['iteration'].tolist() == list(range(len(frame)))

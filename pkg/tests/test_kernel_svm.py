import numpy as np
import pytest
from conftest import central_difference, dual_objective, qp_dual_oracle, relative_error
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.model_selection import StratifiedKFold

from dnrBench.data_io import make_toy_blobs
from dnrBench.errors import ConvergenceError, DataError, StratificationError
from dnrBench.kernel_svm import MulticlassSvm, SvmHyperparams, _KernelRows, decision_scores, default_grid, \
    grid_search_cv, grid_search_table, ova_train, rbf_kernel, rbf_kernel_matrix, score_gradient, scores_vjp, \
    smo_train

unit_vectors = arrays(np.float64, 3, elements=st.floats(0.0, 1.0))


@given(unit_vectors, unit_vectors, st.floats(1e-3, 10.0))
def test_rbf_kernel_properties(a, b, gamma):
    k = rbf_kernel(a, b, gamma)
    assert k == rbf_kernel(b, a, gamma)
    assert 0.0 < k <= 1.0
    assert rbf_kernel(a, a, gamma) == 1.0


def test_kernel_matrix_agrees_with_pairwise():
    rng = np.random.default_rng(0)
    a, b = rng.random((4, 3)), rng.random((5, 3))
    matrix = rbf_kernel_matrix(a, b, 0.7)
    for i in range(4):
        for j in range(5):
            assert np.isclose(matrix[i, j], rbf_kernel(a[i], b[j], 0.7), rtol=1e-12)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        SvmHyperparams(0.0, 1.0)
    with pytest.raises(ValueError):
        SvmHyperparams(1.0, -1.0)
    grid = default_grid(4)
    assert len(grid) == 12
    assert grid[0] == SvmHyperparams(0.1, 0.025)


def _random_binary(rng, n):
    x = rng.random((n, 2))
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    y[0], y[1] = 1.0, -1.0
    return x, y


def test_smo_matches_qp_oracle():
    rng = np.random.default_rng(42)
    for _ in range(50):
        n = int(rng.integers(3, 13))
        x, y = _random_binary(rng, n)
        hp = SvmHyperparams(float(rng.choice([0.1, 1.0, 10.0])), float(rng.choice([0.5, 2.0, 8.0])))
        machine = smo_train(x, y, hp, tol=1e-9)
        alpha = np.zeros(n)
        alpha[machine.support_index] = machine.dual_coefs * y[machine.support_index]
        K = rbf_kernel_matrix(x, x, hp.gamma)
        oracle = qp_dual_oracle(K, y, hp.C)
        assert abs(dual_objective(alpha, K, y) - oracle) <= 1e-6 * max(1.0, abs(oracle))
        assert abs(alpha @ y) < 1e-9
        assert np.all(alpha >= 0) and np.all(alpha <= hp.C)
        assert machine.kkt_residual <= 1e-9


def test_free_support_vectors_sit_on_the_margin():
    rng = np.random.default_rng(7)
    x, y = _random_binary(rng, 12)
    hp = SvmHyperparams(10.0, 2.0)
    machine = smo_train(x, y, hp, tol=1e-8)
    alpha = np.abs(machine.dual_coefs)
    free = (alpha > 1e-8) & (alpha < hp.C - 1e-8)
    margins = y[machine.support_index][free] * machine.decision_function(machine.support_vectors[free])
    assert np.allclose(margins, 1.0, atol=1e-6)


def test_smo_gram_and_row_cache_agree():
    rng = np.random.default_rng(3)
    x, y = _random_binary(rng, 10)
    hp = SvmHyperparams(1.0, 1.0)
    full = smo_train(x, y, hp, tol=1e-6)
    rows = _KernelRows(x, hp.gamma, cache_mb=1e-7)
    assert rows.gram is None
    cached = smo_train(x, y, hp, tol=1e-6, kernel=rows)
    assert np.allclose(full.decision_function(x), cached.decision_function(x))


def test_smo_errors():
    x = np.random.default_rng(0).random((6, 2))
    with pytest.raises(ValueError):
        smo_train(x, np.ones(6), SvmHyperparams(1.0, 1.0))
    with pytest.raises(ValueError):
        smo_train(x, np.array([1, -1, 2, 1, -1, 1.0]), SvmHyperparams(1.0, 1.0))
    y = np.array([1, -1, 1, -1, 1, -1.0])
    with pytest.raises(ConvergenceError) as info:
        smo_train(x, y, SvmHyperparams(100.0, 5.0), tol=1e-12, max_iter=1)
    assert info.value.residual > 1e-12


@pytest.fixture(scope='module')
def three_class():
    rng = np.random.default_rng(11)
    y = np.repeat([1, 2, 3], 8)
    x = rng.random((24, 4)) + 0.3 * y[:, None]
    return x, y


def test_ova_bundle(three_class):
    x, y = three_class
    svm = ova_train(x, y, SvmHyperparams(10.0, 0.5), tol=1e-4)
    assert svm.num_classes == 3 and svm.dim == 4
    scores = decision_scores(svm, x)
    assert scores.shape == (24, 3)
    for k in range(1, 4):
        assert np.allclose(svm.machine(k).decision_function(x), scores[:, k - 1])
    assert np.all(svm.kkt_residuals <= 1e-4)
    assert np.array_equal(decision_scores(svm, x[0]), scores[0])
    with pytest.raises(ValueError):
        svm.machine(0)


def test_ova_missing_class(three_class):
    x, y = three_class
    with pytest.raises(DataError):
        ova_train(x[y != 2], y[y != 2], SvmHyperparams(1.0, 1.0), n_classes=3)


def test_ova_parallel_matches_serial(three_class):
    x, y = three_class
    hp = SvmHyperparams(1.0, 0.5)
    a = ova_train(x, y, hp, n_workers=1)
    b = ova_train(x, y, hp, n_workers=3)
    assert np.array_equal(a.dual_coefs, b.dual_coefs)
    assert np.array_equal(a.biases, b.biases)


def test_score_gradient_matches_central_differences(three_class):
    x, y = three_class
    svm = ova_train(x, y, [SvmHyperparams(10.0, 0.5), SvmHyperparams(1.0, 1.5), SvmHyperparams(10.0, 0.5)])
    rng = np.random.default_rng(5)
    for _ in range(100):
        point = rng.random(4) + 0.6
        k = int(rng.integers(1, 4))
        numeric = central_difference(lambda v: decision_scores(svm, v)[k - 1], point)
        assert relative_error(score_gradient(svm, point, k), numeric) < 1e-4
        cotangent = rng.normal(size=3)
        numeric = central_difference(lambda v: decision_scores(svm, v) @ cotangent, point)
        assert relative_error(scores_vjp(svm, point, cotangent), numeric) < 1e-4
    with pytest.raises(ValueError):
        score_gradient(svm, x[0], 4)


def test_multiclass_state_round_trip(three_class):
    x, y = three_class
    svm = ova_train(x, y, SvmHyperparams(1.0, 0.5))
    meta, state = svm.to_state()
    again = MulticlassSvm.from_state(meta, state)
    assert np.array_equal(decision_scores(again, x), decision_scores(svm, x))


def test_grid_search(three_class):
    x, y = three_class
    single = SvmHyperparams(3.0, 0.3)
    assert grid_search_cv(np.zeros((1, 1)), np.ones(1), [single]) is single
    grid = [SvmHyperparams(1.0, 0.5), SvmHyperparams(1.0, 0.5), SvmHyperparams(10.0, 1.0)]
    table = grid_search_table(x, y, grid, k_folds=4, seed=0)
    assert table.fold_accuracy.shape == (3, 4)
    assert table.mean_accuracy[0] == table.mean_accuracy[1]
    assert table.best_index != 1
    assert grid_search_cv(x, y, grid, k_folds=4, seed=0) == table.best


def test_grid_search_needs_enough_per_class(three_class):
    x, y = three_class
    with pytest.raises(StratificationError):
        grid_search_table(x[:10], y[:10], default_grid(4), k_folds=5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_decision_scores_are_translation_consistent(seed):
    rng = np.random.default_rng(seed)
    sv = rng.random((5, 2))
    svm = MulticlassSvm(sv, rng.normal(size=(5, 2)), rng.normal(size=2), [1.0, 1.0])
    point = rng.random(2)
    shift = rng.random(2)
    moved = MulticlassSvm(sv + shift, svm.dual_coefs, svm.biases, svm.gammas)
    assert np.allclose(decision_scores(svm, point), decision_scores(moved, point + shift))


def test_symmetric_pair_has_equal_duals_and_zero_bias():
    machine = smo_train(np.array([[-1.0], [1.0]]), np.array([-1.0, 1.0]), SvmHyperparams(1e3, 1.0), tol=1e-9)
    alpha = np.abs(machine.dual_coefs)
    assert alpha.size == 2 and np.isclose(alpha[0], alpha[1], rtol=1e-9)
    assert np.isclose(alpha[0], 1.0 / (1.0 - np.exp(-4.0)), rtol=1e-6)
    assert abs(machine.bias) < 1e-9
    assert abs(machine.decision_function(np.zeros(1))) < 1e-9


def test_two_class_machines_mirror_each_other():
    rng = np.random.default_rng(4)
    y = np.repeat([1, 2], 12)
    x = rng.random((24, 2)) + 0.5 * y[:, None]
    svm = ova_train(x, y, SvmHyperparams(10.0, 1.0), tol=1e-8)
    points = rng.random((50, 2)) * 2.0 + 0.5
    scores = decision_scores(svm, points)
    assert np.allclose(scores[:, 1], -scores[:, 0], atol=1e-5)
    clear = np.abs(scores[:, 0]) > 1e-3
    predicted = np.argmax(scores, axis=1) + 1
    assert np.array_equal(predicted[clear], np.where(scores[:, 0] > 0, 1, 2)[clear])


def test_far_field_scores_decay_to_the_biases(three_class):
    x, y = three_class
    svm = ova_train(x, y, [SvmHyperparams(10.0, 0.5), SvmHyperparams(1.0, 1.5), SvmHyperparams(10.0, 0.5)])
    assert np.allclose(decision_scores(svm, np.full(4, 1e3)), svm.biases, rtol=0.0, atol=1e-9)
    point = np.full(4, 2.6)
    distance = np.min(np.linalg.norm(svm.support_vectors - point, axis=1))
    bound = np.abs(svm.dual_coefs).sum(axis=0) * np.exp(-svm.gammas * distance ** 2)
    assert np.all(np.abs(decision_scores(svm, point) - svm.biases) <= bound * (1 + 1e-9))


def test_gradient_vanishes_along_the_axis_of_symmetry():
    svm = MulticlassSvm([[-1.0, 0.0], [1.0, 0.0]], [[1.0, 0.5], [-1.0, 0.5]], [0.2, -0.1], [0.8, 0.8])
    for t in (-1.0, 0.3, 2.0):
        gradient = score_gradient(svm, np.array([0.0, t]), 1)
        assert abs(gradient[1]) < 1e-12
        assert gradient[0] < 0.0
        assert abs(score_gradient(svm, np.array([0.0, t]), 2)[0]) < 1e-12


def test_gradient_vanishes_as_the_kernel_flattens():
    rng = np.random.default_rng(8)
    sv, duals, point = rng.random((6, 3)), rng.normal(size=(6, 2)), rng.random(3)
    norms = [np.linalg.norm(score_gradient(MulticlassSvm(sv, duals, [0.0, 0.0], [gamma, gamma]), point, 1))
             for gamma in (1e-2, 1e-4, 1e-6, 1e-8)]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-6


def test_grid_search_table_matches_an_exhaustive_refit(three_class):
    x, y = three_class
    grid = [SvmHyperparams(c, g) for c in (1.0, 100.0) for g in (0.1, 10.0)]
    table = grid_search_table(x, y, grid, k_folds=4, seed=0)
    folds = list(StratifiedKFold(n_splits=4, shuffle=True, random_state=0).split(x, y))
    expected = []
    for hp in grid:
        accuracy = []
        for train, test in folds:
            svm = ova_train(x[train], y[train], hp, n_classes=3)
            accuracy.append(np.mean(np.argmax(decision_scores(svm, x[test]), axis=1) + 1 == y[test]))
        expected.append(np.mean(accuracy))
    assert np.allclose(table.mean_accuracy, expected, rtol=0.0, atol=1e-12)
    assert table.best_index == int(np.argmax(expected))
    assert table.best == grid[table.best_index]


def test_ova_on_toy_blobs_generalizes():
    train, held_out = make_toy_blobs(40, seed=1), make_toy_blobs(100, seed=2)
    hp = grid_search_cv(train.features, train.labels, default_grid(2), k_folds=5, seed=0)
    svm = ova_train(train.features, train.labels, hp)
    predicted = np.argmax(decision_scores(svm, held_out.features), axis=1) + 1
    assert np.mean(predicted == held_out.labels) >= 0.95

import os

import numpy as np
import pytest
from scipy.optimize import minimize

from dnrBench.data_io import SplitSpec, make_toy_blobs, split, validation_subset
from dnrBench.kernel_svm import SvmHyperparams
from dnrBench.rejection import calibrate_threshold, fit_dnr, with_threshold
from dnrBench.tensor_nn import TrainConfig, build_network, forward_all, toy_mlp_specs, train_sgd

MNIST_DIR = os.environ.get('DNRBENCH_MNIST_DIR')
TOY_SPLIT = SplitSpec(train_size=90, test_size=30, seed=0, val_size=30)


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: MNIST-scale checks, need DNRBENCH_MNIST_DIR')


def central_difference(f, x, h=1e-6):
    """Gradient of a scalar function by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        grad[i] = (f(x + e) - f(x - e)) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def dual_objective(alpha, K, y):
    """0.5 (alpha*y)' K (alpha*y) - sum(alpha)."""
    v = alpha * y
    return 0.5 * v @ K @ v - alpha.sum()


def qp_dual_oracle(K, y, C):
    """Minimum of the SVM dual by a dense SLSQP solve, polished by solving
    the KKT system on the active set SLSQP ends on."""
    n = len(y)
    result = minimize(lambda a: dual_objective(a, K, y), np.zeros(n),
                      jac=lambda a: y * (K @ (a * y)) - 1.0,
                      bounds=[(0.0, C)] * n,
                      constraints=[{'type': 'eq', 'fun': lambda a: a @ y, 'jac': lambda a: y}],
                      method='SLSQP', options={'ftol': 1e-15, 'maxiter': 2000})
    alpha = np.clip(result.x, 0.0, C)
    best = dual_objective(alpha, K, y) if abs(alpha @ y) < 1e-9 else np.inf

    at_c = alpha >= C * (1 - 1e-6)
    free = (alpha > C * 1e-6) & ~at_c
    if np.any(free):
        Q = np.outer(y, y) * K
        f = np.flatnonzero(free)
        system = np.zeros((f.size + 1, f.size + 1))
        system[:-1, :-1] = Q[np.ix_(f, f)]
        system[:-1, -1] = y[f]
        system[-1, :-1] = y[f]
        rhs = np.append(1.0 - Q[np.ix_(f, np.flatnonzero(at_c))] @ np.full(at_c.sum(), C),
                        -C * y[at_c].sum())
        polished = np.where(at_c, C, 0.0)
        polished[f] = np.linalg.solve(system, rhs)[:-1]
        if np.all(polished >= 0) and np.all(polished <= C):
            best = min(best, dual_objective(polished, K, y))
    return float(best)


def toy_grids(net, taps):
    return [[SvmHyperparams(10.0, 1.0 / int(np.prod(net.shapes[t])))] for t in taps]


def toy_combiner_grid(n_taps, c=3):
    return [SvmHyperparams(10.0, 1.0 / (n_taps * c))]


@pytest.fixture(scope='session')
def toy_data():
    return make_toy_blobs(60, seed=0)


@pytest.fixture(scope='session')
def toy_sets(toy_data):
    train, test = split(toy_data, TOY_SPLIT)
    return train, test, validation_subset(toy_data, TOY_SPLIT)


@pytest.fixture(scope='session')
def toy_net(toy_sets):
    train = toy_sets[0]
    net = build_network((2,), toy_mlp_specs(units=16), seed=0)
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, dropout=None, batch_size=16, epochs=40, seed=0)
    return train_sgd(net, train, cfg)


@pytest.fixture(scope='session')
def toy_model(toy_net, toy_sets):
    train, _, val = toy_sets
    taps = toy_net.default_taps()
    model = fit_dnr(toy_net, train, taps, grids=toy_grids(toy_net, taps), combiner_grid=toy_combiner_grid(len(taps)))
    return with_threshold(model, calibrate_threshold(model, val, 0.1))


def kink_distance(net, x):
    """How far x sits from a kink of net in evaluation mode: the smallest
    |relu input| and the smallest top-two gap of a positive max-pool window."""
    x = np.asarray(x, dtype=np.float64)
    inputs = [x] + forward_all(net, x)[:-1]
    gaps = [np.inf]
    for layer, z in zip(net.layers, inputs):
        if layer.kind == 'relu':
            gaps.append(np.min(np.abs(z)))
        elif layer.kind == 'maxpool2x2':
            c, h, w = z.shape
            windows = z[:, :h // 2 * 2, :w // 2 * 2].reshape(c, h // 2, 2, w // 2, 2)
            windows = np.sort(windows.transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4), axis=-1)
            gap = windows[..., -1] - windows[..., -2]
            gaps.append(np.min(np.where(windows[..., -1] > 0, gap, np.inf)))
    return float(min(gaps))

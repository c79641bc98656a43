"""
This is a chunk of scripts for RBF support vector machines:
the kernel, an SMO solver for the binary dual, a one-vs-all multiclass
bundle with analytic input gradients, and stratified k-fold grid search.

Decision values are raw (no probability calibration).
"""
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.model_selection import StratifiedKFold

from .errors import ConvergenceError, DataError, ShapeError, StratificationError
from .internal_functions import _get_logger, _run_ordered

MAX_PAIR_UPDATES = 10 ** 6
_TAU = 1e-12


@dataclass(frozen=True)
class SvmHyperparams:
    C: float
    gamma: float

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive, got {}".format(self.C))
        if not self.gamma > 0:
            raise ValueError("gamma must be positive, got {}".format(self.gamma))


def default_grid(d):
    """C in {0.1, 1, 10, 100} x gamma in {0.1, 1, 10} / d, C-major order."""
    return [SvmHyperparams(c, g / d) for c, g in itertools.product((0.1, 1.0, 10.0, 100.0), (0.1, 1.0, 10.0))]


def rbf_kernel(x, x2, gamma):
    """exp(-gamma * ||x - x2||^2)."""
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape != x2.shape:
        raise ShapeError("kernel arguments have shapes {} and {}".format(x.shape, x2.shape))
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    diff = x - x2
    return math.exp(-gamma * float(np.dot(diff.ravel(), diff.ravel())))


def rbf_kernel_matrix(a, b, gamma):
    """Gram matrix K[i, j] = exp(-gamma * ||a_i - b_j||^2)."""
    return np.exp(-gamma * cdist(np.atleast_2d(a), np.atleast_2d(b), 'sqeuclidean'))


class _KernelRows:
    """Kernel rows of a training set: the full Gram matrix when it fits in
    cache_mb, otherwise rows computed on demand behind an LRU cache."""

    def __init__(self, x, gamma, cache_mb=1024):
        self.x = x
        self.gamma = gamma
        n = x.shape[0]
        if n * n * 8 <= cache_mb * 2 ** 20:
            self.gram = rbf_kernel_matrix(x, x, gamma)
            self.row = self.gram.__getitem__
        else:
            self.gram = None
            self.row = lru_cache(maxsize=max(2, int(cache_mb * 2 ** 20 // (n * 8))))(self._row)

    def _row(self, i):
        return rbf_kernel_matrix(self.x[i], self.x, self.gamma)[0]


class BinaryRbfSvm:
    """A trained binary machine.

    Attributes:
        support_vectors (numpy.ndarray): (s, d) rows with alpha > 0.
        dual_coefs (numpy.ndarray): (s,) alpha_i * y_i.
        bias (float): b.
        gamma (float): RBF width.
        C (float): box constraint used in training.
        kkt_residual (float): maximal KKT violation at termination.
        n_iter (int): pair updates performed.
        support_index (numpy.ndarray): rows of the training set that are
            support vectors.
    """

    def __init__(self, support_vectors, dual_coefs, bias, gamma, C=None,
                 kkt_residual=0.0, n_iter=0, support_index=None):
        self.support_vectors = np.asarray(support_vectors, dtype=np.float64)
        self.dual_coefs = np.asarray(dual_coefs, dtype=np.float64)
        self.bias = float(bias)
        self.gamma = float(gamma)
        self.C = C
        self.kkt_residual = kkt_residual
        self.n_iter = n_iter
        self.support_index = support_index

    def decision_function(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if x.shape[-1] != self.support_vectors.shape[1]:
            raise ShapeError("input has {} features, machine expects {}"
                             .format(x.shape[-1], self.support_vectors.shape[1]))
        out = rbf_kernel_matrix(x, self.support_vectors, self.gamma) @ self.dual_coefs + self.bias
        return out[0] if single else out


def smo_train(X, y, hp, tol=1e-3, max_iter=MAX_PAIR_UPDATES, cache_mb=1024, kernel=None):
    """Solve the RBF SVM dual with SMO.

    The working pair is the maximal KKT violating pair (i in I_up maximizing
    -y G, j in I_low minimizing it); training stops when their gap is <= tol.

    Args:
        X (numpy.ndarray): (n, d) training inputs.
        y (numpy.ndarray): (n,) labels in {-1, +1}, both present.
        hp (SvmHyperparams): C and gamma.
        tol (float): KKT tolerance, > 0.
        max_iter (int): cap on pair updates.
        cache_mb (int): memory guard for the Gram matrix.
        kernel (_KernelRows): precomputed rows for X (shared across machines).

    Returns:
        BinaryRbfSvm: the trained machine.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError("X must be (n, d) and y (n,)")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not np.all(np.abs(y) == 1.0):
        raise ValueError("labels must be -1 or +1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("smo_train needs samples of both signs")
    if kernel is None:
        kernel = _KernelRows(X, hp.gamma, cache_mb)

    C = float(hp.C)
    n = X.shape[0]
    alpha = np.zeros(n)
    grad = -np.ones(n)
    pos = y > 0
    n_iter = 0
    while True:
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        violation = -y * grad
        i = int(np.argmax(np.where(up, violation, -np.inf)))
        j = int(np.argmin(np.where(low, violation, np.inf)))
        m_up, m_low = violation[i], violation[j]
        residual = m_up - m_low
        if residual <= tol:
            break
        if n_iter >= max_iter:
            raise ConvergenceError("SMO hit {} pair updates with KKT residual {:.3e}"
                                   .format(max_iter, residual), residual=residual)
        k_i = kernel.row(i)
        k_j = kernel.row(j)
        curvature = max(k_i[i] + k_j[j] - 2.0 * k_i[j], _TAU)
        room_i = C - alpha[i] if y[i] > 0 else alpha[i]
        room_j = alpha[j] if y[j] > 0 else C - alpha[j]
        step = min(residual / curvature, room_i, room_j)
        alpha[i] += y[i] * step
        alpha[j] -= y[j] * step
        if step == room_i:
            alpha[i] = C if y[i] > 0 else 0.0
        if step == room_j:
            alpha[j] = 0.0 if y[j] > 0 else C
        grad += step * y * (k_i - k_j)
        n_iter += 1

    _restore_equality(alpha, y, C)
    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        bias = float(np.mean(-y[free] * grad[free]))
    else:
        bias = 0.5 * (m_up + m_low)
    support = np.flatnonzero(alpha > 0)
    return BinaryRbfSvm(X[support], alpha[support] * y[support], bias, hp.gamma, C,
                        kkt_residual=float(max(residual, 0.0)), n_iter=n_iter, support_index=support)


def _restore_equality(alpha, y, C):
    """Push the rounding drift of sum(alpha * y) onto the freest variable."""
    drift = math.fsum(alpha * y)
    if drift == 0.0:
        return
    free = np.flatnonzero((alpha > 0) & (alpha < C))
    if free.size == 0:
        return
    k = free[np.argmax(np.minimum(alpha[free], C - alpha[free]))]
    alpha[k] = min(max(alpha[k] - y[k] * drift, 0.0), C)


class MulticlassSvm:
    """One-vs-all bundle of c binary RBF machines sharing a support set.

    Attributes:
        support_vectors (numpy.ndarray): (s, d) union of all support vectors.
        dual_coefs (numpy.ndarray): (s, c); column k holds alpha * y of
            machine k (0 where the row is not one of its support vectors).
        biases (numpy.ndarray): (c,).
        gammas (numpy.ndarray): (c,).
        Cs (numpy.ndarray): (c,).
        kkt_residuals (numpy.ndarray): (c,).
    """

    def __init__(self, support_vectors, dual_coefs, biases, gammas, Cs=None, kkt_residuals=None):
        self.support_vectors = np.asarray(support_vectors, dtype=np.float64)
        self.dual_coefs = np.asarray(dual_coefs, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        self.gammas = np.asarray(gammas, dtype=np.float64)
        c = self.biases.shape[0]
        self.Cs = np.full(c, np.nan) if Cs is None else np.asarray(Cs, dtype=np.float64)
        self.kkt_residuals = np.zeros(c) if kkt_residuals is None else np.asarray(kkt_residuals, dtype=np.float64)
        if self.dual_coefs.shape != (self.support_vectors.shape[0], c) or self.gammas.shape != (c,):
            raise ShapeError("inconsistent multiclass svm arrays")
        self._groups = [(g, np.flatnonzero(self.gammas == g)) for g in np.unique(self.gammas)]

    @property
    def num_classes(self):
        return self.biases.shape[0]

    @property
    def dim(self):
        return self.support_vectors.shape[1]

    def machine(self, k):
        """The binary machine of class k (1-based)."""
        self._check_class(k)
        col = self.dual_coefs[:, k - 1]
        rows = np.flatnonzero(col != 0.0)
        return BinaryRbfSvm(self.support_vectors[rows], col[rows], self.biases[k - 1],
                            self.gammas[k - 1], self.Cs[k - 1], self.kkt_residuals[k - 1])

    def _check_class(self, k):
        if not 1 <= k <= self.num_classes:
            raise ValueError("class {} outside 1..{}".format(k, self.num_classes))

    def _check_dim(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeError("input has {} features, svm expects {}".format(x.shape[-1], self.dim))

    def to_state(self):
        meta = {'num_classes': int(self.num_classes)}
        arrays = {'support_vectors': self.support_vectors, 'dual_coefs': self.dual_coefs,
                  'biases': self.biases, 'gammas': self.gammas, 'Cs': self.Cs,
                  'kkt_residuals': self.kkt_residuals}
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        return cls(arrays['support_vectors'], arrays['dual_coefs'], arrays['biases'],
                   arrays['gammas'], arrays['Cs'], arrays['kkt_residuals'])


def decision_scores(svm, x):
    """Raw decision values of the c machines.

    Args:
        svm (MulticlassSvm): the bundle.
        x (numpy.ndarray): (d,) sample or (n, d) batch.

    Returns:
        numpy.ndarray: (c,) or (n, c).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    svm._check_dim(x)
    scores = np.empty((x.shape[0], svm.num_classes))
    for gamma, cols in svm._groups:
        k = rbf_kernel_matrix(x, svm.support_vectors, gamma)
        scores[:, cols] = k @ svm.dual_coefs[:, cols] + svm.biases[cols]
    return scores[0] if single else scores


def scores_vjp(svm, x, cotangent):
    """Gradient wrt x of sum_k cotangent[k] * score_k(x), for one sample.

    Uses dK(x, x_i)/dx = -2 gamma (x - x_i) K(x, x_i).
    """
    x = np.asarray(x, dtype=np.float64)
    svm._check_dim(x)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != (svm.num_classes,):
        raise ShapeError("cotangent must have {} entries".format(svm.num_classes))
    grad = np.zeros_like(x)
    for gamma, cols in svm._groups:
        weights = svm.dual_coefs[:, cols] @ cotangent[cols]
        if not np.any(weights):
            continue
        w = weights * rbf_kernel_matrix(x, svm.support_vectors, gamma)[0]
        grad += -2.0 * gamma * (x * w.sum() - svm.support_vectors.T @ w)
    return grad


def score_gradient(svm, x, k):
    """Gradient of decision_scores(svm, x)[k - 1] wrt x."""
    svm._check_class(k)
    cotangent = np.zeros(svm.num_classes)
    cotangent[k - 1] = 1.0
    return scores_vjp(svm, x, cotangent)


def _xy(X, y):
    """Accept either (features, labels) arrays or a Dataset in X."""
    if hasattr(X, 'features'):
        return np.asarray(X.features, dtype=np.float64), np.asarray(X.labels, dtype=np.int64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError("features must be (n, d) with n labels")
    return X, y


def _as_hp_list(hp, c):
    if isinstance(hp, SvmHyperparams):
        return [hp] * c
    hp = list(hp)
    if len(hp) != c:
        raise ValueError("need one SvmHyperparams per class ({}), got {}".format(c, len(hp)))
    return hp


def ova_train(X, y, hp, tol=1e-3, n_classes=None, n_workers=1, max_iter=MAX_PAIR_UPDATES,
              cache_mb=1024, logger=None):
    """Train c one-vs-all machines; machine k sees class k as +1.

    Args:
        X (numpy.ndarray): (n, d) inputs.
        y (numpy.ndarray): labels in 1..c.
        hp (SvmHyperparams or list): shared or per-class hyperparameters.
        tol (float): SMO tolerance.
        n_classes (int): c, defaults to max(y).
        n_workers (int): machines trained in parallel.
        logger (logging.Logger): logger object to store logs.

    Returns:
        MulticlassSvm: the bundle.
    """
    logger = _get_logger(logger)
    if n_classes is None:
        n_classes = getattr(X, 'num_classes', None)
    X, y = _xy(X, y)
    c = int(y.max()) if n_classes is None else int(n_classes)
    if c < 2:
        raise DataError("one-vs-all training needs at least 2 classes")
    missing = [k for k in range(1, c + 1) if not np.any(y == k)]
    if missing:
        raise DataError("classes {} have no training samples".format(missing))
    hps = _as_hp_list(hp, c)
    shared = {}
    for h in hps:
        if h.gamma not in shared:
            shared[h.gamma] = _KernelRows(X, h.gamma, cache_mb)

    def _one(k):
        return smo_train(X, np.where(y == k, 1.0, -1.0), hps[k - 1], tol, max_iter, kernel=shared[hps[k - 1].gamma])

    machines = _run_ordered(_one, [(k,) for k in range(1, c + 1)], n_workers)
    union = np.unique(np.concatenate([m.support_index for m in machines]))
    position = {int(r): p for p, r in enumerate(union)}
    coefs = np.zeros((union.size, c))
    for k, m in enumerate(machines):
        coefs[[position[int(r)] for r in m.support_index], k] = m.dual_coefs
    logger.info("ova_train: {} classes, {} support vectors, max KKT residual {:.2e}"
                .format(c, union.size, max(m.kkt_residual for m in machines)))
    return MulticlassSvm(X[union], coefs, [m.bias for m in machines], [m.gamma for m in machines],
                         [m.C for m in machines], [m.kkt_residual for m in machines])


@dataclass
class GridSearchResult:
    """Outcome of a cross-validated grid search.

    Attributes:
        grid (list of SvmHyperparams): candidates, in search order.
        mean_accuracy (numpy.ndarray): mean fold accuracy per candidate.
        fold_accuracy (numpy.ndarray): (len(grid), k_folds) raw accuracies.
        best_index (int): first candidate attaining the maximum.
    """
    grid: list
    mean_accuracy: np.ndarray
    fold_accuracy: np.ndarray
    best_index: int

    @property
    def best(self):
        return self.grid[self.best_index]


def grid_search_table(X, y, grid, k_folds=5, seed=0, tol=1e-3, n_workers=1, n_classes=None):
    """Stratified k-fold argmax accuracy of every grid point.

    Returns:
        GridSearchResult: the full table and the selected point.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("grid is empty")
    if n_classes is None:
        n_classes = getattr(X, 'num_classes', None)
    X, y = _xy(X, y)
    c = int(y.max()) if n_classes is None else int(n_classes)
    counts = np.bincount(y, minlength=c + 1)[1:]
    if np.any(counts < k_folds):
        raise StratificationError("every class needs >= {} samples for {}-fold search, counts {}"
                                  .format(k_folds, k_folds, counts.tolist()))
    folds = list(StratifiedKFold(n_splits=k_folds, shuffle=True, random_state=seed).split(X, y))

    def _fold_accuracy(h, train_idx, test_idx):
        svm = ova_train(X[train_idx], y[train_idx], h, tol, n_classes=c)
        predicted = np.argmax(decision_scores(svm, X[test_idx]), axis=1) + 1
        return float(np.mean(predicted == y[test_idx]))

    tasks = [(h, tr, te) for h in grid for tr, te in folds]
    folds_acc = np.array(_run_ordered(_fold_accuracy, tasks, n_workers)).reshape(len(grid), k_folds)
    mean_acc = folds_acc.mean(axis=1)
    # np.argmax returns the first maximum, so ties keep grid order
    return GridSearchResult(grid, mean_acc, folds_acc, int(np.argmax(mean_acc)))


def grid_search_cv(X, y, grid, k_folds=5, seed=0, tol=1e-3, n_workers=1, n_classes=None, logger=None):
    """Pick (C, gamma) by stratified k-fold cross-validation accuracy.

    Ties go to the earliest grid point; a single-point grid is returned
    without any fitting.

    Args:
        X (numpy.ndarray or Dataset): (n, d) inputs.
        y (numpy.ndarray): labels in 1..c (ignored when X is a Dataset).
        grid (list of SvmHyperparams): candidates, in priority order.
        k_folds (int): number of folds.
        seed (int): fold shuffling seed.

    Returns:
        SvmHyperparams: the selected point.
    """
    logger = _get_logger(logger)
    grid = list(grid)
    if not grid:
        raise ValueError("grid is empty")
    if len(grid) == 1:
        return grid[0]
    result = grid_search_table(X, y, grid, k_folds, seed, tol, n_workers, n_classes)
    for h, acc in zip(grid, result.mean_accuracy):
        logger.info("grid_search_cv: C={:g} gamma={:g} mean accuracy {:.4f}".format(h.C, h.gamma, acc))
    logger.info("grid_search_cv: selected C={:g} gamma={:g}".format(result.best.C, result.best.gamma))
    return result.best

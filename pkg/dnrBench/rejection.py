"""
This is a chunk of scripts for the rejecting classifier: RBF SVMs on tapped
network representations, a combiner SVM trained by stacked generalization
on their out-of-fold scores, and a reject threshold theta acting as the
constant score of class 0.
"""
import copy
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .errors import ConvergenceError, ShapeError, StratificationError
from .internal_functions import _get_logger, _run_ordered
from .kernel_svm import MulticlassSvm, SvmHyperparams, decision_scores, default_grid, grid_search_cv, \
    ova_train, scores_vjp
from .tensor_nn import Network, class_scores

BATCH_SIZE = 256


@dataclass(frozen=True)
class LayerTap:
    """Ordered layer ids whose activations feed the base SVMs."""
    tap_indices: tuple

    def __post_init__(self):
        taps = tuple(int(t) for t in self.tap_indices)
        if not taps:
            raise ValueError("at least one tap is needed")
        if taps[0] < 0 or any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError("tap indices must be non-negative and strictly increasing, got {}".format(taps))
        object.__setattr__(self, 'tap_indices', taps)

    def __len__(self):
        return len(self.tap_indices)

    def __iter__(self):
        return iter(self.tap_indices)

    def check(self, net):
        for t in self.tap_indices:
            if t >= net.m:
                raise IndexError("tap {} outside the network's layers 0..{}".format(t, net.m - 1))


def _as_taps(taps, net):
    if taps is None:
        taps = net.default_taps()
    if not isinstance(taps, LayerTap):
        taps = LayerTap(tuple(taps))
    taps.check(net)
    return taps


@dataclass
class ScoreVector:
    """Combined class scores s_1..s_c and the reject score theta.

    s has shape (c,) for one sample or (n, c) for a batch.
    """
    s: np.ndarray
    theta: float = None

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if not np.all(np.isfinite(self.s)):
            raise ValueError("scores must be finite")

    @property
    def num_classes(self):
        return self.s.shape[-1]

    def decide(self):
        return decide_with_reject(self.s, self.theta)


@dataclass
class StackingLedger:
    """Bookkeeping of which samples trained the base SVMs that produced
    each out-of-fold row of the combiner training matrix.

    Attributes:
        producer (numpy.ndarray): (n,) fold whose base SVMs scored row r.
        train_mask (numpy.ndarray): (folds, n) 1 where sample j trained the
            base SVMs of that fold.
    """
    producer: np.ndarray
    train_mask: np.ndarray

    def leaks(self):
        """Rows scored by base SVMs that saw them during training."""
        rows = np.arange(self.producer.shape[0])
        return np.flatnonzero(self.train_mask[self.producer, rows] != 0)


def check_stacking_hygiene(ledger):
    """True if no combiner row came from a base SVM trained on that row."""
    return ledger.leaks().size == 0


@dataclass
class DnrModel:
    """The fitted rejecting classifier.

    Attributes:
        network (Network): frozen feature extractor.
        taps (LayerTap): tapped layer ids.
        base_svms (list of MulticlassSvm): one per tap.
        combiner (MulticlassSvm): over the L*c concatenated base scores.
        theta (float): reject threshold, None until calibrated.
        base_hps (list of SvmHyperparams): selected per tap.
        combiner_hp (SvmHyperparams): selected for the combiner.
        ledger (StackingLedger): stacked generalization bookkeeping.
    """
    network: Network
    taps: LayerTap
    base_svms: list
    combiner: MulticlassSvm
    theta: float = None
    base_hps: list = field(default_factory=list)
    combiner_hp: SvmHyperparams = None
    ledger: StackingLedger = None

    def __post_init__(self):
        c = self.combiner.num_classes
        if len(self.base_svms) != len(self.taps):
            raise ShapeError("{} base svms for {} taps".format(len(self.base_svms), len(self.taps)))
        if self.combiner.dim != len(self.taps) * c:
            raise ShapeError("combiner expects {} inputs, taps provide {}".format(self.combiner.dim, len(self.taps) * c))
        if self.theta is not None and not math.isfinite(self.theta):
            raise ValueError("theta must be finite")

    @property
    def num_classes(self):
        return self.combiner.num_classes

    def to_state(self):
        net_meta, net_arrays = self.network.to_state()
        meta = {'taps': list(self.taps.tap_indices), 'network': net_meta,
                'base_svms': [], 'combiner': self.combiner.to_state()[0],
                'base_hps': [[h.C, h.gamma] for h in self.base_hps],
                'combiner_hp': None if self.combiner_hp is None else [self.combiner_hp.C, self.combiner_hp.gamma],
                'calibrated': self.theta is not None}
        arrays = _prefixed(net_arrays, 'network')
        for i, svm in enumerate(self.base_svms):
            svm_meta, svm_arrays = svm.to_state()
            meta['base_svms'].append(svm_meta)
            arrays.update(_prefixed(svm_arrays, 'base{}'.format(i)))
        arrays.update(_prefixed(self.combiner.to_state()[1], 'combiner'))
        arrays['theta'] = np.array([0.0 if self.theta is None else self.theta])
        if self.ledger is not None:
            arrays['ledger/producer'] = self.ledger.producer
            arrays['ledger/train_mask'] = self.ledger.train_mask
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        network = Network.from_state(meta['network'], _unprefixed(arrays, 'network'))
        base = [MulticlassSvm.from_state(m, _unprefixed(arrays, 'base{}'.format(i)))
                for i, m in enumerate(meta['base_svms'])]
        combiner = MulticlassSvm.from_state(meta['combiner'], _unprefixed(arrays, 'combiner'))
        ledger = None
        if 'ledger/producer' in arrays:
            ledger = StackingLedger(arrays['ledger/producer'], arrays['ledger/train_mask'])
        return cls(network, LayerTap(tuple(meta['taps'])), base, combiner,
                   theta=float(arrays['theta'][0]) if meta['calibrated'] else None,
                   base_hps=[SvmHyperparams(*h) for h in meta['base_hps']],
                   combiner_hp=None if meta['combiner_hp'] is None else SvmHyperparams(*meta['combiner_hp']),
                   ledger=ledger)


def _prefixed(arrays, prefix):
    return {'{}/{}'.format(prefix, k): v for k, v in arrays.items()}


def _unprefixed(arrays, prefix):
    head = prefix + '/'
    return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}


def extract_representations(net, x, taps, batch_size=BATCH_SIZE):
    """Flattened activations of the tapped layers, in evaluation mode.

    Args:
        net (Network): the network.
        x (numpy.ndarray): one sample or a batch in the network input shape.
        taps (LayerTap or sequence): layer ids.

    Returns:
        list of numpy.ndarray: per tap, (d_i,) or (n, d_i).
    """
    taps = _as_taps(taps, net)
    batch, single = net._as_batch(x)
    top = taps.tap_indices[-1]
    chunks = [[] for _ in taps.tap_indices]
    for i in range(0, len(batch), batch_size):
        activations, _ = net._forward(batch[i:i + batch_size], upto=top)
        for j, t in enumerate(taps.tap_indices):
            chunks[j].append(activations[t].reshape(activations[t].shape[0], -1))
    reps = [np.concatenate(c) if c else np.zeros((0, int(np.prod(net.shapes[t]))))
            for c, t in zip(chunks, taps.tap_indices)]
    return [r[0] for r in reps] if single else reps


def _stack_base_scores(base_svms, reps):
    return np.concatenate([np.atleast_2d(decision_scores(svm, r)) for svm, r in zip(base_svms, reps)], axis=1)


def _tap_grids(grids, dims):
    if grids is None:
        return [default_grid(d) for d in dims]
    grids = list(grids)
    if grids and isinstance(grids[0], SvmHyperparams):
        return [grids] * len(dims)
    if len(grids) != len(dims):
        raise ValueError("need one grid per tap ({}), got {}".format(len(dims), len(grids)))
    return grids


def _stacking_folds(labels, folds, seed, num_classes):
    counts = np.bincount(labels, minlength=num_classes + 1)[1:]
    if np.any(counts < folds):
        raise StratificationError("stacked generalization needs >= {} samples per class, counts {}"
                                  .format(folds, counts.tolist()))
    return list(StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
                .split(np.zeros(len(labels)), labels))


def _fit_ova(tap, x, y, hp, tol, c, cache_mb):
    try:
        return ova_train(x, y, hp, tol, n_classes=c, cache_mb=cache_mb)
    except ConvergenceError as e:
        raise ConvergenceError("tap {}: {}".format(tap, e), residual=e.residual) from e


def _search_tap(tap, x, y, grid, cv_folds, seed, tol, n_workers, c, logger):
    try:
        return grid_search_cv(x, y, grid, cv_folds, seed, tol, n_workers, n_classes=c, logger=logger)
    except ConvergenceError as e:
        raise ConvergenceError("tap {}: {}".format(tap, e), residual=e.residual) from e


def fit_dnr(net, train, taps=None, folds=3, grids=None, combiner_grid=None, seed=0, cv_folds=5,
            tol=1e-3, n_workers=1, cache_mb=1024, logger=None):
    """Fit base SVMs and the stacked combiner (theta left uncalibrated).

    Base SVM hyperparameters are chosen per tap by cross-validated grid
    search on the full training set; the combiner is trained on the
    out-of-fold base scores of a stratified `folds`-fold partition; the
    final base SVMs are then retrained on the full training set.

    Args:
        net (Network): trained network, never modified.
        train (Dataset): training set.
        taps (LayerTap or sequence): layer ids, default net.default_taps().
        folds (int): stacked generalization folds.
        grids (list): one SvmHyperparams grid for all taps, or one per tap.
        combiner_grid (list of SvmHyperparams): combiner candidates.
        seed (int): fold shuffling seed.
        cv_folds (int): grid-search folds.
        tol (float): SMO tolerance.
        n_workers (int): parallel SVM fits.
        logger (logging.Logger): logger object to store logs.

    Returns:
        DnrModel: with theta None.
    """
    logger = _get_logger(logger)
    taps = _as_taps(taps, net)
    c = train.num_classes
    y = train.labels
    reps = extract_representations(net, train.images(), taps)
    split = _stacking_folds(y, folds, seed, c)
    tap_grids = _tap_grids(grids, [r.shape[1] for r in reps])

    base_hps = []
    for t, r, grid in zip(taps, reps, tap_grids):
        base_hps.append(_search_tap(t, r, y, grid, cv_folds, seed, tol, n_workers, c, logger))
        logger.info("fit_dnr: tap {} ({} features) uses C={:g} gamma={:g}"
                    .format(t, r.shape[1], base_hps[-1].C, base_hps[-1].gamma))

    n = len(train)
    oof = np.zeros((n, len(taps) * c))
    producer = np.full(n, -1, dtype=np.int64)
    train_mask = np.zeros((folds, n), dtype=np.int64)
    tasks = [(f, j) for f in range(folds) for j in range(len(taps))]

    def _fold_task(f, j):
        tr, va = split[f]
        svm = _fit_ova(taps.tap_indices[j], reps[j][tr], y[tr], base_hps[j], tol, c, cache_mb)
        return decision_scores(svm, reps[j][va])

    for (f, j), scores in zip(tasks, _run_ordered(_fold_task, tasks, n_workers)):
        tr, va = split[f]
        oof[va, j * c:(j + 1) * c] = scores
        producer[va] = f
        train_mask[f, tr] = 1

    ledger = StackingLedger(producer, train_mask)
    combiner_hp = _search_tap('combiner', oof, y, combiner_grid or default_grid(oof.shape[1]), cv_folds, seed, tol,
                              n_workers, c, logger)
    combiner = _fit_ova('combiner', oof, y, combiner_hp, tol, c, cache_mb)
    base_svms = _run_ordered(lambda j: _fit_ova(taps.tap_indices[j], reps[j], y, base_hps[j], tol, c, cache_mb),
                             [(j,) for j in range(len(taps))], n_workers)
    logger.info("fit_dnr: combiner C={:g} gamma={:g} on {} stacked features"
                .format(combiner_hp.C, combiner_hp.gamma, oof.shape[1]))
    return DnrModel(net, taps, base_svms, combiner, None, base_hps, combiner_hp, ledger)


def fit_nr(net, train, grid=None, combiner_grid=None, folds=3, seed=0, cv_folds=5, tol=1e-3,
           n_workers=1, cache_mb=1024, logger=None):
    """The last-layer-only baseline: one SVM on the logits, stacked under a
    combiner exactly as fit_dnr does for a single tap."""
    logger = _get_logger(logger)
    c = train.num_classes
    y = train.labels
    layer = net.logits_index
    z = class_scores(net, train.images(), layer=layer, batch_size=BATCH_SIZE).reshape(len(train), -1)
    split = _stacking_folds(y, folds, seed, c)
    hp = _search_tap(layer, z, y, grid or default_grid(z.shape[1]), cv_folds, seed, tol, n_workers, c, logger)

    oof = np.zeros((len(train), c))
    producer = np.full(len(train), -1, dtype=np.int64)
    train_mask = np.zeros((folds, len(train)), dtype=np.int64)
    for f, (tr, va) in enumerate(split):
        oof[va] = decision_scores(_fit_ova(layer, z[tr], y[tr], hp, tol, c, cache_mb), z[va])
        producer[va] = f
        train_mask[f, tr] = 1

    combiner_hp = _search_tap('combiner', oof, y, combiner_grid or default_grid(c), cv_folds, seed, tol, n_workers,
                              c, logger)
    combiner = _fit_ova('combiner', oof, y, combiner_hp, tol, c, cache_mb)
    svm = _fit_ova(layer, z, y, hp, tol, c, cache_mb)
    logger.info("fit_nr: layer {} C={:g} gamma={:g}".format(layer, hp.C, hp.gamma))
    return DnrModel(net, LayerTap((layer,)), [svm], combiner, None, [hp], combiner_hp,
                    StackingLedger(producer, train_mask))


def combined_scores(model, x, batch_size=BATCH_SIZE):
    """Combiner scores s_1..s_c of one sample or a batch."""
    reps = extract_representations(model.network, x, model.taps, batch_size)
    single = reps[0].ndim == 1
    s = decision_scores(model.combiner, _stack_base_scores(model.base_svms, reps))
    return ScoreVector(s[0] if single else s, model.theta)


def threshold_from_scores(max_scores, target_reject_rate):
    """Threshold rejecting ceil(rho * N) of the given max-scores.

    rho = 0 gives the float just below the minimum, so nothing is rejected;
    any positive rho rejects at least one score.
    """
    scores = np.sort(np.asarray(max_scores, dtype=np.float64).ravel())
    if scores.size == 0:
        raise ValueError("no scores to calibrate on")
    if not 0.0 <= target_reject_rate < 1.0:
        raise ValueError("target reject rate must lie in [0, 1), got {}".format(target_reject_rate))
    if target_reject_rate == 0.0:
        return float(np.nextafter(scores[0], -np.inf))
    # rounding first keeps e.g. 0.1 * 10 from becoming ceil(1.0000000000000002)
    k = max(1, int(math.ceil(round(target_reject_rate * scores.size, 9))))
    return float(scores[k - 1])


def calibrate_threshold(model, clean_val, target_reject_rate=0.1, logger=None):
    """Theta rejecting the target fraction of a clean validation set.

    Args:
        model (DnrModel): fitted model.
        clean_val (Dataset): clean validation samples.
        target_reject_rate (float): rho in [0, 1).

    Returns:
        float: theta.
    """
    logger = _get_logger(logger)
    if len(clean_val) == 0:
        raise ValueError("calibration set is empty")
    max_scores = combined_scores(model, clean_val.images()).s.max(axis=1)
    theta = threshold_from_scores(max_scores, target_reject_rate)
    logger.info("calibrate_threshold: theta={:.6g} rejects {}/{} validation samples"
                .format(theta, int(np.sum(max_scores <= theta)), len(clean_val)))
    return theta


def with_threshold(model, theta):
    """Shallow copy of model carrying theta."""
    calibrated = copy.copy(model)
    calibrated.theta = float(theta)
    calibrated.__post_init__()
    return calibrated


def decide_with_reject(s, theta):
    """0 if max_k s_k <= theta, else the first class attaining the max.

    Args:
        s (numpy.ndarray): (c,) or (n, c) scores.
        theta (float): reject threshold.

    Returns:
        int or numpy.ndarray: labels in 0..c.
    """
    if theta is None:
        raise ValueError("model has no reject threshold; calibrate it first")
    s = np.asarray(s, dtype=np.float64)
    best = np.argmax(s, axis=-1)
    decision = np.where(np.max(s, axis=-1) <= theta, 0, best + 1)
    return int(decision) if decision.ndim == 0 else decision


def predict_with_reject(model, x, batch_size=BATCH_SIZE):
    """Labels in 0..c for one sample or a batch."""
    return decide_with_reject(combined_scores(model, x, batch_size).s, model.theta)


def dnr_scores_vjp(model, x, cotangent):
    """Gradient wrt one input x of sum_k cotangent[k] * s_k(x).

    The cotangent flows through the combiner to the stacked base scores, is
    split per tap, pulled back through each base SVM to its representation,
    and all taps go through one backward pass of the network.
    """
    net = model.network
    _, single = net._as_batch(x)
    if not single:
        raise ShapeError("gradients are computed one sample at a time")
    reps = extract_representations(net, x, model.taps)
    stacked = _stack_base_scores(model.base_svms, reps)[0]
    u = scores_vjp(model.combiner, stacked, cotangent)
    c = model.num_classes
    cotangents = {}
    for j, (t, svm, z) in enumerate(zip(model.taps, model.base_svms, reps)):
        g = scores_vjp(svm, z, u[j * c:(j + 1) * c])
        cotangents[t] = g.reshape(net.shapes[t])
    return net.vjp(x, cotangents)


def dnr_score_gradient(model, x, k):
    """Gradient of s_k (k in 1..c) wrt one input x."""
    c = model.num_classes
    if not 1 <= k <= c:
        raise ValueError("class {} outside 1..{}".format(k, c))
    cotangent = np.zeros(c)
    cotangent[k - 1] = 1.0
    return dnr_scores_vjp(model, x, cotangent)

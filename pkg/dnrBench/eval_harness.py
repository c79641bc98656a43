"""
This is a chunk of scripts for security evaluation: accuracy under attack
with the reject-aware accounting rules, curves over an epsilon grid
averaged across runs, threshold sweeps, and their CSV/SVG artifacts.

Accounting: at epsilon = 0 a reject is an error; at epsilon > 0 a sample
counts as correct if it is rejected or keeps its true label. The rejection
rate is the fraction of predictions equal to 0 in both regimes.
"""
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .attack import AttackConfig, run_attacks
from .data_io import split
from .errors import ShapeError
from .internal_functions import _get_logger
from .plots import _new_figure, _save_svg
from .rejection import combined_scores, decide_with_reject, predict_with_reject, threshold_from_scores
from .tensor_nn import predict_classes

CURVE_COLUMNS = ['classifier', 'run', 'epsilon', 'accuracy', 'rejection_rate', 'n']
OPERATING_REJECT_RATE = 0.1


@dataclass
class EvalPoint:
    """Accuracy and rejection rate of one classifier at one budget.

    n_correct and n_rejected are the raw counts behind the rates, so
    accuracy - rejection_rate can be checked against the predictions.
    """
    epsilon: float
    accuracy: float
    rejection_rate: float
    n_samples: int
    n_correct: int = 0
    n_rejected: int = 0
    n_failures: int = 0


def accuracy_with_rejection(preds, labels, epsilon):
    """(accuracy, rejection_rate) of predictions in 0..c.

    Args:
        preds (array-like): predictions, 0 meaning reject.
        labels (array-like): true classes in 1..c.
        epsilon (float): budget the predictions were obtained at.
    """
    return _evaluate(preds, labels, epsilon)[:2]


def _evaluate(preds, labels, epsilon, n_failures=0):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ShapeError("{} predictions for {} labels".format(preds.size, labels.size))
    n = preds.size
    if n == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    rejected = preds == 0
    kept_correct = int(np.sum(~rejected & (preds == labels)))
    n_rejected = int(np.sum(rejected))
    n_correct = kept_correct + (n_rejected if epsilon > 0 else 0)
    accuracy = n_correct / n
    rejection_rate = n_rejected / n
    return accuracy, rejection_rate, EvalPoint(float(epsilon), accuracy, rejection_rate, n,
                                               n_correct, n_rejected, n_failures)


class SecurityCurve:
    """Accuracy and rejection rate against epsilon for one classifier.

    Attributes:
        classifier (str): classifier id.
        table (pandas.DataFrame): one row per (run, epsilon), CURVE_COLUMNS.
        points (dict): run -> list of EvalPoint.
        predictions (dict): run -> (n, len(eps)) raw predictions.
        labels (dict): run -> (n,) true classes.
    """

    def __init__(self, classifier, points, predictions=None, labels=None):
        self.classifier = classifier
        self.points = points
        self.predictions = predictions or {}
        self.labels = labels or {}
        for run_points in points.values():
            eps = [p.epsilon for p in run_points]
            if any(b <= a for a, b in zip(eps, eps[1:])):
                raise ValueError("epsilon values of a curve must be strictly increasing")
        self.table = pd.DataFrame(
            [(classifier, int(run), p.epsilon, p.accuracy, p.rejection_rate, p.n_samples)
             for run, run_points in sorted(points.items()) for p in run_points],
            columns=CURVE_COLUMNS)

    @classmethod
    def from_table(cls, table):
        """Curves (classifier id -> SecurityCurve) rebuilt from a CSV table."""
        curves = {}
        for name, rows in table.groupby('classifier', sort=False):
            points = {}
            for row in rows.itertuples(index=False):
                n = int(row.n)
                points.setdefault(int(row.run), []).append(EvalPoint(
                    float(row.epsilon), float(row.accuracy), float(row.rejection_rate), n,
                    int(round(row.accuracy * n)), int(round(row.rejection_rate * n))))
            curves[name] = cls(name, points)
        return curves

    @property
    def runs(self):
        return sorted(self.points)

    @property
    def epsilons(self):
        return sorted(self.table['epsilon'].unique())

    @property
    def n_failures(self):
        return sum(p.n_failures for run_points in self.points.values() for p in run_points)

    def summary(self):
        """Mean (and with >= 2 runs, sample standard deviation) per epsilon."""
        grouped = self.table.groupby('epsilon', sort=True)[['accuracy', 'rejection_rate']]
        out = grouped.mean().add_suffix('_mean')
        if len(self.runs) >= 2:
            out = out.join(grouped.std(ddof=1).add_suffix('_std'))
        return out.reset_index()


def _predict(target, x):
    if hasattr(target, 'layers'):
        return np.asarray(predict_classes(target, x))
    return np.asarray(predict_with_reject(target, x))


def _attacked_predictions(target, x, labels, eps_grid, cfg, n_workers, logger, progress):
    """(n, len(eps_grid)) predictions; failed attacks keep the true label."""
    preds = np.empty((len(labels), len(eps_grid)), dtype=np.int64)
    preds[:, 0] = _predict(target, x)
    failures = np.zeros(len(eps_grid), dtype=np.int64)
    if len(eps_grid) == 1:
        return preds, failures
    outcomes = run_attacks(target, x, labels, eps_grid[1:], cfg, n_workers, logger, progress)
    for i, outcome in enumerate(outcomes):
        if outcome.failed:
            preds[i, 1:] = labels[i]
            failures[1:] += 1
        else:
            preds[i, 1:] = [r.final_prediction for r in outcome.results]
    return preds, failures


def _check_eps_grid(eps_grid):
    eps_grid = [float(e) for e in eps_grid]
    if not eps_grid or eps_grid[0] != 0.0:
        raise ValueError("epsilon grid must start at 0")
    if any(b <= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("epsilon grid must be strictly increasing")
    return eps_grid


def run_security_eval(models, test, eps_grid, cfg, runs=None, n_workers=1, logger=None, progress=False):
    """Security evaluation curves of several classifiers.

    Every test sample is attacked along the epsilon grid, warm-started from
    the previous budget; rejecting models get the defense-aware objective
    and plain networks the undefended one. Epsilon 0 uses the clean samples.

    Args:
        models (dict or list of dict): classifier id -> DnrModel or Network,
            or one such dict per run.
        test (Dataset): the test set, or with `runs` the full dataset the
            per-run test splits are drawn from.
        eps_grid (sequence of float): increasing budgets starting at 0.
        cfg (AttackConfig): attack schedule.
        runs (list of SplitSpec): runs to evaluate, None for one run on test.
        n_workers (int): samples attacked in parallel.
        logger (logging.Logger): logger object to store logs.

    Returns:
        dict: classifier id -> SecurityCurve.
    """
    logger = _get_logger(logger)
    eps_grid = _check_eps_grid(eps_grid)
    if runs is None:
        plan = [(0, models if isinstance(models, dict) else models[0], test)]
    else:
        per_run = models if isinstance(models, list) else [models] * len(runs)
        if len(per_run) != len(runs):
            raise ValueError("{} model sets for {} runs".format(len(per_run), len(runs)))
        plan = [(spec.run_index, m, split(test, spec)[1]) for spec, m in zip(runs, per_run)]

    points, predictions, labels = {}, {}, {}
    for run, run_models, test_set in plan:
        x, y = test_set.images(), test_set.labels
        for name, target in run_models.items():
            preds, failures = _attacked_predictions(target, x, y, eps_grid, cfg, n_workers, logger, progress)
            run_points = [_evaluate(preds[:, k], y, eps, int(failures[k]))[2] for k, eps in enumerate(eps_grid)]
            points.setdefault(name, {})[run] = run_points
            predictions.setdefault(name, {})[run] = preds
            labels.setdefault(name, {})[run] = y
            logger.info("run_security_eval: run {} {} accuracy {}".format(
                run, name, ' '.join('{:g}:{:.3f}'.format(p.epsilon, p.accuracy) for p in run_points)))
    return {name: SecurityCurve(name, points[name], predictions[name], labels[name]) for name in points}


def threshold_sweep(model, test, eps_set, theta_grid=None, cfg=None, n_workers=1, logger=None, progress=False):
    """Clean false-rejection rate against attacked accuracy for each theta.

    The attack objective ignores the reject score, so adversarial points
    are computed once per epsilon and re-labelled for every theta.

    Args:
        model (DnrModel): fitted model.
        test (Dataset): test samples.
        eps_set (sequence of float): increasing budgets.
        theta_grid (sequence of float): thresholds; default spans clean
            false-rejection rates 0, 0.02, ..., 0.5.
        cfg (AttackConfig): attack schedule.

    Returns:
        pandas.DataFrame: columns theta, epsilon, false_rejection_rate,
        accuracy, rejection_rate, operating_point.
    """
    logger = _get_logger(logger)
    x, y = test.images(), test.labels
    clean = combined_scores(model, x).s
    clean_max = clean.max(axis=1)
    if theta_grid is None:
        theta_grid = [threshold_from_scores(clean_max, r) for r in np.round(np.arange(0.0, 0.51, 0.02), 2)]
    eps_set = [float(e) for e in eps_set]
    if any(b <= a for a, b in zip(eps_set, eps_set[1:])):
        raise ValueError("epsilon set must be strictly increasing")

    attacked = {}
    positive = [e for e in eps_set if e > 0]
    if positive:
        cfg = cfg or AttackConfig()
        outcomes = run_attacks(model, x, y, positive, cfg, n_workers, logger, progress)
        for k, eps in enumerate(positive):
            x_adv = np.stack([x[i] if o.failed else o.results[k].x_star for i, o in enumerate(outcomes)])
            failed = np.array([o.failed for o in outcomes])
            attacked[eps] = (combined_scores(model, x_adv).s, failed)

    rows = []
    for theta in theta_grid:
        frr = float(np.mean(clean_max <= theta))
        for eps in eps_set:
            if eps == 0:
                preds = decide_with_reject(clean, theta)
            else:
                scores, failed = attacked[eps]
                preds = np.where(failed, y, decide_with_reject(scores, theta))
            accuracy, rejection_rate = accuracy_with_rejection(preds, y, eps)
            rows.append((float(theta), eps, frr, accuracy, rejection_rate))
    table = pd.DataFrame(rows, columns=['theta', 'epsilon', 'false_rejection_rate', 'accuracy', 'rejection_rate'])
    gaps = (table.groupby('theta', sort=False)['false_rejection_rate'].first() - OPERATING_REJECT_RATE).abs()
    operating_theta = gaps.index[int(np.argmin(gaps.to_numpy()))]
    table['operating_point'] = table['theta'] == operating_theta
    logger.info("threshold_sweep: {} thresholds x {} budgets, operating theta {:.6g}"
                .format(len(theta_grid), len(eps_set), operating_theta))
    return table


def emit_csv(results, path):
    """Write curves (or any result table) as CSV.

    Args:
        results (SecurityCurve, list of SecurityCurve or pandas.DataFrame).
        path (str): destination.

    Returns:
        pandas.DataFrame: what was written.
    """
    if isinstance(results, SecurityCurve):
        results = [results]
    if isinstance(results, dict):
        results = list(results.values())
    if isinstance(results, pd.DataFrame):
        frame = results
    else:
        frame = pd.concat([c.table for c in results], ignore_index=True)[CURVE_COLUMNS]
    if frame.empty:
        raise ValueError("nothing to write")
    frame.to_csv(path, index=False)
    return frame


def read_curve_csv(path):
    """Read a CSV written by emit_csv, floats exactly as written."""
    return pd.read_csv(path, float_precision='round_trip')


def emit_svg_plot(curves, path, title=None, show_rejection=True):
    """Security evaluation plot: mean accuracy against epsilon per
    classifier, shaded by one standard deviation when several runs exist,
    with dashed rejection-rate curves.

    Each accuracy line carries the SVG id 'curve-<classifier>', each
    rejection line 'reject-<classifier>'.
    """
    if isinstance(curves, dict):
        curves = list(curves.values())
    if isinstance(curves, SecurityCurve):
        curves = [curves]
    if not curves:
        raise ValueError("nothing to plot")
    fig, ax = _new_figure()
    for i, curve in enumerate(curves):
        color = 'C{}'.format(i)
        summary = curve.summary()
        eps = summary['epsilon'].to_numpy()
        mean = summary['accuracy_mean'].to_numpy()
        ax.plot(eps, mean, marker='o', color=color, label=curve.classifier, gid='curve-{}'.format(curve.classifier))
        if 'accuracy_std' in summary:
            std = summary['accuracy_std'].to_numpy()
            ax.fill_between(eps, np.clip(mean - std, 0, 1), np.clip(mean + std, 0, 1), color=color, alpha=0.2)
        if show_rejection:
            ax.plot(eps, summary['rejection_rate_mean'].to_numpy(), linestyle='--', color=color,
                    label='{} rejection'.format(curve.classifier), gid='reject-{}'.format(curve.classifier))
    ax.set_xlabel('epsilon')
    ax.set_ylabel('accuracy')
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True)
    ax.legend(loc='best')
    if title:
        ax.set_title(title)
    _save_svg(fig, path)
    return path


def emit_sweep_plot(table, path, title=None):
    """Accuracy under attack against clean false-rejection rate, one line per
    epsilon, with the 10% operating point dashed."""
    if table.empty:
        raise ValueError("nothing to plot")
    fig, ax = _new_figure()
    for i, (eps, rows) in enumerate(table.sort_values('theta').groupby('epsilon', sort=True)):
        ax.plot(rows['false_rejection_rate'], rows['accuracy'], marker='.', color='C{}'.format(i),
                label='epsilon={:g}'.format(eps), gid='sweep-{:g}'.format(eps))
    ax.axvline(OPERATING_REJECT_RATE, color='k', linestyle='--', linewidth=1, gid='operating-point')
    ax.set_xlabel('false rejection rate')
    ax.set_ylabel('accuracy')
    ax.grid(True)
    ax.legend(loc='best')
    if title:
        ax.set_title(title)
    _save_svg(fig, path)
    return path

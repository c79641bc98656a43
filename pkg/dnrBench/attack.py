"""
This is a chunk of scripts for maximum-confidence evasion attacks.

The objective of a sample with true class y is

    omega(x) = s_y(x) - max_{j != y} s_j(x)

(the reject score never competes), minimized by projected gradient descent
over the l_p ball of radius epsilon around x0 intersected with the [0, 1]
box. Each iteration tries step_doublings step sizes eta * 2**i along the
gradient and moves to the candidate with the smallest objective; optional
restarts repeat the descent from random points of the ball, and the best
point seen, x0 included, is returned.
"""
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from tqdm import tqdm

from .errors import AttackNumericError, AttackTimeout, ShapeError
from .internal_functions import _get_logger, _run_ordered
from .rejection import combined_scores, decide_with_reject, dnr_scores_vjp
from .tensor_nn import class_scores

_NORMS = {1: 1.0, 2: 2.0, 'l1': 1.0, 'l2': 2.0, 'inf': math.inf, 'linf': math.inf, math.inf: math.inf}
_REL_SLACK = 1e-12
_ABS_SLACK = 1e-15


def _parse_norm(norm):
    key = norm.lower() if isinstance(norm, str) else norm
    if key not in _NORMS:
        raise ValueError("unsupported norm {!r}; use 1, 2 or inf".format(norm))
    return _NORMS[key]


@dataclass(frozen=True)
class AttackConfig:
    """Attack budget and PGD schedule.

    Attributes:
        epsilon (float): l_p budget, >= 0.
        norm (float): 1, 2 or inf.
        eta (float): initial step size, > 0.
        step_doublings (int): step sizes eta * 2**i tried per iteration.
        t (float): stop when |omega(x') - omega(x)| <= t.
        max_iters (int): iteration cap per run.
        box (tuple): per-feature (low, high) bounds.
        normalize_gradient (bool): step along the unit l2 gradient
            direction instead of the raw gradient, so eta is measured in
            input units.
        exact_box_rounds (int): Dykstra rounds approximating the exact
            projection onto ball and box; 0 projects on the ball then clips.
        timeout (float): seconds allowed per sample, None for no limit.
        restarts (int): extra runs started from random points of the ball;
            the best point over all runs is returned.
        seed (int): seed of the restart draws.
    """
    epsilon: float = 0.0
    norm: float = 2.0
    eta: float = 0.01
    step_doublings: int = 10
    t: float = 1e-6
    max_iters: int = 200
    box: tuple = (0.0, 1.0)
    normalize_gradient: bool = False
    exact_box_rounds: int = 0
    timeout: float = None
    restarts: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'norm', _parse_norm(self.norm))
        object.__setattr__(self, 'box', (float(self.box[0]), float(self.box[1])))
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if not self.eta > 0 or not self.t > 0:
            raise ValueError("eta and t must be positive")
        if self.step_doublings < 1 or self.max_iters < 1:
            raise ValueError("step_doublings and max_iters must be >= 1")
        if not self.box[0] < self.box[1]:
            raise ValueError("box low must be below box high")
        if self.exact_box_rounds < 0 or self.restarts < 0:
            raise ValueError("exact_box_rounds and restarts must be >= 0")
        if self.timeout is not None and not self.timeout > 0:
            raise ValueError("timeout must be positive")


@dataclass
class AttackResult:
    """Outcome of one attack.

    Attributes:
        x_star (numpy.ndarray): best feasible point found.
        omega_trace (list of float): best objective so far, entry 0 being
            the starting point; non-increasing.
        iterations (int): PGD iterations run over all restarts.
        final_prediction (int): label of x_star in 0..c.
        epsilon (float): budget used.
        current_trace (list of float): objective of each iterate.
        step_trace (list of int): chosen doubling index per iteration, -1
            where a restart begins.
    """
    x_star: np.ndarray
    omega_trace: list
    iterations: int
    final_prediction: int
    epsilon: float = 0.0
    current_trace: list = field(default_factory=list)
    step_trace: list = field(default_factory=list)

    @property
    def omega_star(self):
        return self.omega_trace[-1]


def omega(scores, y):
    """s_y - max_{j != y} s_j for (c,) scores or each row of (n, c) scores.

    Args:
        scores (ScoreVector or numpy.ndarray): class scores, theta ignored.
        y (int): true class in 1..c.
    """
    s = np.asarray(getattr(scores, 's', scores), dtype=np.float64)
    c = s.shape[-1]
    if c < 2:
        raise ValueError("the objective needs at least one competing class")
    if not 1 <= y <= c:
        raise ValueError("class {} outside 1..{}".format(y, c))
    others = s.copy()
    others[..., y - 1] = -np.inf
    value = s[..., y - 1] - others.max(axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def _competitor(s, y):
    others = np.array(s, dtype=np.float64)
    others[y - 1] = -np.inf
    return int(np.argmax(others)) + 1


def _cotangent(s, y):
    u = np.zeros(s.shape[-1])
    u[y - 1] = 1.0
    u[_competitor(s, y) - 1] -= 1.0
    return u


def omega_gradient(model, x, y):
    """Gradient of omega wrt one input, through the rejecting classifier.

    The max is differentiated at its first maximizer j*.
    """
    s = combined_scores(model, x).s
    return dnr_scores_vjp(model, x, _cotangent(s, y))


def undefended_omega_gradient(net, x, y):
    """Gradient of omega on the network's pre-softmax scores."""
    s = class_scores(net, x)
    return net.vjp(x, {net.logits_index: _cotangent(s, y)})


def project_l1_ball(d, epsilon):
    """Euclidean projection of d onto {u : ||u||_1 <= epsilon}.

    Sort-and-threshold: soft-threshold |d| by the largest tau keeping the
    l1 norm at epsilon.
    """
    d = np.asarray(d, dtype=np.float64)
    magnitude = np.abs(d).ravel()
    if magnitude.sum() <= epsilon:
        return d.copy()
    if epsilon == 0:
        return np.zeros_like(d)
    u = np.sort(magnitude)[::-1]
    css = np.cumsum(u)
    ranks = np.arange(1, u.size + 1)
    rho = np.flatnonzero(u - (css - epsilon) / ranks > 0)[-1]
    tau = (css[rho] - epsilon) / (rho + 1)
    return (np.sign(d.ravel()) * np.maximum(magnitude - tau, 0.0)).reshape(d.shape)


def _norm(d, p):
    flat = d.ravel()
    if p == 1.0:
        return float(np.sum(np.abs(flat)))
    if p == 2.0:
        return float(np.linalg.norm(flat))
    return float(np.max(np.abs(flat))) if flat.size else 0.0


def _project_ball(v, x0, epsilon, p):
    d = v - x0
    if p == math.inf:
        return x0 + np.clip(d, -epsilon, epsilon)
    norm = _norm(d, p)
    if norm <= epsilon * (1 + _REL_SLACK):
        return v.copy()
    if p == 2.0:
        return x0 + d * (epsilon / norm)
    return x0 + project_l1_ball(d, epsilon)


def _feasible(v, x0, cfg):
    low, high = cfg.box
    if np.any(v < low) or np.any(v > high):
        return False
    return _norm(v - x0, cfg.norm) <= cfg.epsilon * (1 + _REL_SLACK) + _ABS_SLACK


def project(v, x0, cfg):
    """Map v onto the epsilon-ball around x0, then clip to the box.

    Clipping after the ball projection keeps ball feasibility when x0 lies
    in the box. Feasible inputs come back unchanged, so project is
    idempotent. With cfg.exact_box_rounds > 0, Dykstra rounds first move v
    towards the projection onto the intersection.
    """
    v = np.asarray(v, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if v.shape != x0.shape:
        raise ShapeError("cannot project shape {} around shape {}".format(v.shape, x0.shape))
    low, high = cfg.box
    if cfg.epsilon == 0:
        return np.clip(x0, low, high)
    if _feasible(v, x0, cfg):
        return v.copy()
    x = v
    if cfg.exact_box_rounds:
        p = np.zeros_like(v)
        q = np.zeros_like(v)
        for _ in range(cfg.exact_box_rounds):
            y = _project_ball(x + p, x0, cfg.epsilon, cfg.norm)
            p = x + p - y
            x_next = np.clip(y + q, low, high)
            q = y + q - x_next
            x = x_next
    return np.clip(_project_ball(x, x0, cfg.epsilon, cfg.norm), low, high)


def _random_start(x0, cfg, rng):
    """A point drawn uniformly from the epsilon-ball around x0, clipped to the box."""
    d = x0.size
    if cfg.norm == math.inf:
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=d)
    elif cfg.norm == 2.0:
        direction = rng.standard_normal(d)
        delta = direction / max(np.linalg.norm(direction), 1e-300) * cfg.epsilon * rng.uniform() ** (1.0 / d)
    else:
        weights = rng.exponential(size=d + 1)
        delta = rng.choice([-1.0, 1.0], size=d) * cfg.epsilon * weights[:d] / weights.sum()
    return project(x0 + delta.reshape(x0.shape), x0, cfg)


def _descend(score_fn, grad_fn, x0, y, start, start_value, cfg, deadline, done):
    """One PGD run from start; returns its best point and traces."""
    best_x, best = start, start_value
    x, current = start, start_value
    current_trace, step_trace = [current], []
    steps = cfg.eta * 2.0 ** np.arange(cfg.step_doublings)
    for iteration in range(done + 1, done + cfg.max_iters + 1):
        grad = grad_fn(x)
        if not np.all(np.isfinite(grad)):
            raise AttackNumericError("non-finite objective gradient at iteration {}".format(iteration),
                                     iterate=x.copy(), iteration=iteration)
        if cfg.normalize_gradient:
            length = np.linalg.norm(grad.ravel())
            if length == 0:
                break
            grad = grad / length
        candidates = np.stack([project(x - step * grad, x0, cfg) for step in steps])
        cand_values = omega(score_fn(candidates), y)
        if not np.all(np.isfinite(cand_values)):
            raise AttackNumericError("non-finite objective at iteration {}".format(iteration),
                                     iterate=x.copy(), iteration=iteration)
        chosen = int(np.argmin(cand_values))
        previous, x, current = current, candidates[chosen], float(cand_values[chosen])
        if current < best:
            best_x, best = x, current
        current_trace.append(current)
        step_trace.append(chosen)
        if deadline is not None and time.monotonic() > deadline:
            raise AttackTimeout("attack exceeded its time budget after {} iterations".format(iteration))
        if abs(current - previous) <= cfg.t:
            break
    return best_x, best, current_trace, step_trace


def _pgd(score_fn, grad_fn, x0, y, cfg, x_init=None, deadline=None):
    """Shared PGD loop; score_fn maps a batch to (n, c) scores.

    The first run starts from x_init (or x0); cfg.restarts further runs
    start from seeded uniform draws in the ball. Traces of all runs are
    concatenated, a step index of -1 marking the start of a restart.
    """
    start = x0 if x_init is None else project(x_init, x0, cfg)
    values = omega(score_fn(np.stack([x0, start])), y)
    best_x, best = (x0, values[0]) if values[0] <= values[1] else (start, values[1])
    if cfg.epsilon == 0:
        return x0.copy(), [best], [values[1]], [], 0
    rng = np.random.default_rng(cfg.seed)
    current_trace, step_trace, start_value = [], [], values[1]
    for run in range(cfg.restarts + 1):
        if run:
            start = _random_start(x0, cfg, rng)
            start_value = float(omega(score_fn(start[None]), y)[0])
            step_trace.append(-1)
        done = sum(k >= 0 for k in step_trace)
        run_x, run_best, run_current, run_steps = _descend(
            score_fn, grad_fn, x0, y, start, start_value, cfg, deadline, done)
        if run_best < best:
            best_x, best = run_x, run_best
        current_trace += run_current
        step_trace += run_steps
    omega_trace = list(np.minimum.accumulate([min(values[0], current_trace[0])] + current_trace[1:]))
    omega_trace = [float(v) for v in omega_trace]
    return best_x.copy(), omega_trace, current_trace, step_trace, sum(k >= 0 for k in step_trace)


def pgd_attack(model, x0, y, cfg, x_init=None, deadline=None):
    """Defense-aware attack on a rejecting classifier.

    Args:
        model (DnrModel): fitted model.
        x0 (numpy.ndarray): one clean sample.
        y (int): its true class in 1..c.
        cfg (AttackConfig): budget and schedule.
        x_init (numpy.ndarray): warm start (e.g. the solution at a smaller
            epsilon), projected onto the feasible set first.
        deadline (float): time.monotonic() value after which to give up.

    Returns:
        AttackResult: the best point found.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    model.network._as_batch(x0)

    def _scores(batch):
        return combined_scores(model, batch).s

    x_star, trace, current, steps, iterations = _pgd(
        _scores, lambda x: omega_gradient(model, x, y), x0, y, cfg, x_init, deadline)
    s = combined_scores(model, x_star).s
    prediction = decide_with_reject(s, model.theta) if model.theta is not None else int(np.argmax(s)) + 1
    return AttackResult(x_star, trace, iterations, prediction, cfg.epsilon, current, steps)


def attack_undefended(net, x0, y, cfg, x_init=None, deadline=None):
    """The same attack on a plain network; every class j != y competes."""
    x0 = np.asarray(x0, dtype=np.float64)
    net._as_batch(x0)
    x_star, trace, current, steps, iterations = _pgd(
        lambda batch: class_scores(net, batch), lambda x: undefended_omega_gradient(net, x, y),
        x0, y, cfg, x_init, deadline)
    prediction = int(np.argmax(class_scores(net, x_star))) + 1
    return AttackResult(x_star, trace, iterations, prediction, cfg.epsilon, current, steps)


def grid_evasion(model, x0, y, cfg, resolution=200):
    """Exhaustive check of a 2D attack: the feasible set around x0 is
    covered by a resolution x resolution grid and every point is scored.

    Returns:
        (float, bool): the smallest objective on the grid, and whether some
        grid point is classified as neither y nor reject.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (2,):
        raise ShapeError("grid evasion needs a 2D point, got shape {}".format(x0.shape))
    low, high = cfg.box
    xs = np.linspace(max(low, x0[0] - cfg.epsilon), min(high, x0[0] + cfg.epsilon), resolution)
    ys = np.linspace(max(low, x0[1] - cfg.epsilon), min(high, x0[1] + cfg.epsilon), resolution)
    points = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    inside = np.linalg.norm(points - x0, ord=cfg.norm, axis=1) <= cfg.epsilon * (1 + _REL_SLACK) + _ABS_SLACK
    points = np.vstack([x0[None], points[inside]])
    scores = combined_scores(model, points).s
    labels = decide_with_reject(scores, model.theta)
    return float(np.min(omega(scores, y))), bool(np.any((labels != 0) & (labels != y)))


def _attack_fn(target):
    return attack_undefended if hasattr(target, 'layers') else pgd_attack


def attack_path(target, x0, y, eps_grid, cfg):
    """Attack one sample at every budget of an increasing epsilon grid,
    warm-starting each budget from the previous solution.

    Args:
        target (DnrModel or Network): defended model or plain network.
        x0 (numpy.ndarray): clean sample.
        y (int): true class.
        eps_grid (sequence of float): increasing budgets.
        cfg (AttackConfig): schedule; its epsilon is overridden.

    Returns:
        list of AttackResult: one per budget.
    """
    eps_grid = [float(e) for e in eps_grid]
    if any(b <= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("epsilon grid must be strictly increasing")
    attack = _attack_fn(target)
    deadline = None if cfg.timeout is None else time.monotonic() + cfg.timeout
    results, x_prev = [], None
    for eps in eps_grid:
        result = attack(target, x0, y, replace(cfg, epsilon=eps), x_init=x_prev, deadline=deadline)
        results.append(result)
        x_prev = result.x_star
    return results


@dataclass
class SampleAttacks:
    """Per-sample outcome of run_attacks: results per epsilon, or the error."""
    index: int
    results: list = None
    error: Exception = None

    @property
    def failed(self):
        return self.error is not None


def run_attacks(target, x, labels, eps_grid, cfg, n_workers=1, logger=None, progress=False):
    """Attack every sample along the epsilon grid, in parallel.

    Timeouts and non-finite objectives are captured per sample and logged;
    results come back in sample order.

    Args:
        target (DnrModel or Network): what to attack.
        x (numpy.ndarray): (n, ...) clean samples.
        labels (numpy.ndarray): (n,) true classes.
        eps_grid (sequence of float): increasing budgets.
        cfg (AttackConfig): schedule.
        n_workers (int): samples attacked in parallel.
        logger (logging.Logger): logger object to store logs.
        progress (bool): show a progress bar.

    Returns:
        list of SampleAttacks: one per sample.
    """
    logger = _get_logger(logger)
    bar = tqdm(total=len(labels), desc='attacks', disable=not progress)

    def _one(i):
        try:
            return SampleAttacks(i, results=attack_path(target, x[i], int(labels[i]), eps_grid, cfg))
        except (AttackTimeout, AttackNumericError) as e:
            logger.warning("attack on sample {} failed: {}".format(i, e))
            return SampleAttacks(i, error=e)
        finally:
            bar.update(1)

    try:
        outcomes = _run_ordered(_one, [(i,) for i in range(len(labels))], n_workers)
    finally:
        bar.close()
    n_failed = sum(o.failed for o in outcomes)
    if n_failed:
        logger.warning("{} of {} attacks failed and count as not evaded".format(n_failed, len(outcomes)))
    return outcomes


def dump_trace(result, path):
    """Write the iteration trace of one attack as CSV.

    Columns: iteration, omega (objective of the iterate), step_index
    (chosen doubling; -1 for the starting point and for each restart).
    """
    frame = pd.DataFrame({'iteration': np.arange(len(result.current_trace)),
                          'omega': result.current_trace,
                          'step_index': [-1] + list(result.step_trace)})
    frame.to_csv(path, index=False)
    return frame

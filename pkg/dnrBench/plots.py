"""
This is a chunk of scripts for figures: the two toy-problem panels
(decision regions with the reject region, and the attack objective with
the epsilon-ball and the attack path endpoints) and the adversarial
example gallery. Figures are written as SVG with a fixed hash salt and no
date stamp so repeated runs produce identical files.
"""
import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Circle, Polygon, Rectangle  # noqa: E402

from .attack import attack_undefended, omega, pgd_attack  # noqa: E402
from .errors import ShapeError  # noqa: E402
from .rejection import combined_scores, decide_with_reject  # noqa: E402

SVG_SALT = 'dnrBench'
REJECT_COLOR = 'white'


def _new_figure(ncols=1, nrows=1, figsize=None):
    figsize = figsize or (5.5 * ncols, 4.2 * nrows)
    return plt.subplots(nrows, ncols, figsize=figsize, squeeze=ncols * nrows == 1)


def _save_svg(fig, path):
    with plt.rc_context({'svg.hashsalt': SVG_SALT}):
        fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)


def _grid(resolution, box=(0.0, 1.0)):
    axis = np.linspace(box[0], box[1], resolution)
    xx, yy = np.meshgrid(axis, axis)
    return xx, yy, np.column_stack([xx.ravel(), yy.ravel()])


def _ball_patch(x0, epsilon, norm):
    style = dict(fill=False, edgecolor='k', linewidth=1.5, gid='eps-ball')
    if norm == 2.0:
        return Circle(x0, epsilon, **style)
    if norm == np.inf:
        return Rectangle(x0 - epsilon, 2 * epsilon, 2 * epsilon, **style)
    corners = [x0 + [epsilon, 0], x0 + [0, epsilon], x0 - [epsilon, 0], x0 - [0, epsilon]]
    return Polygon(corners, closed=True, **style)


def emit_toy_panels(model, train, x0, y, cfg, regions_path, omega_path, resolution=200, result=None):
    """Render the 2D toy panels.

    Args:
        model (DnrModel): calibrated model on 2D inputs.
        train (Dataset): toy training points, drawn on the region panel.
        x0 (numpy.ndarray): attacked point (2,).
        y (int): its true class.
        cfg (AttackConfig): attack budget and schedule.
        regions_path (str): SVG of the decision regions (reject in white).
        omega_path (str): SVG of the objective surface for class y with the
            epsilon-ball, x0 and the attack point.
        resolution (int): grid points per axis.
        result (AttackResult): precomputed attack, else pgd_attack is run.

    Returns:
        AttackResult: the attack drawn on the panel.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if result is None:
        result = pgd_attack(model, x0, y, cfg)
    xx, yy, points = _grid(resolution, cfg.box)
    scores = combined_scores(model, points).s
    labels = decide_with_reject(scores, model.theta).reshape(xx.shape)
    c = model.num_classes

    fig, ax = _new_figure()
    cmap = ListedColormap([REJECT_COLOR] + ['C{}'.format(k) for k in range(c)])
    ax.pcolormesh(xx, yy, labels, cmap=cmap, vmin=-0.5, vmax=c + 0.5, shading='auto', alpha=0.35)
    for k in range(1, c + 1):
        mask = train.labels == k
        ax.scatter(train.features[mask, 0], train.features[mask, 1], s=8, color='C{}'.format(k - 1),
                   edgecolors='k', linewidths=0.2, label='class {}'.format(k))
    ax.set_title('decision regions (white: reject)')
    ax.set_xlim(*cfg.box)
    ax.set_ylim(*cfg.box)
    ax.set_aspect('equal')
    ax.legend(loc='upper right', fontsize='small')
    _save_svg(fig, regions_path)

    fig, ax = _new_figure()
    surface = omega(scores, y).reshape(xx.shape)
    filled = ax.contourf(xx, yy, surface, levels=30, cmap='coolwarm')
    fig.colorbar(filled, ax=ax)
    ax.contour(xx, yy, (labels == 0).astype(float), levels=[0.5], colors='k', linewidths=0.8, linestyles='dotted')
    ax.add_patch(_ball_patch(x0, cfg.epsilon, cfg.norm))
    ax.plot(*x0, marker='o', color='k', gid='x0', label='x0')
    ax.plot(*result.x_star, marker='*', markersize=12, color='gold', markeredgecolor='k', gid='x-star',
            label='attack point')
    ax.set_title('objective for class {}, epsilon={:g}'.format(y, cfg.epsilon))
    ax.set_xlim(*cfg.box)
    ax.set_ylim(*cfg.box)
    ax.set_aspect('equal')
    ax.legend(loc='upper right', fontsize='small')
    _save_svg(fig, omega_path)
    return result


def _as_image(sample, shape):
    image = np.asarray(sample, dtype=np.float64).reshape(shape)
    if len(shape) == 3:
        image = image.transpose(1, 2, 0)
        if image.shape[2] == 1:
            image = image[:, :, 0]
    return image


def _label_text(label):
    return 'reject' if label == 0 else 'class {}'.format(label)


def emit_adversarial_gallery(targets, x0, y, cfg, path, magnify=None, results=None):
    """Source image, magnified perturbation and adversarial image for every
    classifier at one budget.

    Args:
        targets (dict): classifier id -> DnrModel or Network.
        x0 (numpy.ndarray): clean image in network input shape.
        y (int): its true class.
        cfg (AttackConfig): attack budget and schedule.
        path (str): destination SVG.
        magnify (float): perturbation gain, default scales the largest
            perturbation to fill [0, 1].
        results (dict): precomputed AttackResult per classifier id; the
            classifiers missing from it are attacked here.

    Returns:
        dict: classifier id -> AttackResult.
    """
    if not targets:
        raise ValueError("no classifiers to attack")
    x0 = np.asarray(x0, dtype=np.float64)
    shape = x0.shape
    if len(shape) != 3:
        raise ShapeError("the gallery needs (channels, height, width) images, got {}".format(shape))
    done = results or {}
    results = {}
    for name, target in targets.items():
        if name in done:
            results[name] = done[name]
            continue
        attack = attack_undefended if hasattr(target, 'layers') else pgd_attack
        results[name] = attack(target, x0, y, cfg)
    gain = magnify
    if gain is None:
        largest = max(np.max(np.abs(r.x_star - x0)) for r in results.values())
        gain = 0.5 / largest if largest > 0 else 1.0

    cmap = 'gray' if shape[0] == 1 else None
    fig, axes = _new_figure(3, len(results), figsize=(7.5, 2.6 * len(results)))
    axes = np.atleast_2d(axes)
    for row, (name, result) in zip(axes, results.items()):
        perturbation = np.clip(0.5 + gain * (result.x_star - x0), 0.0, 1.0)
        panels = [(x0, 'source ({})'.format(_label_text(y))),
                  (perturbation, '{}: perturbation x{:.1f}'.format(name, gain)),
                  (result.x_star, 'adversarial ({})'.format(_label_text(result.final_prediction)))]
        for ax, (image, caption) in zip(row, panels):
            ax.imshow(_as_image(image, shape), cmap=cmap, vmin=0.0, vmax=1.0)
            ax.set_title(caption, fontsize='small')
            ax.axis('off')
    fig.tight_layout()
    _save_svg(fig, path)
    return results

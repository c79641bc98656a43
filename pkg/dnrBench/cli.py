"""
This is the command line entry point of dnrBench.

    dnrbench -c config_main.yaml train-net
    dnrbench -c config_main.yaml fit-dnr
    dnrbench -c config_main.yaml calibrate
    dnrbench -c config_main.yaml sec-eval
    dnrbench demo-toy

Exit codes: 0 success, 1 usage, 2 data or config error, 3 numeric or
convergence error. Failures print one line
`dnrbench: error=<kind> code=<n> reason=<text>` followed by the detail.
"""
import glob
import sys
from dataclasses import replace
from os.path import basename, exists, join

import click
import numpy as np

from .archive import load_model, save_model
from .attack import attack_undefended, dump_trace, grid_evasion, pgd_attack
from .data_io import SplitSpec, make_toy_blobs, pretrain_subset, split, validation_subset
from .errors import DataError, DnrBenchError
from .eval_harness import SecurityCurve, emit_csv, emit_svg_plot, emit_sweep_plot, read_curve_csv, \
    run_security_eval, threshold_sweep
from .internal_functions import _set_logger
from .plots import emit_adversarial_gallery, emit_toy_panels
from .rejection import DnrModel, calibrate_threshold, fit_dnr, fit_nr, predict_with_reject, with_threshold
from .run_config import RunConfig, write_manifest
from .setting import generate_config_file
from .tensor_nn import Network, build_network, predict_classes, toy_mlp_specs, train_sgd

PROG = 'dnrbench'


def _setup(ctx, task):
    """Settings, run directory and log file of one subcommand."""
    cfg = RunConfig(config_path=ctx.obj['config_path'])
    if ctx.obj['workers'] is not None:
        if ctx.obj['workers'] < 1:
            raise click.BadParameter("--workers must be >= 1")
        cfg.n_workers = ctx.obj['workers']
    cfg.make_dirs()
    logger, log_path = _set_logger(cfg.log_dir, task)
    logger.info("{}: config {} out_dir {} workers {}".format(task, cfg.config_path, cfg.out_dir, cfg.n_workers))
    return cfg, logger


def _selected_runs(cfg, runs):
    if not runs:
        return cfg.splits
    unknown = [r for r in runs if r >= len(cfg.splits)]
    if unknown:
        raise click.BadParameter("runs {} are not configured".format(unknown))
    return [cfg.splits[r] for r in runs]


def _load(path, cls, calibrated=False):
    if not exists(path):
        raise DataError("model file {} does not exist".format(path))
    model = load_model(path).model
    if not isinstance(model, cls):
        raise DataError("{} holds a {}, expected a {}".format(path, type(model).__name__, cls.__name__))
    if calibrated and model.theta is None:
        raise DataError("{} has no reject threshold; run calibrate first".format(path))
    return model


def _run_models(cfg, spec, classifiers=None):
    """classifier id -> calibrated model or network for one run."""
    models = {}
    for name in classifiers or cfg.classifiers:
        if name == 'dnn':
            models[name] = _load(cfg.model_path('net'), Network)
        else:
            models[name] = _load(cfg.model_path(name, spec.run_index), DnrModel, calibrated=True)
    return models


@click.group(invoke_without_command=True)
@click.option('--config', '-c', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Main config yaml (defaults apply when omitted).')
@click.option('--workers', type=int, default=None, help='Worker threads, overrides config and environment.')
@click.option('--progress/--no-progress', default=False, help='Show progress bars.')
@click.pass_context
def cli(ctx, config_path, workers, progress):
    """Deep neural rejection workbench."""
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())
        ctx.exit(1)
    ctx.obj = {'config_path': config_path, 'workers': workers, 'progress': progress}


@cli.command('init-config')
@click.option('--dst-dir', default='.', type=click.Path(file_okay=False), help='Where to write config_main.yaml.')
@click.option('--overwrite', is_flag=True, help='Replace an existing file.')
def init_config(dst_dir, overwrite):
    """Write the commented config template."""
    generate_config_file(dst_dir, overwrite)


@cli.command('train-net')
@click.pass_context
def train_net(ctx):
    """Train the network on the pretraining block (or run 0's train set)."""
    cfg, logger = _setup(ctx, 'train_net')
    dataset = cfg.load_dataset()
    spec = cfg.splits[0]
    train = pretrain_subset(dataset, spec) if cfg.pretrain_size > 0 else split(dataset, spec)[0]
    net = build_network(dataset.shape, cfg.architecture, cfg.network_seed)
    if net.num_outputs != dataset.num_classes:
        raise DataError("network has {} outputs for {} classes".format(net.num_outputs, dataset.num_classes))
    net = train_sgd(net, train, cfg.train_cfg, cfg.n_workers, logger, ctx.obj['progress'])
    accuracy = float(np.mean(predict_classes(net, train.images()) == train.labels))
    logger.info("train-net: training accuracy {:.4f} on {} samples".format(accuracy, len(train)))
    path = save_model(net, cfg.model_path('net'))
    write_manifest(cfg, 'train-net', {'model': path, 'train_samples': len(train),
                                      'training_accuracy': '{:.4f}'.format(accuracy)})


@cli.command('fit-dnr')
@click.option('--run', 'runs', type=int, multiple=True, help='Run indices (default: all).')
@click.pass_context
def fit_dnr_command(ctx, runs):
    """Fit the DNR and NR classifiers of every run on the trained network."""
    cfg, logger = _setup(ctx, 'fit_dnr')
    net = _load(cfg.model_path('net'), Network)
    dataset = cfg.load_dataset()
    c = dataset.num_classes
    written = {}
    for spec in _selected_runs(cfg, runs):
        train, _ = split(dataset, spec)
        if 'dnr' in cfg.classifiers:
            taps = cfg.taps or net.default_taps()
            grids = [cfg.grid(int(np.prod(net.shapes[t]))) for t in taps]
            model = fit_dnr(net, train, taps, cfg.stacking_folds, grids, cfg.grid(len(taps) * c, combiner=True),
                            spec.seed, cfg.cv_folds, cfg.svm_tol, cfg.n_workers, cfg.kernel_cache_mb, logger)
            written['dnr_run{}'.format(spec.run_index)] = save_model(model, cfg.model_path('dnr', spec.run_index))
        if 'nr' in cfg.classifiers:
            model = fit_nr(net, train, cfg.grid(net.num_outputs), cfg.grid(c, combiner=True), cfg.stacking_folds,
                           spec.seed, cfg.cv_folds, cfg.svm_tol, cfg.n_workers, cfg.kernel_cache_mb, logger)
            written['nr_run{}'.format(spec.run_index)] = save_model(model, cfg.model_path('nr', spec.run_index))
    write_manifest(cfg, 'fit-dnr', written)


@cli.command()
@click.option('--run', 'runs', type=int, multiple=True, help='Run indices (default: all).')
@click.option('--rate', type=float, default=None, help='Target clean rejection rate, overrides the config.')
@click.pass_context
def calibrate(ctx, runs, rate):
    """Set theta of every fitted model on its run's validation set."""
    cfg, logger = _setup(ctx, 'calibrate')
    rho = cfg.target_reject_rate if rate is None else rate
    if cfg.val_size <= 0:
        raise DataError("splits.val_size must be positive to calibrate")
    dataset = cfg.load_dataset()
    thetas = {}
    for spec in _selected_runs(cfg, runs):
        val = validation_subset(dataset, spec)
        for name in ('dnr', 'nr'):
            if name not in cfg.classifiers:
                continue
            path = cfg.model_path(name, spec.run_index)
            theta = calibrate_threshold(_load(path, DnrModel), val, rho, logger)
            save_model(with_threshold(_load(path, DnrModel), theta), path)
            thetas['theta_{}_run{}'.format(name, spec.run_index)] = repr(theta)
    write_manifest(cfg, 'calibrate', dict(thetas, target_reject_rate=rho))


@cli.command()
@click.option('--run', 'run', type=int, default=0, help='Run index.')
@click.option('--sample', 'samples', type=int, multiple=True, help='Test sample indices (default: 0).')
@click.option('--epsilon', type=float, default=None, help='Budget (default: the largest of eval.eps_grid).')
@click.option('--gallery/--no-gallery', default=True, help='Render source, perturbation and adversarial images.')
@click.pass_context
def attack(ctx, run, samples, epsilon, gallery):
    """Attack single test samples and dump their traces."""
    cfg, logger = _setup(ctx, 'attack')
    spec = _selected_runs(cfg, [run])[0]
    _, test = split(cfg.load_dataset(), spec)
    attack_cfg = replace(cfg.attack_cfg, epsilon=cfg.eps_grid[-1] if epsilon is None else epsilon)
    models = _run_models(cfg, spec)
    written = {}
    for i in samples or (0,):
        if not 0 <= i < len(test):
            raise click.BadParameter("sample {} outside the {} test samples".format(i, len(test)))
        x0, y = test.images()[i], int(test.labels[i])
        results = {}
        for name, target in models.items():
            attack_fn = attack_undefended if name == 'dnn' else pgd_attack
            result = results[name] = attack_fn(target, x0, y, attack_cfg)
            path = join(cfg.curves_dir, 'trace_{}_run{}_sample{}.csv'.format(name, spec.run_index, i))
            dump_trace(result, path)
            written[basename(path)] = 'prediction {} omega {:.6g}'.format(result.final_prediction, result.omega_star)
            logger.info("attack: {} sample {} label {} -> {} after {} iterations"
                        .format(name, i, y, result.final_prediction, result.iterations))
        if gallery and len(test.shape) == 3:
            path = join(cfg.plots_dir, 'gallery_run{}_sample{}.svg'.format(spec.run_index, i))
            emit_adversarial_gallery(models, x0, y, attack_cfg, path, results=results)
            written[basename(path)] = path
    write_manifest(cfg, 'attack', dict(written, epsilon=attack_cfg.epsilon))


@cli.command('sec-eval')
@click.pass_context
def sec_eval(ctx):
    """Security evaluation curves over eval.eps_grid for every run."""
    cfg, logger = _setup(ctx, 'sec_eval')
    models = [_run_models(cfg, spec) for spec in cfg.splits]
    dataset = cfg.load_dataset()
    curves = run_security_eval(models, dataset, cfg.eps_grid, cfg.attack_cfg, cfg.splits, cfg.n_workers, logger,
                               ctx.obj['progress'])
    csv_path = join(cfg.curves_dir, 'security.csv')
    emit_csv(curves, csv_path)
    for name, curve in curves.items():
        curve.summary().to_csv(join(cfg.curves_dir, 'security_summary_{}.csv'.format(name)), index=False)
        if curve.n_failures:
            logger.warning("sec-eval: {} attack failures for {} counted as not evaded".format(curve.n_failures, name))
    svg_path = emit_svg_plot(curves, join(cfg.plots_dir, 'security.svg'))
    write_manifest(cfg, 'sec-eval', {'curves': csv_path, 'plot': svg_path,
                                     'eps_grid': ' '.join('{:g}'.format(e) for e in cfg.eps_grid)})


@cli.command()
@click.option('--run', 'runs', type=int, multiple=True, help='Run indices (default: all).')
@click.pass_context
def sweep(ctx, runs):
    """Clean false rejection against attacked accuracy over thresholds."""
    cfg, logger = _setup(ctx, 'sweep')
    dataset = cfg.load_dataset()
    written = {}
    for spec in _selected_runs(cfg, runs):
        _, test = split(dataset, spec)
        for name in ('dnr', 'nr'):
            if name not in cfg.classifiers:
                continue
            model = _load(cfg.model_path(name, spec.run_index), DnrModel, calibrated=True)
            table = threshold_sweep(model, test, cfg.sweep_eps, cfg.theta_grid, cfg.attack_cfg, cfg.n_workers,
                                    logger, ctx.obj['progress'])
            stem = 'sweep_{}_run{}'.format(name, spec.run_index)
            written[stem + '.csv'] = emit_csv(table, join(cfg.curves_dir, stem + '.csv')).shape[0]
            emit_sweep_plot(table, join(cfg.plots_dir, stem + '.svg'), title='{} run {}'.format(name, spec.run_index))
    write_manifest(cfg, 'sweep', written)


@cli.command()
@click.option('--csv', 'csv_path', type=click.Path(dir_okay=False), default=None,
              help='Curve CSV (default: curves/security.csv of the run).')
@click.pass_context
def plot(ctx, csv_path):
    """Render SVG plots from written curve and sweep CSVs."""
    cfg, logger = _setup(ctx, 'plot')
    csv_path = csv_path or join(cfg.curves_dir, 'security.csv')
    if not exists(csv_path):
        raise DataError("curve file {} does not exist; run sec-eval first".format(csv_path))
    written = {'security.svg': emit_svg_plot(SecurityCurve.from_table(read_curve_csv(csv_path)),
                                             join(cfg.plots_dir, 'security.svg'))}
    for path in sorted(glob.glob(join(cfg.curves_dir, 'sweep_*.csv'))):
        stem = basename(path)[:-len('.csv')]
        written[stem + '.svg'] = emit_sweep_plot(read_curve_csv(path), join(cfg.plots_dir, stem + '.svg'), title=stem)
    logger.info("plot: wrote {}".format(', '.join(sorted(written))))
    write_manifest(cfg, 'plot', written)


@cli.command('demo-toy')
@click.option('--epsilon', type=float, default=0.15, help='Attack budget in the [0, 1] feature square.')
@click.option('--seed', type=int, default=0, help='Blob, split and network seed.')
@click.pass_context
def demo_toy(ctx, epsilon, seed):
    """The 3-class bi-dimensional problem end to end: fit, calibrate,
    attack one point and draw the decision-region and objective panels."""
    cfg, logger = _setup(ctx, 'demo_toy')
    dataset = make_toy_blobs(cfg.toy_n_per_class if cfg.data_type == 'toy' else 200, seed)
    n = len(dataset)
    spec = SplitSpec(train_size=n // 2, test_size=n // 10, seed=seed, val_size=n // 5)
    train, test = split(dataset, spec)
    net = build_network((2,), toy_mlp_specs(), seed)
    net = train_sgd(net, train, replace(cfg.train_cfg, seed=seed), cfg.n_workers, logger, ctx.obj['progress'])
    model = fit_dnr(net, train, seed=seed, n_workers=cfg.n_workers, logger=logger)
    model = with_threshold(model, calibrate_threshold(model, validation_subset(dataset, spec),
                                                      cfg.target_reject_rate, logger))
    predictions = predict_with_reject(model, test.features)
    candidates = np.flatnonzero(predictions == test.labels)
    if candidates.size == 0:
        raise DataError("no correctly classified toy test point to attack")
    i = int(candidates[0])
    attack_cfg = replace(cfg.attack_cfg, epsilon=epsilon)
    regions = join(cfg.plots_dir, 'toy_regions.svg')
    surface = join(cfg.plots_dir, 'toy_omega.svg')
    result = emit_toy_panels(model, train, test.features[i], int(test.labels[i]), attack_cfg, regions, surface)
    grid_omega, evading = grid_evasion(model, test.features[i], int(test.labels[i]), attack_cfg)
    logger.info("demo-toy: sample {} label {} -> {} (omega {:.4f} -> {:.4f}, grid minimum {:.4f})".format(
        i, test.labels[i], result.final_prediction, result.omega_trace[0], result.omega_star, grid_omega))
    if evading and result.final_prediction == 0:
        logger.warning("demo-toy: the grid holds an evading point but the attack ended in the reject region")
    save_model(model, cfg.model_path('toy_dnr'))
    write_manifest(cfg, 'demo-toy', {'regions': regions, 'omega': surface, 'seed': seed,
                                     'attack_prediction': result.final_prediction,
                                     'attack_omega': result.omega_star, 'grid_omega': grid_omega,
                                     'evading_point_in_ball': evading})


def _report(kind, code, reason, detail):
    click.echo("{}: error={} code={} reason={}".format(PROG, kind, code, ' '.join(str(reason).split())), err=True)
    click.echo(detail, err=True)
    return code


def main(argv=None):
    """Run the cli and return its exit code."""
    try:
        rv = cli.main(args=argv, prog_name=PROG, standalone_mode=False)
    except click.exceptions.Abort:
        return _report('usage', 1, 'aborted', 'Aborted!')
    except click.ClickException as e:
        return _report('usage', 1, e.format_message(), 'Run `{} --help` for usage.'.format(PROG))
    except DnrBenchError as e:
        return _report(e.kind, e.exit_code, e, '{}: {}'.format(type(e).__name__, e))
    except OSError as e:
        return _report('io', 2, e, '{}: {}'.format(type(e).__name__, e))
    except ValueError as e:
        return _report('value', 2, e, '{}: {}'.format(type(e).__name__, e))
    return rv if isinstance(rv, int) else 0


if __name__ == '__main__':
    sys.exit(main())

"""
This is a chunk which turns the main config yaml into typed settings and
writes the manifest of a run.
"""
import os
import platform
from datetime import datetime
from os.path import exists, join

from .attack import AttackConfig
from .data_io import SplitSpec, load_cifar10_binary, load_mnist_idx, make_toy_blobs
from .errors import ConfigError
from .internal_functions import _load_yaml, _sha256_file, _threads_number
from .kernel_svm import SvmHyperparams, default_grid
from .rejection import LayerTap
from .tensor_nn import ARCHITECTURES, LayerSpec, TrainConfig

ENV_OUT_DIR = 'DNRBENCH_OUT_DIR'
ENV_WORKERS = 'DNRBENCH_WORKERS'
DATA_TYPES = ('mnist', 'cifar10', 'toy')
CLASSIFIERS = ('dnr', 'nr', 'dnn')


def _section(config, name):
    section = config.get(name)
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError("config section {!r} must be a mapping".format(name))
    return section


def _checked(build, what):
    """Run a constructor, turning its ValueError into ConfigError."""
    try:
        return build()
    except (TypeError, ValueError) as e:
        raise ConfigError("invalid {}: {}".format(what, e))


def _grid_values(value, name):
    if value is None or value == 'default':
        return None
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError("{} must be 'default' or a non-empty list".format(name))
    try:
        values = [float(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError("{} must hold numbers".format(name))
    if any(v <= 0 for v in values):
        raise ConfigError("{} values must be positive".format(name))
    return values


class RunConfig:
    """The config object.

    Attributes:
        config_path (str): the yaml the settings came from (None for defaults).
        out_dir (str): run directory.
        models_dir, curves_dir, plots_dir, log_dir (str): sub folders.
        n_workers (int): worker threads.
        data_type (str): mnist, cifar10 or toy.
        splits (list of SplitSpec): one per run.
        pretrain_size, val_size (int): extra split blocks.
        architecture (list of LayerSpec): network layers.
        network_seed (int): initialization seed.
        train_cfg (TrainConfig): SGD recipe.
        taps (tuple or None): tapped layer ids, None for the network default.
        stacking_folds, cv_folds (int): fold counts.
        svm_tol (float): SMO tolerance.
        kernel_cache_mb (int): Gram matrix memory guard.
        target_reject_rate (float): rho.
        attack_cfg (AttackConfig): attack schedule (epsilon set per budget).
        eps_grid, sweep_eps (list of float): budgets.
        theta_grid (list of float or None): sweep thresholds.
        classifiers (list of str): which of dnr, nr, dnn to evaluate.
    """

    def __init__(self, config=None, config_path=None, environ=None):
        if config is None:
            config = _load_yaml(config_path) if config_path else {}
        environ = os.environ if environ is None else environ
        self.config_path = config_path
        self.raw = config

        dirs = _section(config, 'dirs')
        self.out_dir = environ.get(ENV_OUT_DIR) or dirs.get('out_dir') or 'dnrbench_run'
        self.models_dir = join(self.out_dir, dirs.get('models') or 'models')
        self.curves_dir = join(self.out_dir, dirs.get('curves') or 'curves')
        self.plots_dir = join(self.out_dir, dirs.get('plots') or 'plots')
        self.log_dir = join(self.out_dir, dirs.get('log_dir') or 'logs')

        workers = environ.get(ENV_WORKERS)
        if workers is None:
            workers = _section(config, 'parallel').get('threads_number', 1)
        self.n_workers = _threads_number(workers)

        self._parse_data(_section(config, 'data'))
        self._parse_splits(_section(config, 'splits'))
        self._parse_network(_section(config, 'network'))
        self._parse_dnr(_section(config, 'dnr'))

        rho = _section(config, 'reject').get('target_reject_rate', 0.1)
        if not isinstance(rho, (int, float)) or not 0 <= rho < 1:
            raise ConfigError("reject.target_reject_rate must lie in [0, 1), got {!r}".format(rho))
        self.target_reject_rate = float(rho)

        attack = {k: v for k, v in _section(config, 'attack').items() if v is not None}
        self.attack_cfg = _checked(lambda: AttackConfig(**attack), 'attack section')
        self._parse_eval(_section(config, 'eval'))

    def _parse_data(self, data):
        self.data_type = data.get('type', 'toy')
        if self.data_type not in DATA_TYPES:
            raise ConfigError("data.type must be one of {}, got {!r}".format(DATA_TYPES, self.data_type))
        self.mnist_images = data.get('mnist_images')
        self.mnist_labels = data.get('mnist_labels')
        batches = data.get('cifar10_batches') or []
        self.cifar10_batches = [batches] if isinstance(batches, str) else list(batches)
        self.toy_n_per_class = int(data.get('toy_n_per_class', 200))
        self.toy_seed = int(data.get('toy_seed', 0))
        if self.data_type == 'mnist':
            paths = [self.mnist_images, self.mnist_labels]
        elif self.data_type == 'cifar10':
            paths = self.cifar10_batches or [None]
        else:
            paths = []
        for path in paths:
            if path is None or not exists(path):
                raise ConfigError("data file {} does not exist".format(path))

    def _parse_splits(self, splits):
        runs = int(splits.get('runs', 5))
        if not 1 <= runs <= 5:
            raise ConfigError("splits.runs must lie in 1..5, got {}".format(runs))
        self.seed = int(splits.get('seed', 0))
        self.pretrain_size = int(splits.get('pretrain_size', 0))
        self.val_size = int(splits.get('val_size', 0))
        sizes = dict(train_size=int(splits.get('train_size', 10000)), test_size=int(splits.get('test_size', 1000)),
                     val_size=self.val_size, pretrain_size=self.pretrain_size)
        self.splits = [_checked(lambda r=r: SplitSpec(seed=self.seed, run_index=r, **sizes), 'splits section')
                       for r in range(runs)]

    def _parse_network(self, network):
        layers = network.get('layers')
        if layers:
            self.architecture = _checked(lambda: [LayerSpec.from_dict(dict(e)) for e in layers], 'network.layers')
        else:
            name = network.get('architecture') or {'mnist': 'mnist_desk', 'cifar10': 'cifar_desk',
                                                    'toy': 'toy_mlp'}[self.data_type]
            if name not in ARCHITECTURES:
                raise ConfigError("network.architecture must be one of {}, got {!r}"
                                  .format(sorted(ARCHITECTURES), name))
            self.architecture = ARCHITECTURES[name]()
        self.network_seed = int(network.get('seed', 0))
        train = {k: v for k, v in (network.get('train') or {}).items() if v is not None}
        self.train_cfg = _checked(lambda: TrainConfig(**train), 'network.train section')

    def _parse_dnr(self, dnr):
        taps = dnr.get('taps', 'default')
        self.taps = None if taps in (None, 'default') else self._checked_taps(taps)
        self.stacking_folds = int(dnr.get('stacking_folds', 3))
        self.cv_folds = int(dnr.get('cv_folds', 5))
        if self.stacking_folds < 2 or self.cv_folds < 2:
            raise ConfigError("dnr.stacking_folds and dnr.cv_folds must be >= 2")
        self.C_grid = _grid_values(dnr.get('C_grid'), 'dnr.C_grid')
        self.gamma_grid = _grid_values(dnr.get('gamma_grid'), 'dnr.gamma_grid')
        self.combiner_C_grid = _grid_values(dnr.get('combiner_C_grid'), 'dnr.combiner_C_grid')
        self.combiner_gamma_grid = _grid_values(dnr.get('combiner_gamma_grid'), 'dnr.combiner_gamma_grid')
        self.svm_tol = float(dnr.get('svm_tol', 1e-3))
        self.kernel_cache_mb = int(dnr.get('kernel_cache_mb', 1024))
        if self.svm_tol <= 0 or self.kernel_cache_mb < 1:
            raise ConfigError("dnr.svm_tol and dnr.kernel_cache_mb must be positive")

    def _checked_taps(self, taps):
        """Tap ids as a tuple, each naming a layer of the architecture."""
        if not isinstance(taps, (list, tuple)):
            raise ConfigError("dnr.taps must be 'default' or a list of layer ids, got {!r}".format(taps))
        tap = _checked(lambda: LayerTap(tuple(int(t) for t in taps)), 'dnr.taps')
        n_layers = len(self.architecture)
        outside = [t for t in tap if t >= n_layers]
        if outside:
            raise ConfigError("dnr.taps {} outside the architecture's layers 0..{}".format(outside, n_layers - 1))
        return tuple(tap)

    def _parse_eval(self, section):
        self.eps_grid = [float(e) for e in section.get('eps_grid', [0, 0.25, 0.5, 1, 2, 3, 4, 5])]
        if not self.eps_grid or self.eps_grid[0] != 0 or any(b <= a for a, b in zip(self.eps_grid, self.eps_grid[1:])):
            raise ConfigError("eval.eps_grid must start at 0 and increase strictly")
        self.sweep_eps = [float(e) for e in section.get('sweep_eps', [0, 0.5, 1, 2])]
        theta_grid = section.get('theta_grid')
        self.theta_grid = None if theta_grid is None else [float(t) for t in theta_grid]
        self.classifiers = list(section.get('classifiers', CLASSIFIERS))
        unknown = [c for c in self.classifiers if c not in CLASSIFIERS]
        if unknown:
            raise ConfigError("eval.classifiers has unknown entries {}".format(unknown))

    def grid(self, d, combiner=False):
        """SvmHyperparams candidates for inputs of dimensionality d."""
        c_values = self.combiner_C_grid if combiner else self.C_grid
        g_values = self.combiner_gamma_grid if combiner else self.gamma_grid
        if c_values is None and g_values is None:
            return default_grid(d)
        c_values = c_values or [0.1, 1.0, 10.0, 100.0]
        g_values = g_values or [g / d for g in (0.1, 1.0, 10.0)]
        return [SvmHyperparams(c, g) for c in c_values for g in g_values]

    def load_dataset(self):
        """The full dataset named in the data section."""
        if self.data_type == 'mnist':
            return load_mnist_idx(self.mnist_images, self.mnist_labels)
        if self.data_type == 'cifar10':
            return load_cifar10_binary(self.cifar10_batches)
        return make_toy_blobs(self.toy_n_per_class, self.toy_seed)

    def model_path(self, name, run=None):
        suffix = '' if run is None else '_run{}'.format(run)
        return join(self.models_dir, '{}{}.dnr'.format(name, suffix))

    def make_dirs(self):
        for path in (self.out_dir, self.models_dir, self.curves_dir, self.plots_dir, self.log_dir):
            os.makedirs(path, exist_ok=True)


def _package_versions():
    import matplotlib
    import numpy
    import pandas
    import scipy
    import sklearn
    import yaml

    from . import __version__
    return [('dnrbench', __version__), ('python', platform.python_version()), ('numpy', numpy.__version__),
            ('scipy', scipy.__version__), ('scikit-learn', sklearn.__version__), ('pandas', pandas.__version__),
            ('matplotlib', matplotlib.__version__), ('pyyaml', yaml.__version__)]


def write_manifest(cfg, command, extra=None):
    """Append one 'key: value' block describing an invocation to
    <out_dir>/manifest.txt.

    Args:
        cfg (RunConfig): the settings used.
        command (str): the cli subcommand.
        extra (dict): further entries (e.g. written artifacts).

    Returns:
        str: the manifest path.
    """
    path = join(cfg.out_dir, 'manifest.txt')
    entries = [('command', command), ('time', datetime.now().isoformat(timespec='seconds')),
               ('config_path', cfg.config_path or '<defaults>'),
               ('config_sha256', _sha256_file(cfg.config_path) if cfg.config_path else '-'),
               ('split_seed', cfg.seed), ('runs', ' '.join(str(s.run_index) for s in cfg.splits)),
               ('network_seed', cfg.network_seed), ('train_seed', cfg.train_cfg.seed),
               ('workers', cfg.n_workers)]
    entries += _package_versions()
    entries += sorted((extra or {}).items())
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(path, 'a') as f:
        for key, value in entries:
            f.write('{}: {}\n'.format(key, value))
        f.write('\n')
    return path

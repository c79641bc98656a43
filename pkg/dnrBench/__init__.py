from .errors import DnrBenchError, DataError, FormatError, LengthError, \
    ConsistencyError, SizeError, StratificationError, VersionError, \
    CorruptionError, ConfigError, ShapeError, NumericError, \
    ConvergenceError, TrainingError, AttackNumericError, AttackTimeout
from .data_io import Dataset, SplitSpec, load_mnist_idx, \
    load_cifar10_binary, make_toy_blobs, split, validation_subset, \
    pretrain_subset
from .tensor_nn import LayerSpec, TrainConfig, Network, build_network, \
    forward_all, vjp_to_input, class_scores, predict_classes, train_sgd
from .kernel_svm import SvmHyperparams, BinaryRbfSvm, MulticlassSvm, \
    rbf_kernel, smo_train, ova_train, grid_search_cv, decision_scores, \
    score_gradient
from .rejection import LayerTap, ScoreVector, DnrModel, fit_dnr, fit_nr, \
    calibrate_threshold, with_threshold, predict_with_reject, \
    combined_scores, dnr_score_gradient, check_stacking_hygiene
from .attack import AttackConfig, AttackResult, omega, omega_gradient, \
    project, pgd_attack, attack_undefended, attack_path, run_attacks
from .eval_harness import EvalPoint, SecurityCurve, \
    accuracy_with_rejection, run_security_eval, threshold_sweep, \
    emit_csv, emit_svg_plot
from .archive import ModelArchive, save_model, load_model
from .run_config import RunConfig
from .setting import generate_config_file
from .fixed_thread_pool_executor import FixedThreadPoolExecutor

__version__ = '0.1.0'
__author__ = 'dnrBench developers'

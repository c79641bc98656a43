"""
This is a script for main common internal functions.
"""
import hashlib
import logging
import multiprocessing as mp
import os
from datetime import datetime
from os.path import exists, join

import yaml

from .errors import ConfigError
from .fixed_thread_pool_executor import FixedThreadPoolExecutor

LOG_FORMAT = "%(asctime)s::%(levelname)s::%(name)s::%(filename)s::%(lineno)d::%(message)s"


def _load_yaml(config_path, logger=None):
    """Load config yaml file

    Args:
        config_path (str): the path of config yaml.
        logger (logging.Logger): the logger object to store logs.

    Returns:
        dict: config, a dictionary of configs.
    """
    logger = _get_logger(logger)
    try:
        with open(config_path, 'r') as yaml_file:
            config = yaml.safe_load(yaml_file)
    except OSError as e:
        logger.error("Cannot open {}".format(config_path))
        raise ConfigError("cannot open config {}: {}".format(config_path, e))
    except yaml.YAMLError as e:
        logger.error("Cannot parse {}".format(config_path))
        raise ConfigError("cannot parse config {}: {}".format(config_path, e))
    if not isinstance(config, dict):
        raise ConfigError("config {} is not a mapping".format(config_path))
    return config


def _set_logger(log_dir, task_name):
    """Route the root logger to a fresh log file for one task.

    Args:
        log_dir (str): the folder for logs, created if missing.
        task_name (str): prefix of the log file name.

    Returns:
        (logging.Logger, str): the logger and the log file path.
    """
    if not exists(log_dir):
        os.makedirs(log_dir)
    for handler in logging.root.handlers[:]:
        logging.root.removeHandler(handler)
    log_path = join(log_dir, '{}_{}.log'.format(task_name, datetime.now().strftime("%d%m%Y_%H%M")))
    logging.basicConfig(filename=log_path, filemode='w',
                        level=logging.INFO, format=LOG_FORMAT)
    return logging.getLogger('dnrBench'), log_path


def _get_logger(logger=None, name='dnrBench'):
    """Return the given logger or the package logger."""
    if logger is None:
        return logging.getLogger(name)
    return logger


def _threads_number(threads_number):
    """Resolve the number of worker threads.

    Args:
        threads_number (str or int or None): 'default' for the cpu count.

    Returns:
        int: at least 1.
    """
    if threads_number is None or threads_number == 'default':
        return mp.cpu_count()
    try:
        n = int(threads_number)
    except (TypeError, ValueError):
        raise ConfigError("threads_number must be 'default' or an integer, got {!r}".format(threads_number))
    if n < 1:
        raise ConfigError("threads_number must be >= 1, got {}".format(n))
    return n


def _run_ordered(fn, arg_tuples, n_workers=1, collect_errors=False):
    """Run fn over argument tuples, keeping submission order.

    Args:
        fn (callable): the task.
        arg_tuples (list of tuple): positional arguments of each task.
        n_workers (int): pool size; 1 runs in the calling thread.
        collect_errors (bool): if True, failures are returned in place of
            results instead of raising the first one.

    Returns:
        list: one result (or exception when collect_errors) per task.
    """
    arg_tuples = list(arg_tuples)
    if n_workers is None or n_workers <= 1 or len(arg_tuples) <= 1:
        out = []
        for args in arg_tuples:
            try:
                out.append(fn(*args))
            except Exception as e:
                if not collect_errors:
                    raise
                out.append(e)
        return out

    with FixedThreadPoolExecutor(size=min(n_workers, len(arg_tuples))) as executor:
        for args in arg_tuples:
            executor.submit(fn, *args)
        executor.drain()
        if not collect_errors:
            executor.raise_first()
        return executor.outcomes(len(arg_tuples))


def _sha256_file(path):
    """Hex sha256 of a file, used in run manifests."""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()

"""
This is a chunk which includes functions to set up a run.
"""
import os
from os.path import exists, join
from shutil import copyfile

from .errors import ConfigError


def template_path():
    """Path of the config template shipped with the package."""
    return join(os.path.dirname(__file__), 'files', 'config_main_template.yaml')


def generate_config_file(dst_dir='.', overwrite=False, logger=None):
    """Copy the config template to dst_dir/config_main.yaml.

    Args:
        dst_dir (str): the destination dir, created if missing.
        overwrite (bool): replace an existing config.
        logger (logging.Logger): logger object to store logs.

    Returns:
        str: the written path.
    """
    os.makedirs(dst_dir, exist_ok=True)
    dst_path = join(dst_dir, 'config_main.yaml')
    if exists(dst_path) and not overwrite:
        raise ConfigError("{} already exists".format(dst_path))
    copyfile(template_path(), dst_path)
    if logger is None:
        print("Generate config yaml file: {}".format(dst_path))
        print("Please add values based on your own needs.")
    else:
        logger.info("Generate config yaml file: {}".format(dst_path))
        logger.info("Please add values based on your own needs.")
    return dst_path

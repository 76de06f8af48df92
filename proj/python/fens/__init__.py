"""Filter-based ensembles for adversarial robustness."""

import json as _json

from ._fens import *  # noqa: F401,F403
from ._fens import ConfigError, default_config_json, resolve_config_json, run_command as _run_command


def default_config():
    """The built-in experiment configuration as a dict."""
    return _json.loads(default_config_json())


def resolve_config(config):
    """Validate a config dict and return it with every default filled in."""
    return _json.loads(resolve_config_json(_json.dumps(config)))


def run_command(name, config, manifest=""):
    """Run a CLI command (train, correlate, attack, transfer, ensemble-eval, certify) in-process."""
    if not isinstance(config, str):
        config = _json.dumps(config)
    return _run_command(name, config, manifest)


__all__ = [n for n in dir() if not n.startswith("_")]

"""Python bindings for the grucnn experiment pipeline and analysis routines.

Experiment commands take a config as a dict, a path to a JSON file, or None
for the desk defaults, and return the command's JSON summary as a dict.
"""

import json
import os

from ._core import (
    CheckpointError,
    DataFormatError,
    DivergenceError,
    __version__,
    accuracy_curves,
    bayes_over_frames,
    derive_seed,
    false_rejection_rate,
    fit_calibration,
    fit_integration,
    make_sequence,
    parse_snr,
    read_prediction_csv,
    snr_label,
    synth_toyset,
)
from . import _core


def desk_default_config():
    return json.loads(_core.desk_default_config())


def load_config(config=None, **overrides):
    """Full config with every default filled in."""
    if config is None:
        config = {}
    elif isinstance(config, (str, os.PathLike)):
        with open(config) as f:
            config = json.load(f)
    config = dict(config, **overrides)
    return json.loads(_core.normalize_config(json.dumps(config)))


def _run(name, config, jobs, stop_after_steps=0, **overrides):
    cfg = load_config(config, **overrides)
    return json.loads(_core.run_command(name, json.dumps(cfg), jobs, stop_after_steps))


def generate(config=None, jobs=1, **overrides):
    return _run("generate", config, jobs, **overrides)


def train(config=None, jobs=1, stop_after_steps=0, **overrides):
    return _run("train", config, jobs, stop_after_steps, **overrides)


def evaluate(config=None, jobs=1, **overrides):
    return _run("eval", config, jobs, **overrides)


def report(config=None, jobs=1, **overrides):
    return _run("report", config, jobs, **overrides)


def run(config=None, jobs=1, **overrides):
    """generate, train, evaluate and report in sequence; returns the report."""
    generate(config, jobs, **overrides)
    train(config, jobs, **overrides)
    evaluate(config, jobs, **overrides)
    return report(config, jobs, **overrides)


__all__ = [
    "CheckpointError",
    "DataFormatError",
    "DivergenceError",
    "__version__",
    "accuracy_curves",
    "bayes_over_frames",
    "derive_seed",
    "desk_default_config",
    "evaluate",
    "false_rejection_rate",
    "fit_calibration",
    "fit_integration",
    "generate",
    "load_config",
    "make_sequence",
    "parse_snr",
    "read_prediction_csv",
    "report",
    "run",
    "snr_label",
    "synth_toyset",
    "train",
]

"""Neural basis models for location, scale and shape (NBMLSS)."""

import json
import os

from ._nbmlss import (  # noqa: F401
    ConfigError,
    DataError,
    DomainError,
    Error,
    NumericError,
    StateError,
    TrainedModel,
    cdf,
    crps_from_quantiles,
    dm_test,
    ensemble_quantiles,
    feature_names,
    kupiec,
    link_transform,
    load_samples,
    logpdf,
    make_exogenous_mask,
    parameter_count,
    pinball,
    quantile,
    sample,
    target_names,
)
from ._nbmlss import _run_command
from ._nbmlss import fit as _fit

__all__ = [
    "Error", "ConfigError", "DataError", "NumericError", "StateError", "DomainError",
    "logpdf", "cdf", "quantile", "sample", "link_transform",
    "load_samples", "feature_names", "target_names", "make_exogenous_mask", "parameter_count",
    "fit", "TrainedModel",
    "pinball", "crps_from_quantiles", "kupiec", "dm_test", "ensemble_quantiles",
    "run",
]


def fit(spec, x, y, train=None, seed=0):
    """Train a model. `spec` and `train` are dicts (see the README)."""
    return _fit(json.dumps(spec), x, y, json.dumps(train or {}), seed)


def run(command, config, base_dir=".", **options):
    """Run a pipeline command (prepare, backtest, gridsearch, export-shapes,
    evaluate) with a config dict or a path to a JSON config."""
    if isinstance(config, (str, os.PathLike)):
        base_dir = os.path.dirname(os.fspath(config))
        with open(config) as fh:
            config = json.load(fh)
    if "forecasts" in options:
        options["forecasts"] = [os.fspath(f) for f in options["forecasts"]]
    return json.loads(_run_command(command, json.dumps(config), os.fspath(base_dir), json.dumps(options)))

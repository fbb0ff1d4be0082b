"""Two-stage capsule network CT classifier (native core)."""

import json as _json

from ._core import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    Error,
    IoError,
    NumericError,
    decide,
    derive_seed,
    format_p_value,
    gate_and_pool,
    gradcam_map,
    logistic_fit,
    mcnemar_exact,
    render_heatmap,
    roc_auc,
    routing,
    select_candidates,
    squash,
    stratified_kfold,
)
from . import _core

__all__ = [
    "Classifier", "ConfigError", "ContractError", "DataError", "DimensionError", "Error",
    "IoError", "NumericError", "compute_metrics", "crossval", "decide", "default_config",
    "derive_seed", "format_p_value", "gate_and_pool", "gradcam_map", "logistic_fit",
    "mcnemar_exact", "render_heatmap", "resolve_config", "roc_auc", "routing",
    "select_candidates", "squash", "stratified_kfold", "write_phantom",
]


def _dump(config):
    return "" if config is None else _json.dumps(config)


def default_config():
    return _json.loads(_core.default_config())


def resolve_config(config):
    """Defaults overlaid with ``config``; unknown keys raise ConfigError."""
    return _json.loads(_core.resolve_config(_dump(config)))


def compute_metrics(decisions, truths, covid_scores=()):
    return _json.loads(_core.compute_metrics(list(decisions), list(truths), list(covid_scores)))


def write_phantom(out_dir, config=None):
    _core.write_phantom(str(out_dir), _dump(config))


def crossval(data_dir, config=None, out_dir=None):
    """Runs the K-fold protocol and returns the aggregate report."""
    return _json.loads(_core.crossval(str(data_dir), _dump(config), None if out_dir is None else str(out_dir)))


class Classifier:
    """Stage 1, stage 2 and fusion checkpoints from one directory."""

    def __init__(self, model_dir, config=None):
        self._impl = _core.Classifier(str(model_dir), _dump(config))

    def predict(self, data_dir):
        return _json.loads(self._impl.predict(str(data_dir)))

    def gradcam_stage1(self, slice, target="covid", layer=""):
        """Heatmap of a preprocessed side×side slice."""
        return self._impl.gradcam_stage1(slice, target, layer)

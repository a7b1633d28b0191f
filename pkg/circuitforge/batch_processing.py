"""File-level orchestration: training every regime into a model directory, and loading that directory back for
the comparison benchmark."""

import logging
from pathlib import Path

from circuitforge.errors import ConfigurationError
from circuitforge.geommlp import load_model, save_model
from circuitforge.mnistdata import build_pair_set
from circuitforge.save import load_json, save_json
from circuitforge.settings import tasks as task_catalogue
from circuitforge.train import Regime, TrainReport, train

logger = logging.getLogger(__name__)


def model_file_name(model_dir, regime):
    return Path(model_dir) / f"model_{Regime(regime).value}.gmlp"


def report_file_name(model_dir, regime):
    return Path(model_dir) / f"train_report_{Regime(regime).value}.json"


def train_and_save(cfg, train_data, test_data, spec, activation, model_path, report_path):
    """Trains one regime and writes its model artifact and TrainReport. model_file_bytes is the size of the
    file actually written. Returns (model, report, [written paths])."""
    model, report = train(cfg, train_data, test_data, spec, activation)
    model_path, size = save_model(model, model_path)
    report.model_file_bytes = size
    report_path = save_json({"config": cfg.to_dict(), **report.to_dict()}, report_path)
    return model, report, [model_path, report_path]


def train_regimes(base_cfg, regimes, train_data, test_data, spec, activation, model_dir):
    """Trains each regime from the same base seed into model_dir. Returns the list of written files."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for regime in regimes:
        cfg = base_cfg.with_regime(regime)
        _, _, paths = train_and_save(
            cfg,
            train_data,
            test_data,
            spec,
            activation,
            model_file_name(model_dir, regime),
            report_file_name(model_dir, regime),
        )
        written.extend(paths)
    return written


def load_regime_models(model_dir, regimes=tuple(Regime)):
    """Loads the model of every regime from model_dir, keyed by table label, with TrainReports where present.
    Returns (models, reports, input paths); reports is None unless every regime has one."""
    models, reports, inputs = {}, {}, []
    for regime in map(Regime, regimes):
        path = model_file_name(model_dir, regime)
        if not path.exists():
            raise FileNotFoundError(f"Missing model for regime {regime.value}: {path}")
        models[regime.label] = load_model(path)
        inputs.append(path)
        report_path = report_file_name(model_dir, regime)
        if report_path.exists():
            reports[regime.label] = TrainReport.from_dict(load_json(report_path))
            inputs.append(report_path)
    if len(reports) != len(models):
        logger.warning("Training reports missing in %s, compute metrics will be skipped", model_dir)
        reports = None
    return models, reports, inputs


def load_task_pair_sets(dataset, task_names, overrides=None):
    """Builds the TaskPairSet of every named task from dataset. overrides maps a task name to a
    (clean, corrupted) pair replacing the configured digits."""
    overrides = overrides or {}
    pair_sets = []
    for name in task_names:
        if name in overrides:
            clean, corrupted = overrides[name]
        elif name in task_catalogue:
            clean, corrupted = task_catalogue[name]
        else:
            raise ConfigurationError(f"Unknown task '{name}', expected one of {sorted(task_catalogue)}")
        pair_sets.append(build_pair_set(dataset, clean, corrupted, name))
    return pair_sets

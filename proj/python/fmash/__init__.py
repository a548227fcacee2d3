"""Python access to the fmash core: metrics, config handling and the CLI."""

import json

from ._core import (
    DataError,
    NumericError,
    UsageError,
    bmp_at_k,
    run,
    topk_metrics,
)
from . import _core


def default_config():
    return json.loads(_core.default_config())


def validate_config(cfg):
    """Returns the validated config as a dict, with defaults filled in."""
    return json.loads(_core.validate_config(json.dumps(cfg)))


def load_report(path):
    return json.loads(_core.report_json(str(path)))


__all__ = [
    "DataError",
    "NumericError",
    "UsageError",
    "bmp_at_k",
    "default_config",
    "load_report",
    "run",
    "topk_metrics",
    "validate_config",
]

"""Python access to the geocascade native core.

Arrays are numpy; configurations are plain dicts in the same layout as the
command-line tool's JSON files.
"""

import json

import geocascade_core as _core
from geocascade_core import (
    ConfigError,
    NoiseSchedule,
    TileGrid,
    axis_weights,
    ddim_sigma,
    ddim_step,
    ddim_timesteps,
    fid,
    make_linear_schedule,
    make_texture,
    noise_plan,
    p2_weight,
    plan_tiles,
    q_sample,
    seam_gradient,
    stitch,
)

__all__ = [
    "ConfigError",
    "NoiseSchedule",
    "TileGrid",
    "axis_weights",
    "count_parameters",
    "ddim_sigma",
    "ddim_step",
    "ddim_timesteps",
    "default_config",
    "degrade",
    "fid",
    "make_linear_schedule",
    "make_texture",
    "noise_plan",
    "normalize_config",
    "p2_weight",
    "plan_tiles",
    "q_sample",
    "reference_parameter_count",
    "seam_gradient",
    "stitch",
]


def default_config():
    return json.loads(_core.default_config())


def normalize_config(config):
    """Fill defaults and validate. Raises ConfigError on unknown keys."""
    return json.loads(_core.normalize_config(json.dumps(config)))


def count_parameters(config=None):
    return _core.count_parameters(json.dumps(config or {}))


def reference_parameter_count():
    return _core.reference_parameter_count()


def degrade(hr, config=None, seed=0):
    """Returns (lr, record) where record describes every sampled stage."""
    lr, record = _core.degrade(hr, json.dumps(config or {}), seed)
    return lr, json.loads(record)

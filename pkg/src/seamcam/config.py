"""Run configuration: flat dotted-key JSON, overridable by CLI flags.

Every command resolves its config from (defaults, config file, flags),
rejects unknown keys, and serializes the fully resolved result into the
run's output directory so any run can be reproduced from its artifacts.
"""

import json

from .errors import ConfigError

GEN_DATA_DEFAULTS = {
    "gen.n": 200,
    "gen.size": 64,
    "gen.seed": 1,
    "gen.out": None,
}

TRAIN_DEFAULTS = {
    "train.data": None,
    "train.out": None,
    "train.mode": "seam",           # baseline | er | seam
    "train.steps": 2000,
    "train.batch_size": 4,
    "train.lr_init": 0.01,
    "train.poly_gamma": 0.9,
    "train.momentum": 0.9,
    "train.weight_decay": 5e-4,
    "train.keep_fraction": 0.2,
    "train.seed": 0,
    "train.checkpoint_interval": 500,
    "train.resume": False,
    "transform.rescale_rate": 0.3,
    "transform.rotation_deg": None,
    "transform.translation_px": None,
    "transform.hflip": False,
    "transform.identity": False,
    "weights.cls": None,            # None: derived from train.mode
    "weights.er": None,
    "weights.ecr": None,
    "model.stages": "16,32,64,64",
    "model.reducers": "8,16",
    "model.embed": 32,
}

EVAL_DEFAULTS = {
    "eval.checkpoint": None,
    "eval.data": None,
    "eval.out": None,
    "eval.scales": "0.5,1.0,1.5,2.0",
    "eval.flip": True,
    "eval.alpha_grid": "",          # empty: 0.05..0.95 step 0.05
    "eval.eq_scales": "0.5",
    "eval.use_pcm": None,           # None: from checkpoint mode
    "eval.per_scale": True,
}

INFER_DEFAULTS = {
    "infer.checkpoint": None,
    "infer.data": None,
    "infer.out": None,
    "infer.scales": "0.5,1.0,1.5,2.0",
    "infer.flip": True,
    "infer.alpha": 0.45,
    "infer.use_pcm": None,
}

ABLATE_DEFAULTS = {
    "ablate.runs": None,            # comma-separated eval output dirs
    "ablate.out": None,
}


def resolve(defaults, file_path=None, overrides=None):
    """Merge defaults <- config file <- flag overrides; reject unknown keys."""
    cfg = dict(defaults)
    for source_name, source in (("config file", _load_file(file_path)),
                                ("command line", overrides or {})):
        for key, value in source.items():
            if key not in cfg:
                raise ConfigError(f"unknown {source_name} key {key!r}")
            cfg[key] = value
    return cfg


def _load_file(path):
    if path is None:
        return {}
    try:
        with open(path) as fp:
            loaded = json.load(fp)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if not isinstance(loaded, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return loaded


def dump(cfg, path):
    with open(path, "w") as fp:
        json.dump(cfg, fp, indent=2, sort_keys=True)
        fp.write("\n")


def parse_floats(text):
    return tuple(float(v) for v in str(text).split(",") if v != "")


def parse_ints(text):
    return tuple(int(v) for v in str(text).split(",") if v != "")


def require(cfg, key):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"missing required option {key!r}")
    return cfg[key]

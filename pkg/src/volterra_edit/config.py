"""Run configuration: defaults, strict-key validation, stable hashing."""

import hashlib
import json
from pathlib import Path

from .pipeline import ConfigError

DEFAULTS = {
    "seed": 42,
    "corpus": {
        "n": 8,
        "size": 96,
        "objects_low": 2,
        "objects_high": 4,
    },
    "policy": {
        "min_area_fraction": 0.0018,
        "max_area_fraction": 0.5,
        "clip_accept_threshold": 0.2,
        "dilation_kernel": 15,
        "multi_instance": True,
        "quality_variance_max": 1500.0,
        "quality_edge_density_max": 0.35,
        "blocklist_file": None,
    },
    "clients": {
        "mock_seed": 0,
        "embed_dim": 64,
        "detector_min_score": 0.35,
        "clients": {},
    },
    "instructions": {
        "strategies": ["simple", "attribute", "spatial", "multi_instance"],
        "margin": 0.3,
    },
    "training": {
        "schedule": {"T": 200, "beta_start": 1e-4, "beta_end": 8e-2},
        "steps": 200,
        "lr": 1e-3,
        "batch_size": 8,
        "mode": "volterra",
        "rank_q": 2,
        "bridge_kernel": 3,
        "cascade": 1,
        "widths": [16, 24, 32],
        "control_widths": [8, 12, 16],
        "cond_dim": 64,
        "text_dim": 64,
        "image_size": 32,
        "base_pretrain_steps": 400,
        "conditioning": "image",
    },
    "sampling": {"steps": 40, "seed": 7},
}

_VALUE_CHECKS = {
    ("training", "mode"): lambda v: v in ("linear", "volterra"),
    ("training", "conditioning"): lambda v: v in ("image", "canny"),
}


def _merge(defaults, override, path=()):
    if not isinstance(override, dict):
        raise ConfigError(f"expected mapping at {'.'.join(path) or '<root>'}")
    # the clients.clients subtree maps free-form kind names, skip key checks
    free_form = path == ("clients", "clients")
    out = {}
    unknown = set(override) - set(defaults) if not free_form else set()
    if unknown:
        raise ConfigError(f"unknown config keys at {'.'.join(path) or '<root>'}: "
                          f"{sorted(unknown)}")
    if free_form:
        return dict(override) if override else dict(defaults)
    for key, default in defaults.items():
        if key in override and isinstance(default, dict):
            out[key] = _merge(default, override[key], path + (key,))
        elif key in override:
            value = override[key]
            check = _VALUE_CHECKS.get(path + (key,))
            if check and not check(value):
                raise ConfigError(f"bad value for {'.'.join(path + (key,))}: {value!r}")
            out[key] = value
        else:
            out[key] = json.loads(json.dumps(default))  # deep copy
    return out


def load_config(source=None):
    """Merge a YAML/JSON file (or dict) over the defaults; unknown keys are
    rejected so typos cannot silently fall back."""
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = source
    else:
        import yaml

        data = yaml.safe_load(Path(source).read_text()) or {}
    return _merge(DEFAULTS, data)


def config_hash(cfg):
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
